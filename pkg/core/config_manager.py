"""
Configuration Management for Factual Recall Experiments
Experiment parameters, per-checkpoint presets and YAML/JSON config files
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, asdict, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import yaml

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_K = 9
SALIENCY_TARGETS = ("predicted", "attribute")
EMBEDDING_PROJECTIONS = ("embedding", "delta")
KNOCKOUT_SCOPES = ("all_layers", "window")


@dataclass
class ModelPreset:
    """Experiment constants tied to a checkpoint family"""
    name: str
    n_layers: int
    window_k: int
    reference_layer: int
    description: str


# Predefined checkpoint presets
MODEL_PRESETS = {
    "gpt2-xl": ModelPreset(
        name="gpt2-xl",
        n_layers=48,
        window_k=9,
        reference_layer=40,
        description="GPT-2 XL, 1.5B parameters, serial layout",
    ),
    "gpt-j": ModelPreset(
        name="gpt-j",
        n_layers=28,
        window_k=5,
        reference_layer=22,
        description="GPT-J, 6B parameters, parallel layout",
    ),
    "gpt2-small": ModelPreset(
        name="gpt2-small",
        n_layers=12,
        window_k=3,
        reference_layer=9,
        description="GPT-2 small, 124M parameters, desk-scale smoke runs",
    ),
}


@dataclass
class ExperimentConfig:
    """Everything an experiment run depends on besides the input files' bytes"""
    # Inputs
    weights: Optional[str] = None
    tokenizer_vocab: Optional[str] = None
    tokenizer_merges: Optional[str] = None       # absent -> whitespace tokenizer
    dataset: Optional[str] = None
    corpus: Optional[str] = None
    stopwords: Optional[str] = None              # absent -> bundled list
    candidate_cache: Optional[str] = None
    out_dir: str = "results"

    # Model preset
    preset: Optional[str] = None

    # Attention knockout
    window_k: Optional[int] = None               # None -> preset, else 9
    window_sizes: List[int] = field(default_factory=lambda: [1, 5, 9, 13, 17, 21])
    knockout_scope: str = "all_layers"           # extraction knockout conditions

    # Vocabulary projections
    top_k: int = 50
    head_top_k: int = 10
    subupdate_top_m: int = 100
    subupdate_max_layer: Optional[int] = None    # None -> every layer
    normalize_update_projection: bool = False
    embedding_projection: str = "embedding"
    knowledge_hub_threshold: float = 0.10

    # Sublayer knockout
    reference_layer: Optional[int] = None        # None -> preset, else ceil(5L/6)
    sublayer_span: int = 10
    measure_all_layers: bool = False

    # Patching
    patch_layers: List[int] = field(default_factory=lambda: [0, 1, 5, 10, 20])

    # Retrieval
    candidate_top_n: int = 100

    # Saliency
    saliency_target: str = "predicted"

    # Run control
    seed: int = 0
    max_queries: Optional[int] = None
    workers: int = 4
    permissive_dataset: bool = False

    def validate(self) -> Tuple[bool, str]:
        """
        Static consistency checks
        Returns (valid, reason)
        """
        if self.preset is not None and self.preset not in MODEL_PRESETS:
            return False, f"Unknown preset '{self.preset}' (available: {', '.join(sorted(MODEL_PRESETS))})"
        if self.window_k is not None and (self.window_k <= 0 or self.window_k % 2 == 0):
            return False, f"window_k must be odd and positive, got {self.window_k}"
        bad = [k for k in self.window_sizes if k <= 0 or k % 2 == 0]
        if bad:
            return False, f"window_sizes must be odd and positive, got {bad}"
        if self.top_k <= 0 or self.head_top_k <= 0 or self.subupdate_top_m <= 0:
            return False, "top_k, head_top_k and subupdate_top_m must be positive"
        if self.subupdate_max_layer is not None and self.subupdate_max_layer <= 0:
            return False, f"subupdate_max_layer must be positive, got {self.subupdate_max_layer}"
        if self.sublayer_span <= 0:
            return False, f"sublayer_span must be positive, got {self.sublayer_span}"
        if any(layer < 0 for layer in self.patch_layers):
            return False, f"patch_layers must be non-negative, got {self.patch_layers}"
        if self.candidate_top_n <= 0:
            return False, f"candidate_top_n must be positive, got {self.candidate_top_n}"
        if self.saliency_target not in SALIENCY_TARGETS:
            return False, f"saliency_target must be one of {SALIENCY_TARGETS}"
        if self.embedding_projection not in EMBEDDING_PROJECTIONS:
            return False, f"embedding_projection must be one of {EMBEDDING_PROJECTIONS}"
        if self.knockout_scope not in KNOCKOUT_SCOPES:
            return False, f"knockout_scope must be one of {KNOCKOUT_SCOPES}"
        if self.workers <= 0:
            return False, f"workers must be positive, got {self.workers}"
        if self.max_queries is not None and self.max_queries <= 0:
            return False, f"max_queries must be positive, got {self.max_queries}"
        if not 0 < self.knowledge_hub_threshold <= 1:
            return False, "knowledge_hub_threshold must lie in (0, 1]"
        return True, "OK"

    def resolve(self, n_layers: int) -> "ExperimentConfig":
        """Fill model-dependent defaults from the preset or the layer count"""
        preset = MODEL_PRESETS.get(self.preset) if self.preset else None
        if preset is not None and preset.n_layers != n_layers:
            logger.warning(f"Preset '{preset.name}' expects {preset.n_layers} layers, model has {n_layers}")

        window_k = self.window_k
        if window_k is None:
            window_k = preset.window_k if preset else DEFAULT_WINDOW_K
        reference_layer = self.reference_layer
        if reference_layer is None:
            reference_layer = preset.reference_layer if preset else math.ceil(5 * n_layers / 6)
        reference_layer = min(max(reference_layer, 1), n_layers)

        patch_layers = sorted({layer for layer in self.patch_layers if layer <= n_layers - 1})
        dropped = sorted(set(self.patch_layers) - set(patch_layers))
        if dropped:
            logger.info(f"Patch source layers {dropped} exceed L-1={n_layers - 1}; skipped")

        return replace(self, window_k=window_k, reference_layer=reference_layer, patch_layers=patch_layers)

    def snapshot(self) -> Dict:
        """Config as echoed into reports"""
        data = asdict(self)
        return {key: data[key] for key in sorted(data)}

    def config_hash(self) -> str:
        payload = json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ConfigManager:
    """Loads experiment configs from YAML/JSON and applies command-line overrides"""

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        self.config_path = Path(config_path).expanduser() if config_path else None

    def load(self, overrides: Optional[Dict] = None) -> ExperimentConfig:
        data: Dict = {}
        if self.config_path is not None:
            with open(self.config_path, "r", encoding="utf-8") as f:
                # safe_load parses JSON as well
                data = yaml.safe_load(f) or {}
            if not isinstance(data, dict):
                raise ValueError(f"{self.config_path}: top level must be a mapping")
            logger.info(f"Loaded experiment configuration from {self.config_path}")

        known = {f.name for f in fields(ExperimentConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown configuration keys: {', '.join(unknown)}")

        for key, value in (overrides or {}).items():
            if key not in known:
                raise ValueError(f"Unknown configuration override '{key}'")
            if value is not None:
                data[key] = value

        config = ExperimentConfig(**data)
        valid, reason = config.validate()
        if not valid:
            raise ValueError(f"Invalid configuration: {reason}")
        return config

    def save(self, config: ExperimentConfig, path: Optional[Union[str, Path]] = None):
        path = Path(path) if path else self.config_path
        if path is None:
            raise ValueError("No configuration path given")
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(config.snapshot(), f, default_flow_style=False, sort_keys=True)
        logger.info(f"Experiment configuration saved to {path}")

    def create_default_config(self, path: Union[str, Path]):
        """Write a default configuration file and list the presets"""
        self.save(ExperimentConfig(), path)
        print(f"Default configuration created at: {path}")
        print("\nAvailable model presets:")
        for name, preset in MODEL_PRESETS.items():
            print(f"  {name}: L={preset.n_layers}, window k={preset.window_k}, "
                  f"reference layer={preset.reference_layer} ({preset.description})")
