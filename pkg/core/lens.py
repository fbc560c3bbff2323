"""
Vocabulary Lens
Projects hidden states, sublayer updates, head OV circuits and MLP sub-updates
into vocabulary space.

Two projection modes exist and callers pick one explicitly:
  delta      final norm, then the prediction head (logit lens)
  embedding  raw E·h, no norm (used for sublayer updates)
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from model_engine import TransformerEngine, ForwardTrace, argmax_lowest
from interventions import MHSA

logger = logging.getLogger(__name__)

DELTA = "delta"
EMBEDDING = "embedding"
PROJECTION_MODES = (DELTA, EMBEDDING)

DEFAULT_TOP_K = 50
DEFAULT_HEAD_TOP_K = 10
DEFAULT_SUBUPDATE_TOP_M = 100


def top_k_tokens(logits: np.ndarray, k: int) -> List[Tuple[int, float]]:
    """Highest scores first, lowest token id first among equal scores"""
    if not 0 < k <= logits.shape[-1]:
        raise ValueError(f"top_k must lie in 1..{logits.shape[-1]}, got {k}")
    order = np.argsort(-logits, kind="stable")[:k]
    return [(int(i), float(logits[i])) for i in order]


def token_rank(logits: np.ndarray, token_id: int) -> int:
    """1-based rank of a token; equal scores rank lower ids first"""
    score = logits[token_id]
    return 1 + int(np.sum(logits > score)) + int(np.sum(logits[:token_id] == score))


@dataclass
class VocabProjection:
    layer: Optional[int]
    position: Optional[int]
    top_tokens: List[Tuple[int, float]]
    full_rank_of: Optional[Dict[int, int]] = None

    @property
    def token_ids(self) -> List[int]:
        return [t for t, _ in self.top_tokens]


@dataclass
class ExtractionEvent:
    """t_star is the final prediction, t_prime the argmax of the projected update"""
    layer: int
    kind: str
    t_star: int
    t_prime: int
    head: Optional[int] = None

    @property
    def matched(self) -> bool:
        return self.t_star == self.t_prime


@dataclass
class HeadMappingRow:
    layer: int
    head: int
    source_token: int
    top_tokens: List[Tuple[int, float]]

    @property
    def token_ids(self) -> List[int]:
        return [t for t, _ in self.top_tokens]


@dataclass
class SubUpdate:
    layer: int
    index: int
    coefficient: float
    direction: np.ndarray = field(repr=False)
    contribution: float = 0.0
    top_tokens: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def token_ids(self) -> List[int]:
        return [t for t, _ in self.top_tokens]


class VocabularyLens:
    """Read-only vocabulary-space views over one engine's weights"""

    def __init__(self, engine: TransformerEngine, tokenizer=None, normalize_update_projection: bool = False):
        self.engine = engine
        self.config = engine.config
        self.weights = engine.weights
        self.tokenizer = tokenizer
        self.normalize_update_projection = normalize_update_projection

    def logits(self, hidden: np.ndarray, mode: str = DELTA) -> np.ndarray:
        if mode == DELTA:
            return self.engine.head_logits(hidden)
        if mode == EMBEDDING:
            return self.engine.embedding_logits(hidden)
        raise ValueError(f"Unknown projection mode '{mode}', expected one of {PROJECTION_MODES}")

    def update_logits(self, update: np.ndarray) -> np.ndarray:
        """E·update, optionally after the final norm"""
        if self.normalize_update_projection:
            return self.engine.embedding_logits(self.engine.final_norm(update))
        return self.engine.embedding_logits(update)

    # ─── Hidden-state projections ──────────────────────────────────────────

    def project_to_vocab(self, hidden: np.ndarray, top_k: int = DEFAULT_TOP_K, mode: str = DELTA,
                         layer: Optional[int] = None, position: Optional[int] = None,
                         rank_tokens: Sequence[int] = ()) -> VocabProjection:
        logits = self.logits(hidden, mode)
        ranks = {int(t): token_rank(logits, int(t)) for t in rank_tokens} if rank_tokens else None
        return VocabProjection(layer=layer, position=position,
                               top_tokens=top_k_tokens(logits, top_k), full_rank_of=ranks)

    def layer_projections(self, trace: ForwardTrace, position: int,
                          top_k: int = DEFAULT_TOP_K) -> List[VocabProjection]:
        """Logit lens of x^ℓ at one position for ℓ = 1..L"""
        return [
            self.project_to_vocab(trace.residual(layer)[position], top_k, DELTA, layer, position)
            for layer in range(1, trace.n_layers + 1)
        ]

    def attribute_rank(self, hidden: np.ndarray, attribute_token: int, mode: str = DELTA) -> int:
        if not 0 <= attribute_token < self.config.vocab_size:
            raise ValueError(f"Token id {attribute_token} outside 0..{self.config.vocab_size - 1}")
        return token_rank(self.logits(hidden, mode), attribute_token)

    # ─── Extraction ────────────────────────────────────────────────────────

    def detect_extraction(self, trace: ForwardTrace, layer: int, kind: str,
                          target: Optional[int] = None) -> ExtractionEvent:
        """Compare argmax(E · update at the last position) with the final prediction (or `target`)"""
        update = trace.update(kind, layer)[trace.last_position]
        t_star = trace.predicted_token if target is None else int(target)
        return ExtractionEvent(layer, kind, t_star, argmax_lowest(self.update_logits(update)))

    def extraction_grid(self, trace: ForwardTrace, kind: str,
                        target: Optional[int] = None) -> List[ExtractionEvent]:
        return [self.detect_extraction(trace, layer, kind, target) for layer in range(1, trace.n_layers + 1)]

    def head_extraction(self, trace: ForwardTrace, layer: int, head: int,
                        target: Optional[int] = None) -> ExtractionEvent:
        """Extraction test on a single head's contribution at the last position"""
        contribution = trace.head_contribution(layer, head)[trace.last_position]
        t_star = trace.predicted_token if target is None else int(target)
        return ExtractionEvent(layer, MHSA, t_star, argmax_lowest(self.update_logits(contribution)), head=head)

    # ─── Head OV mappings ──────────────────────────────────────────────────

    def head_mapping(self, layer: int, head: int, source_token: int,
                     top_k: int = DEFAULT_HEAD_TOP_K) -> HeadMappingRow:
        """Row `source_token` of E W_V^j W_O^j E^T, evaluated as vector-matrix products"""
        if not 0 <= head < self.config.n_heads:
            raise ValueError(f"Head {head} outside 0..{self.config.n_heads - 1}")
        if not 0 <= source_token < self.config.vocab_size:
            raise ValueError(f"Token id {source_token} outside 0..{self.config.vocab_size - 1}")
        _, _, w_v, w_o = self.weights.head_slices(layer, head, self.config.n_heads)
        E = self.weights.embedding
        row = ((E[source_token] @ w_v) @ w_o) @ E.T
        return HeadMappingRow(layer, head, source_token, top_k_tokens(row, top_k))

    def find_mapping_heads(self, layer: int, subject_tokens: Sequence[int], attribute_token: int,
                           top_k: int = DEFAULT_HEAD_TOP_K) -> List[int]:
        """Heads whose OV mapping ranks the attribute in the top-k of any subject token"""
        heads = []
        for head in range(self.config.n_heads):
            for token in dict.fromkeys(subject_tokens):
                if attribute_token in self.head_mapping(layer, head, token, top_k).token_ids:
                    heads.append(head)
                    break
        return heads

    # ─── MLP sub-updates ───────────────────────────────────────────────────

    def mlp_subupdate_decomposition(self, trace: ForwardTrace, layer: int, position: int,
                                    top_m: int = DEFAULT_SUBUPDATE_TOP_M, top_k: int = 10,
                                    mode: str = EMBEDDING) -> List[SubUpdate]:
        """
        Split m^ℓ_i into coefficient·w_F columns and keep the top_m by
        |coefficient|·‖w_F‖; the full set sums to m^ℓ_i minus the output bias.
        """
        lw = self.weights.layer(layer)
        coefficients = self.engine.activate(trace.mlp_preactivation(layer)[position])
        norms = np.linalg.norm(lw.w_out, axis=0)
        contribution = np.abs(coefficients) * norms
        top_m = min(top_m, len(coefficients))
        order = np.argsort(-contribution, kind="stable")[:top_m]

        subupdates = []
        for j in order:
            subupdates.append(SubUpdate(
                layer=layer,
                index=int(j),
                coefficient=float(coefficients[j]),
                direction=lw.w_out[:, j],
                contribution=float(contribution[j]),
                top_tokens=self.value_vector_projection(layer, int(j), top_k, mode).top_tokens,
            ))
        return subupdates

    def value_vector_projection(self, layer: int, index: int, top_k: int = 10,
                                mode: str = EMBEDDING) -> VocabProjection:
        """Top tokens of column `index` of W_F at `layer`; independent of the input"""
        w_out = self.weights.layer(layer).w_out
        if not 0 <= index < w_out.shape[1]:
            raise ValueError(f"MLP dimension {index} outside 0..{w_out.shape[1] - 1}")
        logits = self.logits(w_out[:, index], mode)
        return VocabProjection(layer=layer, position=None,
                               top_tokens=top_k_tokens(logits, min(top_k, self.config.vocab_size)))

    # ─── Records ───────────────────────────────────────────────────────────

    def token_string(self, token_id: int) -> str:
        if self.tokenizer is None:
            return str(token_id)
        return self.tokenizer.token_string(token_id)

    def projection_record(self, projection: VocabProjection, kind: str = "residual") -> dict:
        return {
            "layer": projection.layer,
            "position": projection.position,
            "kind": kind,
            "tokens": [
                {"id": t, "string": self.token_string(t), "score": round(score, 6)}
                for t, score in projection.top_tokens
            ],
        }

    def event_record(self, event: ExtractionEvent, position: int) -> dict:
        return {
            "layer": event.layer,
            "position": position,
            "kind": event.kind,
            "head": event.head,
            "matched": event.matched,
            "tokens": [
                {"id": event.t_star, "string": self.token_string(event.t_star), "role": "t_star"},
                {"id": event.t_prime, "string": self.token_string(event.t_prime), "role": "t_prime"},
            ],
        }
