"""
Intervention Plans
Declarative attention knockouts, sublayer knockouts and representation patches.

Positions are 0-based; layers are 1-based (layer 0 is the embedding output).
An attention block (ℓ, reader, source) stops `reader` from attending to
`source` in every head of layer ℓ, so reader >= source always holds.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Sequence

import numpy as np

from model_config import ModelConfig

logger = logging.getLogger(__name__)

MHSA = "mhsa"
MLP = "mlp"
SUBLAYER_KINDS = (MHSA, MLP)

SUBLAYER_KNOCKOUT_SPAN = 10
WINDOW_SWEEP_SIZES = (1, 5, 9, 13, 17, 21)
PATCH_SOURCE_LAYERS = (0, 1, 5, 10, 20)


class PlanValidationError(ValueError):
    """Plan references layers/positions outside the model or the query"""


class AttentionBlock(NamedTuple):
    layer: int
    reader: int
    source: int


class SublayerZeroing(NamedTuple):
    kind: str
    layer: int
    position: int


class Patch(NamedTuple):
    position: int
    source_layer: int


@dataclass(frozen=True)
class InterventionPlan:
    """Immutable set of edits applied during one forward pass"""
    attention_blocks: FrozenSet[AttentionBlock] = frozenset()
    sublayer_zeroings: FrozenSet[SublayerZeroing] = frozenset()
    patches: FrozenSet[Patch] = frozenset()
    metadata: dict = field(default_factory=dict, compare=False, hash=False)

    def is_empty(self) -> bool:
        return not (self.attention_blocks or self.sublayer_zeroings or self.patches)

    def blocks_at(self, layer: int) -> List[AttentionBlock]:
        return sorted(b for b in self.attention_blocks if b.layer == layer)

    def zeroed_positions(self, kind: str, layer: int) -> List[int]:
        return sorted(z.position for z in self.sublayer_zeroings if z.kind == kind and z.layer == layer)

    def patch_sources(self) -> Dict[int, int]:
        """position -> source layer"""
        return {p.position: p.source_layer for p in self.patches}

    def merge(self, *others: "InterventionPlan") -> "InterventionPlan":
        blocks = set(self.attention_blocks)
        zeroings = set(self.sublayer_zeroings)
        patches = set(self.patches)
        metadata = dict(self.metadata)
        for other in others:
            blocks |= other.attention_blocks
            zeroings |= other.sublayer_zeroings
            patches |= other.patches
            metadata.update(other.metadata)
        return InterventionPlan(frozenset(blocks), frozenset(zeroings), frozenset(patches), metadata)

    def to_dict(self) -> dict:
        return {
            "attention_blocks": [list(b) for b in sorted(self.attention_blocks)],
            "sublayer_zeroings": [list(z) for z in sorted(self.sublayer_zeroings)],
            "patches": [list(p) for p in sorted(self.patches)],
            "metadata": {k: self.metadata[k] for k in sorted(self.metadata)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "InterventionPlan":
        return cls(
            attention_blocks=frozenset(AttentionBlock(*map(int, b)) for b in data.get("attention_blocks", [])),
            sublayer_zeroings=frozenset(
                SublayerZeroing(str(k), int(l), int(i)) for k, l, i in data.get("sublayer_zeroings", [])
            ),
            patches=frozenset(Patch(*map(int, p)) for p in data.get("patches", [])),
            metadata=dict(data.get("metadata", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "InterventionPlan":
        return cls.from_dict(json.loads(text))


EMPTY_PLAN = InterventionPlan()


@dataclass(frozen=True)
class KnockoutWindow:
    """Block `target_position` from attending to `source_positions` around a layer"""
    center_layer: int
    width: int
    source_positions: Sequence[int]
    target_position: int

    def layer_range(self, n_layers: int) -> range:
        half = self.width // 2
        return range(max(1, self.center_layer - half), min(n_layers, self.center_layer + half) + 1)


# ─── Validation ──────────────────────────────────────────────────────────────

def validate_plan(plan: InterventionPlan, config: ModelConfig, n_positions: int):
    """Raise PlanValidationError before any computation if the plan is out of range"""
    L = config.n_layers

    def check_layer(layer, what):
        if not 1 <= layer <= L:
            raise PlanValidationError(f"{what} references layer {layer} outside 1..{L}")

    def check_position(pos, what):
        if not 0 <= pos < n_positions:
            raise PlanValidationError(f"{what} references position {pos} outside 0..{n_positions - 1}")

    for block in plan.attention_blocks:
        check_layer(block.layer, "Attention block")
        check_position(block.reader, "Attention block")
        check_position(block.source, "Attention block")
        if block.source > block.reader:
            raise PlanValidationError(
                f"Attention block {tuple(block)} references a future position (source > reader)"
            )
    for zeroing in plan.sublayer_zeroings:
        if zeroing.kind not in SUBLAYER_KINDS:
            raise PlanValidationError(f"Unknown sublayer kind '{zeroing.kind}'")
        check_layer(zeroing.layer, "Sublayer zeroing")
        check_position(zeroing.position, "Sublayer zeroing")

    seen = {}
    for patch in plan.patches:
        check_position(patch.position, "Patch")
        if not 0 <= patch.source_layer <= L - 1:
            raise PlanValidationError(f"Patch source layer {patch.source_layer} outside 0..{L - 1}")
        if patch.position in seen and seen[patch.position] != patch.source_layer:
            raise PlanValidationError(f"Position {patch.position} patched from two source layers")
        seen[patch.position] = patch.source_layer


# ─── Plan builders ───────────────────────────────────────────────────────────

def knockout_window(window: KnockoutWindow, config: ModelConfig) -> InterventionPlan:
    """Attention blocks for every layer of the window and every (target, source) pair"""
    if window.width <= 0 or window.width % 2 == 0:
        raise PlanValidationError(f"Window width must be odd and positive, got {window.width}")
    if not 1 <= window.center_layer <= config.n_layers:
        raise PlanValidationError(f"Window center {window.center_layer} outside 1..{config.n_layers}")
    late = [s for s in window.source_positions if s > window.target_position]
    if late:
        raise PlanValidationError(
            f"Target position {window.target_position} precedes source positions {late}"
        )

    blocks = frozenset(
        AttentionBlock(layer, window.target_position, source)
        for layer in window.layer_range(config.n_layers)
        for source in window.source_positions
    )
    return InterventionPlan(attention_blocks=blocks, metadata={"window_k": window.width})


def block_sources_at_layers(sources: Iterable[int], target: int, layers: Iterable[int]) -> InterventionPlan:
    """Knock out target→source edges at an explicit set of layers"""
    sources = list(sources)
    return InterventionPlan(attention_blocks=frozenset(
        AttentionBlock(layer, target, source) for layer in layers for source in sources
    ))


def sublayer_knockout(kind: str,
                      start_layer: int,
                      position: int,
                      config: ModelConfig,
                      span: int = SUBLAYER_KNOCKOUT_SPAN) -> InterventionPlan:
    """Zero `kind` updates at `position` for layers ℓ..min(ℓ+span-1, L)"""
    if kind not in SUBLAYER_KINDS:
        raise PlanValidationError(f"Unknown sublayer kind '{kind}'")
    if not 1 <= start_layer <= config.n_layers:
        raise PlanValidationError(f"Start layer {start_layer} outside 1..{config.n_layers}")
    last = min(start_layer + span - 1, config.n_layers)
    return InterventionPlan(sublayer_zeroings=frozenset(
        SublayerZeroing(kind, layer, position) for layer in range(start_layer, last + 1)
    ))


def patch_positions(positions: Iterable[int], source_layer: int, config: ModelConfig) -> InterventionPlan:
    """MHSA at every layer ℓ' > source_layer reads x^{source_layer} at these positions"""
    if not 0 <= source_layer <= config.n_layers - 1:
        raise PlanValidationError(f"Patch source layer {source_layer} outside 0..{config.n_layers - 1}")
    return InterventionPlan(
        patches=frozenset(Patch(pos, source_layer) for pos in positions),
        metadata={"patch_source_layer": source_layer},
    )


def apply_plan_to_mask(base_mask: np.ndarray, plan: InterventionPlan, layer: int) -> np.ndarray:
    """Copy of the causal mask with this layer's blocked edges set to -inf (shared by all heads)"""
    mask = base_mask.copy()
    for block in plan.blocks_at(layer):
        mask[block.reader, block.source] = -np.inf
    return mask


# ─── Experiment presets ──────────────────────────────────────────────────────

def info_flow_conditions(query) -> Dict[str, List[int]]:
    """Source sets knocked out into the last position: subject, relation, last"""
    last = query.n_tokens - 1
    return {
        "subject": list(query.subject_positions),
        "relation": list(query.relation_positions),
        "last": [last],
    }


def exclude_first_position(conditions: Dict[str, List[int]]) -> Dict[str, List[int]]:
    """Same conditions without ever blocking position 0 (empty sets dropped)"""
    trimmed = {name: [p for p in positions if p != 0] for name, positions in conditions.items()}
    return {name: positions for name, positions in trimmed.items() if positions}


def subject_position_conditions(query) -> Dict[str, List[int]]:
    """Block every subject position except one: first, before-last, last"""
    subject = list(query.subject_positions)
    if len(subject) < 2:
        return {}
    keep = {"first": subject[0], "last": subject[-1]}
    if len(subject) >= 3:
        keep["before-last"] = subject[-2]
    return {name: [p for p in subject if p != kept] for name, kept in keep.items()}


def order_subset(query) -> str:
    return "subject_first" if query.subject_positions[0] == 0 else "subject_later"


def extraction_knockout_conditions(query) -> Dict[str, List[int]]:
    """Source sets blocked from the last position when measuring MHSA extraction"""
    n = query.n_tokens
    last = n - 1
    subject = list(query.subject_positions)
    relation = list(query.relation_positions)
    subject_last = subject[-1]
    everything = list(range(n))
    return {
        "none": [],
        "subj": subject,
        "non-subj": sorted(relation + [last]),
        "last": [last],
        "subj-last": [subject_last],
        "subj-last+last": [subject_last, last],
        "all-but-last": [p for p in everything if p != last],
        "all-but-subj-last": [p for p in everything if p != subject_last],
        "all-but-subj-last+last": [p for p in everything if p not in (subject_last, last)],
        "all-non-subj-but-last": relation,
        "all-but-first": [p for p in everything if p != 0],
    }
