"""
Transformer Engine
Deterministic decoder-only forward pass with full trace capture and intervention hooks.

Positions are 0-based, layers 1-based; hidden_states[0] is the embedding sum.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from model_config import ModelConfig, WeightStore, Layout, Activation, HeadKind
from interventions import (
    InterventionPlan,
    EMPTY_PLAN,
    MHSA,
    MLP,
    validate_plan,
    apply_plan_to_mask,
)

logger = logging.getLogger(__name__)

# sqrt(2/pi) for the tanh approximation of GELU
GELU_COEFF = float(np.sqrt(2.0 / np.pi))


class FullyMaskedRowError(ValueError):
    """Every entry of an attention row is masked"""

    def __init__(self, rows=None):
        detail = f" (rows {rows})" if rows is not None else ""
        super().__init__(f"fully-masked row{detail}: knockout blocks every source position")


# ─── Numerical primitives ────────────────────────────────────────────────────

def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax along the last axis; -inf entries map to exactly 0"""
    scores = np.asarray(scores)
    allowed = np.isfinite(scores)
    dead = ~allowed.any(axis=-1)
    if dead.any():
        raise FullyMaskedRowError(np.argwhere(dead).tolist())
    peak = np.max(np.where(allowed, scores, -np.inf), axis=-1, keepdims=True)
    exp = np.where(allowed, np.exp(scores - peak), 0)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_row(logits: np.ndarray) -> np.ndarray:
    """Probability vector for one row of sentinel-masked logits"""
    logits = np.asarray(logits)
    if logits.ndim != 1:
        raise ValueError(f"softmax_row expects a vector, got shape {logits.shape}")
    return softmax_rows(logits)


def layer_norm(x: np.ndarray, scale: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * scale + bias


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_COEFF * (x + 0.044715 * x ** 3)))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


ACTIVATIONS: Dict[Activation, Callable[[np.ndarray], np.ndarray]] = {
    Activation.GELU: gelu,
    Activation.RELU: relu,
}


def causal_mask(n_positions: int, dtype=np.float32) -> np.ndarray:
    """N×N additive mask: 0 on and below the diagonal, -inf above"""
    upper = np.triu(np.ones((n_positions, n_positions), dtype=bool), k=1)
    return np.where(upper, -np.inf, 0.0).astype(dtype)


def argmax_lowest(scores: np.ndarray) -> int:
    """Argmax with the lowest index winning ties"""
    return int(np.argmax(scores))


# ─── Trace containers ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TraceGauges:
    """Which optional tensors a forward pass keeps"""
    attention_weights: bool = True      # A^{ℓ,j}, L×H×N×N
    head_contributions: bool = True     # per-head pre-bias outputs, L×H×N×d
    mlp_activations: bool = True        # post-norm MLP inputs and pre-activations


FULL_GAUGES = TraceGauges()
LIGHT_GAUGES = TraceGauges(attention_weights=False, head_contributions=False, mlp_activations=False)


@dataclass
class LayerOutput:
    """Everything one block computed"""
    attention_input: np.ndarray         # MHSA input rows after patch substitution (pre-norm)
    attention_update: np.ndarray        # a^ℓ
    attention_weights: np.ndarray       # H×N×N
    head_contributions: np.ndarray      # H×N×d
    mlp_input: np.ndarray               # post-norm MLP input
    mlp_preactivation: np.ndarray       # W_I h + b_I
    mlp_update: np.ndarray              # m^ℓ
    residual: np.ndarray                # x^ℓ


@dataclass
class ForwardTrace:
    """Per-layer, per-position record of one forward pass"""
    token_ids: np.ndarray
    plan: InterventionPlan
    hidden_states: np.ndarray                       # (L+1)×N×d
    attention_updates: np.ndarray                   # L×N×d
    mlp_updates: np.ndarray                         # L×N×d
    final_logits: np.ndarray                        # δ(x^L_{N-1})
    final_distribution: np.ndarray                  # p_N
    attention_weights: Optional[np.ndarray] = None  # L×H×N×N
    head_contributions: Optional[np.ndarray] = None # L×H×N×d
    mlp_inputs: Optional[np.ndarray] = None         # L×N×d
    mlp_preactivations: Optional[np.ndarray] = None # L×N×d_i

    @property
    def n_layers(self) -> int:
        return self.hidden_states.shape[0] - 1

    @property
    def n_positions(self) -> int:
        return self.hidden_states.shape[1]

    @property
    def last_position(self) -> int:
        return self.n_positions - 1

    @property
    def predicted_token(self) -> int:
        return argmax_lowest(self.final_distribution)

    def residual(self, layer: int) -> np.ndarray:
        """x^ℓ for ℓ in 0..L"""
        return self.hidden_states[layer]

    def update(self, kind: str, layer: int) -> np.ndarray:
        """a^ℓ or m^ℓ for ℓ in 1..L"""
        self._check_layer(layer)
        if kind == MHSA:
            return self.attention_updates[layer - 1]
        if kind == MLP:
            return self.mlp_updates[layer - 1]
        raise ValueError(f"Unknown sublayer kind '{kind}'")

    def attention(self, layer: int, head: int) -> np.ndarray:
        self._check_layer(layer)
        if self.attention_weights is None:
            raise ValueError("Trace was captured without attention weights")
        return self.attention_weights[layer - 1, head]

    def head_contribution(self, layer: int, head: int) -> np.ndarray:
        self._check_layer(layer)
        if self.head_contributions is None:
            raise ValueError("Trace was captured without head contributions")
        return self.head_contributions[layer - 1, head]

    def mlp_preactivation(self, layer: int) -> np.ndarray:
        self._check_layer(layer)
        if self.mlp_preactivations is None:
            raise ValueError("Trace was captured without MLP activations")
        return self.mlp_preactivations[layer - 1]

    def _check_layer(self, layer: int):
        if not 1 <= layer <= self.n_layers:
            raise IndexError(f"Layer {layer} outside 1..{self.n_layers}")


# ─── Engine ──────────────────────────────────────────────────────────────────

class TransformerEngine:
    """Forward pass over immutable weights; one instance may serve many workers"""

    def __init__(self, config: ModelConfig, weights: WeightStore):
        weights.validate(config)
        self.config = config
        self.weights = weights
        self.dtype = weights.dtype
        self._activation = ACTIVATIONS[config.activation]
        self.attention_scale = np.asarray(1.0 / np.sqrt(config.head_dim), dtype=self.dtype)

    # Sublayers

    def attention_sublayer(self, X: np.ndarray, layer: int,
                           mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Multi-head self-attention over already-normalized rows X.

        Returns (update N×d, weights H×N×N, per-head contributions H×N×d);
        the update equals the summed contributions plus the output bias.
        """
        lw = self.weights.layer(layer)
        n = X.shape[0]
        H, dh = self.config.n_heads, self.config.head_dim

        q = (X @ lw.w_q + lw.b_q).reshape(n, H, dh).transpose(1, 0, 2)
        k = (X @ lw.w_k + lw.b_k).reshape(n, H, dh).transpose(1, 0, 2)
        v = (X @ lw.w_v + lw.b_v).reshape(n, H, dh).transpose(1, 0, 2)

        scores = (q @ k.transpose(0, 2, 1)) * self.attention_scale + mask
        weights = softmax_rows(scores)

        w_o = lw.w_o.reshape(H, dh, -1)
        contributions = (weights @ v) @ w_o
        update = contributions.sum(axis=0) + lw.b_o
        return update, weights, contributions

    def activate(self, pre: np.ndarray) -> np.ndarray:
        return self._activation(pre)

    def mlp_preactivation(self, h: np.ndarray, layer: int) -> np.ndarray:
        lw = self.weights.layer(layer)
        return h @ lw.w_in.T + lw.b_in

    def mlp_sublayer(self, h: np.ndarray, layer: int) -> np.ndarray:
        """m = W_F σ(W_I h + b_I) + b_F for an already-normalized input (vector or rows)"""
        lw = self.weights.layer(layer)
        return self._activation(self.mlp_preactivation(h, layer)) @ lw.w_out.T + lw.b_out

    # Projections

    def final_norm(self, h: np.ndarray) -> np.ndarray:
        return layer_norm(h, self.weights.final_norm_scale, self.weights.final_norm_bias,
                          self.config.norm_epsilon)

    def head_logits(self, h: np.ndarray) -> np.ndarray:
        """δ(h): final norm, then the tied embedding or the linear head"""
        normed = self.final_norm(h)
        if self.config.head_kind == HeadKind.LINEAR_HEAD:
            return normed @ self.weights.head_weight.T + self.weights.head_bias
        return normed @ self.weights.embedding.T

    def embedding_logits(self, h: np.ndarray) -> np.ndarray:
        """Raw E·h with no norm"""
        return h @ self.weights.embedding.T

    # Forward pass

    def embed(self, token_ids: np.ndarray) -> np.ndarray:
        return self.weights.embedding[token_ids] + self.weights.position_embeddings[:len(token_ids)]

    def run_layer(self, x_prev: np.ndarray, layer: int, plan: InterventionPlan,
                  base_mask: np.ndarray, history: Sequence[np.ndarray]) -> LayerOutput:
        """One block; history[ℓ] must hold x^ℓ for every patch source below `layer`"""
        lw = self.weights.layer(layer)
        eps = self.config.norm_epsilon

        attention_input = x_prev
        sources = [(pos, src) for pos, src in sorted(plan.patch_sources().items()) if src < layer]
        if sources:
            attention_input = x_prev.copy()
            for pos, src in sources:
                attention_input[pos] = history[src][pos]

        mask = apply_plan_to_mask(base_mask, plan, layer) if plan.attention_blocks else base_mask
        h1 = layer_norm(attention_input, lw.ln_1_scale, lw.ln_1_bias, eps)
        a, weights, contributions = self.attention_sublayer(h1, layer, mask)

        zeroed = plan.zeroed_positions(MHSA, layer)
        if zeroed:
            a[zeroed] = 0
            contributions[:, zeroed] = 0

        mlp_source = x_prev + a if self.config.layout == Layout.SERIAL else x_prev
        h2 = layer_norm(mlp_source, lw.ln_2_scale, lw.ln_2_bias, eps)
        pre = self.mlp_preactivation(h2, layer)
        m = self._activation(pre) @ lw.w_out.T + lw.b_out

        zeroed = plan.zeroed_positions(MLP, layer)
        if zeroed:
            m[zeroed] = 0

        return LayerOutput(
            attention_input=attention_input,
            attention_update=a,
            attention_weights=weights,
            head_contributions=contributions,
            mlp_input=h2,
            mlp_preactivation=pre,
            mlp_update=m,
            residual=x_prev + a + m,
        )

    def _check_tokens(self, token_ids: np.ndarray):
        n = len(token_ids)
        if n == 0:
            raise ValueError("Cannot run a forward pass on an empty query")
        if n > self.config.max_positions:
            raise ValueError(f"Query has {n} tokens, model supports at most {self.config.max_positions}")
        if token_ids.min() < 0 or token_ids.max() >= self.config.vocab_size:
            raise ValueError(f"Token ids must lie in 0..{self.config.vocab_size - 1}")

    def forward(self, query, plan: InterventionPlan = EMPTY_PLAN,
                gauges: TraceGauges = FULL_GAUGES) -> ForwardTrace:
        """
        Run the model on a TokenizedQuery (or raw token ids) under an intervention plan.

        Mask edits apply before softmax, sublayer zeroing after the update is
        computed, patches replace MHSA input rows; the plan is validated first.
        """
        token_ids = np.asarray(getattr(query, "token_ids", query), dtype=np.int64)
        self._check_tokens(token_ids)
        n = len(token_ids)
        validate_plan(plan, self.config, n)

        base_mask = causal_mask(n, self.dtype)
        hidden = [self.embed(token_ids)]
        outputs: List[LayerOutput] = []
        for layer in range(1, self.config.n_layers + 1):
            out = self.run_layer(hidden[-1], layer, plan, base_mask, hidden)
            outputs.append(out)
            hidden.append(out.residual)

        final_logits = self.head_logits(hidden[-1][n - 1])
        trace = ForwardTrace(
            token_ids=token_ids,
            plan=plan,
            hidden_states=np.stack(hidden),
            attention_updates=np.stack([o.attention_update for o in outputs]),
            mlp_updates=np.stack([o.mlp_update for o in outputs]),
            final_logits=final_logits,
            final_distribution=softmax_row(final_logits),
        )
        if gauges.attention_weights:
            trace.attention_weights = np.stack([o.attention_weights for o in outputs])
        if gauges.head_contributions:
            trace.head_contributions = np.stack([o.head_contributions for o in outputs])
        if gauges.mlp_activations:
            trace.mlp_inputs = np.stack([o.mlp_input for o in outputs])
            trace.mlp_preactivations = np.stack([o.mlp_preactivation for o in outputs])
        return trace

    def resume(self, hidden: np.ndarray, from_layer: int, plan: InterventionPlan = EMPTY_PLAN,
               history: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
        """
        Re-run layers from_layer+1..L starting from x^{from_layer} and return x^L.
        Patch sources below from_layer are read from `history`; a source equal to
        from_layer reads `hidden`.
        """
        if not 0 <= from_layer <= self.config.n_layers:
            raise ValueError(f"from_layer {from_layer} outside 0..{self.config.n_layers}")
        n = hidden.shape[0]
        validate_plan(plan, self.config, n)
        if history is None and any(p.source_layer < from_layer for p in plan.patches):
            raise ValueError("Resuming a patched plan needs the earlier hidden states")

        states: List[Optional[np.ndarray]] = [None] * (self.config.n_layers + 1)
        if history is not None:
            states[:from_layer] = list(history[:from_layer])
        states[from_layer] = hidden

        base_mask = causal_mask(n, self.dtype)
        x = hidden
        for layer in range(from_layer + 1, self.config.n_layers + 1):
            x = self.run_layer(x, layer, plan, base_mask, states).residual
            states[layer] = x
        return x

    def predict_distribution(self, trace: ForwardTrace, position: int) -> np.ndarray:
        """softmax(δ(x^L_i))"""
        if not 0 <= position < trace.n_positions:
            raise IndexError(f"Position {position} outside 0..{trace.n_positions - 1}")
        return softmax_row(self.head_logits(trace.hidden_states[-1][position]))

    def predict_token(self, query) -> Tuple[int, float]:
        """Greedy next token and its probability on the unmodified model"""
        trace = self.forward(query, gauges=LIGHT_GAUGES)
        token = trace.predicted_token
        return token, float(trace.final_distribution[token])


# ─── Self-checks ─────────────────────────────────────────────────────────────

def check_trace_invariants(trace: ForwardTrace, engine: TransformerEngine,
                           tolerance: float = 1e-4) -> Tuple[bool, str]:
    """Residual reconstruction, head decomposition and row-stochasticity on one trace"""
    if engine.config.layout == Layout.SERIAL:
        rebuilt = trace.hidden_states[0] + (trace.attention_updates + trace.mlp_updates).sum(axis=0)
        drift = float(np.max(np.abs(trace.hidden_states[-1] - rebuilt)))
        if drift > tolerance:
            return False, f"Residual reconstruction drift {drift:.3g} exceeds {tolerance}"

    if trace.attention_weights is not None:
        weights = trace.attention_weights
        sums = weights.sum(axis=-1)
        if np.max(np.abs(sums - 1)) > 1e-5:
            return False, "Attention rows do not sum to 1"
        upper = np.triu(np.ones(weights.shape[-2:], dtype=bool), k=1)
        if np.any(weights[..., upper] != 0):
            return False, "Attention weights above the diagonal are not exactly zero"

    if trace.head_contributions is not None:
        for layer in range(1, trace.n_layers + 1):
            bias = np.tile(engine.weights.layer(layer).b_o, (trace.n_positions, 1))
            # zeroed rows carry no bias
            bias[trace.plan.zeroed_positions(MHSA, layer)] = 0
            residue = trace.update(MHSA, layer) - trace.head_contributions[layer - 1].sum(axis=0) - bias
            if np.max(np.abs(residue)) > tolerance:
                return False, f"Head contributions do not reconstruct the MHSA update at layer {layer}"

    return True, "OK"
