"""
Gradient Attribution
Hand-written reverse pass through the fixed architecture and per-layer
gradient-times-activation saliency for a target logit.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from model_config import Layout, HeadKind, Activation
from model_engine import TransformerEngine, ForwardTrace, LayerOutput, causal_mask, GELU_COEFF
from interventions import MHSA, MLP

logger = logging.getLogger(__name__)

ROLE_LAST = "last"
ROLE_LAST_SUBJECT = "last_subject"
ROLE_FIRST_SUBJECT = "first_subject"
ROLE_OTHER_SUBJECT = "other_subject"
ROLE_FIRST_RELATION = "first_relation"
ROLE_OTHER_RELATION = "other_relation"
POSITION_ROLES = (ROLE_FIRST_SUBJECT, ROLE_OTHER_SUBJECT, ROLE_LAST_SUBJECT,
                  ROLE_FIRST_RELATION, ROLE_OTHER_RELATION, ROLE_LAST)


class DegenerateSaliencyError(ValueError):
    """Every raw saliency score is zero"""


@dataclass
class SaliencyMap:
    layer: int
    target_token: int
    scores: np.ndarray          # length N, non-negative, sums to 1

    def as_rows(self) -> List[dict]:
        return [
            {"layer": self.layer, "position": i, "score": float(s)}
            for i, s in enumerate(self.scores)
        ]


# ─── Local derivatives ───────────────────────────────────────────────────────

def _norm_stats(x: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    return centered * rstd, rstd


def layer_norm_backward(grad_out: np.ndarray, xhat: np.ndarray, rstd: np.ndarray,
                        scale: np.ndarray) -> np.ndarray:
    g = grad_out * scale
    return rstd * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))


def softmax_backward(grad_out: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (grad_out - (grad_out * probs).sum(axis=-1, keepdims=True))


def activation_derivative(pre: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.RELU:
        return (pre > 0).astype(pre.dtype)
    t = np.tanh(GELU_COEFF * (pre + 0.044715 * pre ** 3))
    return 0.5 * (1 + t) + 0.5 * pre * (1 - t * t) * GELU_COEFF * (1 + 3 * 0.044715 * pre ** 2)


# ─── Reverse pass ────────────────────────────────────────────────────────────

class LogitGradient:
    """Reverse-mode gradients of one output logit with respect to residual states"""

    def __init__(self, engine: TransformerEngine):
        self.engine = engine
        self.config = engine.config
        self.weights = engine.weights

    def _target_direction(self, target_token: int) -> np.ndarray:
        if self.config.head_kind == HeadKind.LINEAR_HEAD:
            return self.weights.head_weight[target_token]
        return self.weights.embedding[target_token]

    def _layer_backward(self, layer: int, x_prev: np.ndarray, out: LayerOutput,
                        grad_x: np.ndarray, plan) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
        """
        Gradient w.r.t. x^{ℓ-1} given the gradient w.r.t. x^ℓ.
        Also returns gradients for patched rows keyed by their source position.
        """
        lw = self.weights.layer(layer)
        eps = self.config.norm_epsilon
        n = x_prev.shape[0]
        H, dh = self.config.n_heads, self.config.head_dim

        # MLP branch
        grad_m = grad_x.copy()
        grad_m[plan.zeroed_positions(MLP, layer)] = 0
        grad_pre = (grad_m @ lw.w_out) * activation_derivative(out.mlp_preactivation, self.config.activation)
        grad_h2 = grad_pre @ lw.w_in
        serial = self.config.layout == Layout.SERIAL
        mlp_source = x_prev + out.attention_update if serial else x_prev
        xhat2, rstd2 = _norm_stats(mlp_source, eps)
        grad_s = layer_norm_backward(grad_h2, xhat2, rstd2, lw.ln_2_scale)

        grad_prev = grad_x + grad_s
        grad_a = grad_x + grad_s if serial else grad_x.copy()
        grad_a[plan.zeroed_positions(MHSA, layer)] = 0

        # Attention branch
        xhat1, rstd1 = _norm_stats(out.attention_input, eps)
        h1 = xhat1 * lw.ln_1_scale + lw.ln_1_bias
        q = (h1 @ lw.w_q + lw.b_q).reshape(n, H, dh).transpose(1, 0, 2)
        k = (h1 @ lw.w_k + lw.b_k).reshape(n, H, dh).transpose(1, 0, 2)
        v = (h1 @ lw.w_v + lw.b_v).reshape(n, H, dh).transpose(1, 0, 2)
        A = out.attention_weights
        w_o = lw.w_o.reshape(H, dh, -1)

        grad_z = grad_a @ w_o.transpose(0, 2, 1)                 # H×N×dh
        grad_A = grad_z @ v.transpose(0, 2, 1)                   # H×N×N
        grad_v = A.transpose(0, 2, 1) @ grad_z
        grad_scores = softmax_backward(grad_A, A) * self.engine.attention_scale
        grad_q = grad_scores @ k
        grad_k = grad_scores.transpose(0, 2, 1) @ q

        def merge(g):
            return g.transpose(1, 0, 2).reshape(n, H * dh)

        grad_h1 = merge(grad_q) @ lw.w_q.T + merge(grad_k) @ lw.w_k.T + merge(grad_v) @ lw.w_v.T
        grad_u = layer_norm_backward(grad_h1, xhat1, rstd1, lw.ln_1_scale)

        patched: Dict[int, np.ndarray] = {}
        for pos, src in plan.patch_sources().items():
            if src < layer:
                patched[pos] = grad_u[pos].copy()
                grad_u[pos] = 0
        return grad_prev + grad_u, patched

    def compute(self, trace: ForwardTrace, target_token: int, layer: int) -> np.ndarray:
        """
        ∂ δ(x^L_{N-1})_c / ∂ x^ℓ_i for every position i, as an N×d matrix.

        Layers above ℓ are recomputed from trace.hidden_states[ℓ] under the
        trace's plan. Rows patched from a layer below ℓ are constants.
        """
        L = self.config.n_layers
        if not 0 <= layer <= L:
            raise ValueError(f"Layer {layer} outside 0..{L}")
        if not 0 <= target_token < self.config.vocab_size:
            raise ValueError(f"Token id {target_token} outside 0..{self.config.vocab_size - 1}")

        plan = trace.plan
        n = trace.n_positions
        base_mask = causal_mask(n, self.engine.dtype)

        states = [trace.hidden_states[i] for i in range(layer + 1)]
        outputs: Dict[int, LayerOutput] = {}
        for current in range(layer + 1, L + 1):
            out = self.engine.run_layer(states[-1], current, plan, base_mask, states)
            outputs[current] = out
            states.append(out.residual)

        grad = np.zeros_like(states[L])
        last = n - 1
        xhat, rstd = _norm_stats(states[L][last], self.config.norm_epsilon)
        grad[last] = layer_norm_backward(self._target_direction(target_token), xhat, rstd,
                                         self.weights.final_norm_scale)

        pending: Dict[int, np.ndarray] = {}
        for current in range(L, layer, -1):
            grad, patched = self._layer_backward(current, states[current - 1], outputs[current], grad, plan)
            for pos, g in patched.items():
                src = plan.patch_sources()[pos]
                if src >= layer:
                    pending.setdefault(src, np.zeros_like(grad))[pos] += g
            # gradient now refers to x^{current-1}
            if current - 1 in pending:
                grad = grad + pending.pop(current - 1)
        return grad


def logit_gradient(engine: TransformerEngine, trace: ForwardTrace, target_token: int, layer: int) -> np.ndarray:
    return LogitGradient(engine).compute(trace, target_token, layer)


def finite_difference_gradient(engine: TransformerEngine, trace: ForwardTrace, target_token: int,
                               layer: int, step: float = 1e-4) -> np.ndarray:
    """Central differences of the target logit over every entry of x^ℓ"""
    base = trace.hidden_states[layer]
    history = list(trace.hidden_states)
    last = trace.last_position

    def logit(hidden):
        final = engine.resume(hidden, layer, trace.plan, history)
        return engine.head_logits(final[last])[target_token]

    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        bumped = base.copy()
        bumped[idx] += step
        up = logit(bumped)
        bumped[idx] -= 2 * step
        down = logit(bumped)
        grad[idx] = (up - down) / (2 * step)
    return grad


# ─── Saliency ────────────────────────────────────────────────────────────────

def normalize_scores(raw: np.ndarray, layer: int) -> np.ndarray:
    total = raw.sum()
    if not total > 0:
        raise DegenerateSaliencyError(f"All saliency scores are zero at layer {layer}")
    return raw / total


def gradient_times_activation(engine: TransformerEngine, trace: ForwardTrace, target_token: int,
                              layer: int, gradient: Optional[np.ndarray] = None) -> SaliencyMap:
    """score_i = ‖∇_{x^ℓ_i} f_c ⊙ x^ℓ_i‖₂, normalized over positions"""
    if gradient is None:
        gradient = logit_gradient(engine, trace, target_token, layer)
    raw = np.linalg.norm(gradient * trace.hidden_states[layer], axis=-1)
    return SaliencyMap(layer=layer, target_token=int(target_token), scores=normalize_scores(raw, layer))


def saliency_by_layer(engine: TransformerEngine, trace: ForwardTrace, target_token: int,
                      layers: Optional[Sequence[int]] = None) -> List[SaliencyMap]:
    layers = range(0, engine.config.n_layers + 1) if layers is None else layers
    return [gradient_times_activation(engine, trace, target_token, layer) for layer in layers]


# ─── Position roles ──────────────────────────────────────────────────────────

def bucket_positions(query) -> Dict[int, str]:
    """Role of every position; a one-token subject is its own last subject position"""
    roles = {}
    subject = list(query.subject_positions)
    for pos in subject:
        roles[pos] = ROLE_OTHER_SUBJECT
    roles[subject[0]] = ROLE_FIRST_SUBJECT
    roles[subject[-1]] = ROLE_LAST_SUBJECT
    relation = list(query.relation_positions)
    for i, pos in enumerate(relation):
        roles[pos] = ROLE_FIRST_RELATION if i == 0 else ROLE_OTHER_RELATION
    roles[query.n_tokens - 1] = ROLE_LAST
    return roles


def saliency_by_role(saliency: SaliencyMap, query) -> Dict[str, float]:
    """Sum of normalized scores per role; roles absent from the query are omitted"""
    totals: Dict[str, float] = {}
    for pos, role in bucket_positions(query).items():
        totals[role] = totals.get(role, 0.0) + float(saliency.scores[pos])
    return {role: totals[role] for role in POSITION_ROLES if role in totals}


def saliency_to_rows(maps: Sequence[SaliencyMap], query_id: Optional[int] = None) -> List[dict]:
    rows = []
    for saliency in maps:
        for row in saliency.as_rows():
            if query_id is not None:
                row = {"query_id": query_id, **row}
            rows.append(row)
    return rows
