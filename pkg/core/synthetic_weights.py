"""
Synthetic model builder: seeded random weights for tests, demos and self-checks
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from model_config import (
    ModelConfig,
    LayerWeights,
    WeightStore,
    HeadKind,
)

logger = logging.getLogger(__name__)


@dataclass
class SyntheticScales:
    """Scales for random initialization"""
    weight_scale: float = 0.5
    bias_scale: float = 0.1
    embedding_scale: float = 1.0
    position_scale: float = 0.5
    norm_jitter: float = 0.1


def random_weights(config: ModelConfig,
                   seed: int = 0,
                   dtype=np.float32,
                   scales: Optional[SyntheticScales] = None) -> WeightStore:
    """Build a WeightStore of random weights consistent with config"""
    scales = scales or SyntheticScales()
    rng = np.random.default_rng(seed)
    d, di, v = config.d_model, config.d_inner, config.vocab_size

    def mat(rows, cols, scale):
        return (rng.standard_normal((rows, cols)) * scale / np.sqrt(cols)).astype(dtype)

    def vec(n, scale):
        return (rng.standard_normal(n) * scale).astype(dtype)

    def norm_scale(n):
        return (1.0 + rng.standard_normal(n) * scales.norm_jitter).astype(dtype)

    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            ln_1_scale=norm_scale(d), ln_1_bias=vec(d, scales.bias_scale),
            w_q=mat(d, d, scales.weight_scale * 4), w_k=mat(d, d, scales.weight_scale * 4),
            w_v=mat(d, d, scales.weight_scale), w_o=mat(d, d, scales.weight_scale),
            b_q=vec(d, scales.bias_scale), b_k=vec(d, scales.bias_scale),
            b_v=vec(d, scales.bias_scale), b_o=vec(d, scales.bias_scale),
            ln_2_scale=norm_scale(d), ln_2_bias=vec(d, scales.bias_scale),
            w_in=mat(di, d, scales.weight_scale * 2), b_in=vec(di, scales.bias_scale),
            w_out=mat(d, di, scales.weight_scale), b_out=vec(d, scales.bias_scale),
        ))

    head_weight = head_bias = None
    if config.head_kind == HeadKind.LINEAR_HEAD:
        head_weight = mat(v, d, 1.0)
        head_bias = vec(v, scales.bias_scale)

    weights = WeightStore(
        embedding=(rng.standard_normal((v, d)) * scales.embedding_scale).astype(dtype),
        position_embeddings=(rng.standard_normal((config.max_positions, d)) * scales.position_scale).astype(dtype),
        layers=layers,
        final_norm_scale=norm_scale(d),
        final_norm_bias=vec(d, scales.bias_scale),
        head_weight=head_weight,
        head_bias=head_bias,
    )
    weights.validate(config)
    return weights


def identity_attention_weights(config: ModelConfig, dtype=np.float64) -> WeightStore:
    """
    Hand-checkable model: W_Q = W_K = 0, W_V = W_O = I, zero biases, unit norms,
    W_I = 0 and zero position embeddings. Every attention row is uniform over
    its allowed prefix.
    """
    d, di, v = config.d_model, config.d_inner, config.vocab_size
    zeros = lambda *shape: np.zeros(shape, dtype=dtype)
    ones = lambda n: np.ones(n, dtype=dtype)
    eye = np.eye(d, dtype=dtype)

    layers = [
        LayerWeights(
            ln_1_scale=ones(d), ln_1_bias=zeros(d),
            w_q=zeros(d, d), w_k=zeros(d, d), w_v=eye.copy(), w_o=eye.copy(),
            b_q=zeros(d), b_k=zeros(d), b_v=zeros(d), b_o=zeros(d),
            ln_2_scale=ones(d), ln_2_bias=zeros(d),
            w_in=zeros(di, d), b_in=zeros(di), w_out=zeros(d, di), b_out=zeros(d),
        )
        for _ in range(config.n_layers)
    ]
    rng = np.random.default_rng(0)
    head_weight = head_bias = None
    if config.head_kind == HeadKind.LINEAR_HEAD:
        head_weight = rng.standard_normal((v, d)).astype(dtype)
        head_bias = zeros(v)
    return WeightStore(
        embedding=rng.standard_normal((v, d)).astype(dtype),
        position_embeddings=zeros(config.max_positions, d),
        layers=layers,
        final_norm_scale=ones(d),
        final_norm_bias=zeros(d),
        head_weight=head_weight,
        head_bias=head_bias,
    )


def tiny_config(**overrides) -> ModelConfig:
    """Small default architecture used across tests"""
    params = dict(
        n_layers=2, n_heads=2, d_model=8, d_inner=16, vocab_size=32, max_positions=16,
    )
    params.update(overrides)
    return ModelConfig(**params)
