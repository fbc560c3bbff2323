"""
Tests for the reverse pass and gradient-times-activation saliency
"""

import numpy as np
import pytest

from attribution import (
    ROLE_FIRST_RELATION, ROLE_FIRST_SUBJECT, ROLE_LAST, ROLE_LAST_SUBJECT, ROLE_OTHER_RELATION,
    DegenerateSaliencyError, bucket_positions, finite_difference_gradient, gradient_times_activation,
    logit_gradient, normalize_scores, saliency_by_layer, saliency_by_role, saliency_to_rows,
)
from interventions import EMPTY_PLAN, MHSA, MLP, block_sources_at_layers, patch_positions, sublayer_knockout
from model_config import HeadKind, Layout
from model_engine import TransformerEngine, layer_norm
from synthetic_weights import identity_attention_weights, tiny_config
from tokenizer import tokenize_query

from conftest import make_engine

TOKENS = [3, 1, 4, 1, 5]


def plan_for(seed: int, config):
    """Cycle through empty, knockout, zeroing and patch plans"""
    choice = seed % 5
    if choice == 1:
        return block_sources_at_layers([0, 1], 4, [1, 2])
    if choice == 2:
        return sublayer_knockout(MHSA, 1, 2, config).merge(sublayer_knockout(MLP, 2, 3, config))
    if choice == 3:
        return patch_positions([1, 2], 0, config)
    if choice == 4:
        return patch_positions([2], 1, config)
    return EMPTY_PLAN


def engine_for(seed: int):
    if seed % 4 == 1:
        return make_engine(seed, layout=Layout.PARALLEL)
    if seed % 4 == 2:
        return make_engine(seed, head_kind=HeadKind.LINEAR_HEAD)
    return make_engine(seed)


@pytest.mark.parametrize("seed", range(20))
def test_exact_gradient_matches_finite_differences(seed):
    engine = engine_for(seed)
    trace = engine.forward(TOKENS, plan_for(seed, engine.config))
    target = (seed * 7) % engine.config.vocab_size
    for layer in range(engine.config.n_layers + 1):
        exact = logit_gradient(engine, trace, target, layer)
        numeric = finite_difference_gradient(engine, trace, target, layer)
        # atol covers entries that are zero up to finite-difference noise
        np.testing.assert_allclose(exact, numeric, rtol=1e-3, atol=1e-6, err_msg=f"layer {layer}")


def test_uniform_attention_backflow():
    """Test each position feeds 1/N of the value-path gradient into the last position"""
    config = tiny_config(n_layers=1, n_heads=1, d_model=4, d_inner=4, vocab_size=8)
    engine = TransformerEngine(config, identity_attention_weights(config))
    n = 3
    trace = engine.forward([2] * n)
    target = 5
    top = logit_gradient(engine, trace, target, 1)[-1]
    grad = logit_gradient(engine, trace, target, 0)

    x = trace.hidden_states[0][0]
    lw = engine.weights.layer(1)

    def value_path(v):
        return top @ layer_norm(v, lw.ln_1_scale, lw.ln_1_bias, config.norm_epsilon)

    step = 1e-6
    through_norm = np.array([
        (value_path(x + step * e) - value_path(x - step * e)) / (2 * step) for e in np.eye(4)
    ])
    expected = np.tile(through_norm / n, (n, 1))
    expected[-1] += top
    np.testing.assert_allclose(grad, expected, rtol=1e-6, atol=1e-8)


def test_gradient_rejects_bad_arguments(tiny_engine):
    trace = tiny_engine.forward(TOKENS)
    with pytest.raises(ValueError):
        logit_gradient(tiny_engine, trace, 0, 3)
    with pytest.raises(ValueError):
        logit_gradient(tiny_engine, trace, 32, 1)


def test_top_layer_saliency_sits_on_last_position(tiny_engine):
    trace = tiny_engine.forward(TOKENS)
    saliency = gradient_times_activation(tiny_engine, trace, trace.predicted_token, tiny_engine.config.n_layers)
    assert saliency.scores[-1] == 1.0
    assert np.all(saliency.scores[:-1] == 0)


def test_saliency_is_normalized(tiny_engine):
    trace = tiny_engine.forward(TOKENS)
    maps = saliency_by_layer(tiny_engine, trace, trace.predicted_token)
    assert [m.layer for m in maps] == [0, 1, 2]
    for saliency in maps:
        assert np.all(saliency.scores >= 0)
        assert saliency.scores.sum() == pytest.approx(1.0)

    rows = saliency_to_rows(maps, query_id=4)
    assert len(rows) == 3 * len(TOKENS)
    assert rows[0] == {"query_id": 4, "layer": 0, "position": 0, "score": float(maps[0].scores[0])}


def test_degenerate_saliency_raises():
    with pytest.raises(DegenerateSaliencyError):
        normalize_scores(np.zeros(4), 2)


def test_bucket_positions(word_tokenizer):
    query = tokenize_query("The Eiffel Tower is located in", "Eiffel Tower", word_tokenizer)
    assert bucket_positions(query) == {
        0: ROLE_FIRST_RELATION,
        1: ROLE_FIRST_SUBJECT,
        2: ROLE_LAST_SUBJECT,
        3: ROLE_OTHER_RELATION,
        4: ROLE_OTHER_RELATION,
        5: ROLE_LAST,
    }

    single = tokenize_query("Paris is located in", "Paris", word_tokenizer)
    assert bucket_positions(single)[0] == ROLE_LAST_SUBJECT


def test_role_totals_sum_to_one(word_engine, word_tokenizer):
    query = tokenize_query("The Eiffel Tower is located in", "Eiffel Tower", word_tokenizer)
    trace = word_engine.forward(query)
    saliency = gradient_times_activation(word_engine, trace, trace.predicted_token, 1)
    totals = saliency_by_role(saliency, query)
    assert list(totals) == [ROLE_FIRST_SUBJECT, ROLE_LAST_SUBJECT, ROLE_FIRST_RELATION,
                            ROLE_OTHER_RELATION, ROLE_LAST]
    assert sum(totals.values()) == pytest.approx(1.0)
