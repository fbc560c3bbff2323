"""
Tests for intervention plans, builders and experiment presets
"""

import numpy as np
import pytest

from interventions import (
    EMPTY_PLAN, MHSA, MLP, AttentionBlock, InterventionPlan, KnockoutWindow, Patch,
    PlanValidationError, SublayerZeroing, apply_plan_to_mask, block_sources_at_layers,
    exclude_first_position, extraction_knockout_conditions, info_flow_conditions,
    knockout_window, order_subset, patch_positions, subject_position_conditions,
    sublayer_knockout, validate_plan,
)
from model_engine import causal_mask
from synthetic_weights import tiny_config
from tokenizer import tokenize_query


def test_window_layer_range_clamps_to_model():
    window = KnockoutWindow(center_layer=5, width=9, source_positions=(0,), target_position=3)
    assert list(window.layer_range(12)) == [1, 2, 3, 4, 5, 6, 7, 8, 9]
    assert list(window.layer_range(6)) == [1, 2, 3, 4, 5, 6]
    assert list(KnockoutWindow(2, 1, (0,), 3).layer_range(12)) == [2]


def test_knockout_window_plan():
    config = tiny_config(n_layers=4)
    plan = knockout_window(KnockoutWindow(2, 3, (0, 1), 3), config)
    assert plan.attention_blocks == {AttentionBlock(layer, 3, src) for layer in (1, 2, 3) for src in (0, 1)}
    assert plan.metadata == {"window_k": 3}


@pytest.mark.parametrize("n_layers", [1, 4, 12])
def test_wider_window_keeps_every_edge(n_layers):
    config = tiny_config(n_layers=n_layers)
    for center in range(1, n_layers + 1):
        for width in range(1, 2 * n_layers + 2, 2):
            narrow = knockout_window(KnockoutWindow(center, width, (0, 2), 4), config)
            wide = knockout_window(KnockoutWindow(center, width + 2, (0, 2), 4), config)
            assert narrow.attention_blocks <= wide.attention_blocks


def test_knockout_window_rejects_bad_windows():
    config = tiny_config(n_layers=4)
    with pytest.raises(PlanValidationError):
        knockout_window(KnockoutWindow(2, 4, (0,), 3), config)
    with pytest.raises(PlanValidationError):
        knockout_window(KnockoutWindow(5, 1, (0,), 3), config)
    with pytest.raises(PlanValidationError):
        knockout_window(KnockoutWindow(2, 1, (4,), 3), config)


def test_sublayer_knockout_span():
    config = tiny_config(n_layers=12)
    plan = sublayer_knockout(MHSA, 2, 1, config)
    assert sorted(z.layer for z in plan.sublayer_zeroings) == list(range(2, 12))
    plan = sublayer_knockout(MLP, 8, 1, config)
    assert sorted(z.layer for z in plan.sublayer_zeroings) == [8, 9, 10, 11, 12]
    assert plan.zeroed_positions(MLP, 9) == [1]
    assert plan.zeroed_positions(MHSA, 9) == []
    with pytest.raises(PlanValidationError):
        sublayer_knockout("ffn", 1, 0, config)


def test_patch_positions_bounds():
    config = tiny_config(n_layers=3)
    plan = patch_positions([0, 2], 1, config)
    assert plan.patch_sources() == {0: 1, 2: 1}
    with pytest.raises(PlanValidationError):
        patch_positions([0], 3, config)


def test_validate_plan_ranges():
    config = tiny_config(n_layers=2)
    validate_plan(EMPTY_PLAN, config, 4)
    bad_plans = [
        InterventionPlan(attention_blocks=frozenset({AttentionBlock(3, 1, 0)})),
        InterventionPlan(attention_blocks=frozenset({AttentionBlock(1, 1, 2)})),
        InterventionPlan(attention_blocks=frozenset({AttentionBlock(1, 4, 0)})),
        InterventionPlan(sublayer_zeroings=frozenset({SublayerZeroing("ffn", 1, 0)})),
        InterventionPlan(sublayer_zeroings=frozenset({SublayerZeroing(MLP, 0, 0)})),
        InterventionPlan(patches=frozenset({Patch(0, 2)})),
        InterventionPlan(patches=frozenset({Patch(1, 0), Patch(1, 1)})),
    ]
    for plan in bad_plans:
        with pytest.raises(PlanValidationError):
            validate_plan(plan, config, 4)


def test_plan_json_round_trip():
    plan = block_sources_at_layers([0, 1], 3, [1, 2]).merge(
        sublayer_knockout(MLP, 1, 2, tiny_config()),
        patch_positions([1], 0, tiny_config()),
    )
    again = InterventionPlan.from_json(plan.to_json())
    assert again == plan
    assert again.metadata == {"patch_source_layer": 0}
    assert again.to_json() == plan.to_json()


def test_merge_unions_edits():
    a = block_sources_at_layers([0], 2, [1])
    b = block_sources_at_layers([0, 1], 2, [1])
    merged = a.merge(b)
    assert merged.blocks_at(1) == [AttentionBlock(1, 2, 0), AttentionBlock(1, 2, 1)]
    assert not merged.is_empty()
    assert EMPTY_PLAN.is_empty()


def test_mask_application_keeps_base_untouched():
    base = causal_mask(3, np.float64)
    plan = block_sources_at_layers([0], 2, [1])
    mask = apply_plan_to_mask(base, plan, 1)
    assert mask[2, 0] == -np.inf
    assert base[2, 0] == 0
    assert np.array_equal(apply_plan_to_mask(base, plan, 2), base)


def test_condition_presets(word_tokenizer):
    query = tokenize_query("The Eiffel Tower is located in", "Eiffel Tower", word_tokenizer)
    flow = info_flow_conditions(query)
    assert flow == {"subject": [1, 2], "relation": [0, 3, 4], "last": [5]}
    assert exclude_first_position(flow) == {"subject": [1, 2], "relation": [3, 4], "last": [5]}
    assert order_subset(query) == "subject_later"

    grid = extraction_knockout_conditions(query)
    assert grid["none"] == []
    assert grid["subj-last+last"] == [2, 5]
    assert grid["all-but-subj-last"] == [0, 1, 3, 4, 5]
    assert grid["all-non-subj-but-last"] == [0, 3, 4]
    assert grid["non-subj"] == [0, 3, 4, 5]


def test_subject_position_conditions(word_tokenizer):
    short = tokenize_query("Paris is located in", "Paris", word_tokenizer)
    assert subject_position_conditions(short) == {}
    assert order_subset(short) == "subject_first"

    long = tokenize_query("The Eiffel Tower is owned by", "The Eiffel Tower", word_tokenizer)
    conditions = subject_position_conditions(long)
    assert conditions == {"first": [1, 2], "last": [0, 1], "before-last": [0, 2]}


def test_exclude_first_drops_empty_sets(word_tokenizer):
    query = tokenize_query("Paris is located in", "Paris", word_tokenizer)
    trimmed = exclude_first_position(info_flow_conditions(query))
    assert "subject" not in trimmed
    assert trimmed["relation"] == [1, 2]
