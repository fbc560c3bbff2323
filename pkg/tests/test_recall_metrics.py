"""
Tests for attributes rate, probability change and extraction aggregation
"""

import numpy as np
import pytest

from corpus import CandidateAttributeSet
from lens import EMBEDDING, VocabularyLens
from recall_metrics import (
    aggregate_extraction_stats, attributes_rate, embedding_attribute_rate, extraction_precedence,
    mean_attribute_rank, mean_ignoring_missing, relative_prob_change, summarize_observations,
)


def candidates(*tokens) -> CandidateAttributeSet:
    return CandidateAttributeSet("subject", frozenset(tokens), 1 if tokens else 0)


def test_attributes_rate():
    assert attributes_rate([1, 2, 3, 4], candidates(2, 4, 9)) == 0.5
    assert attributes_rate([1], candidates()) is None
    with pytest.raises(ValueError):
        attributes_rate([], candidates(1))


def test_relative_prob_change():
    assert relative_prob_change(0.5, 0.25) == -0.5
    assert relative_prob_change(0.2, 0.2) == 0.0
    with pytest.raises(ValueError):
        relative_prob_change(0.0, 0.1)


def test_extraction_stats():
    grids = [
        [True, False, True],
        [False, False, False],
        [False, True, False],
        [False, False, False],
    ]
    stats = aggregate_extraction_stats(grids)
    assert stats.extracting_queries == 2
    assert stats.extraction_rate == 0.5
    assert stats.mean_extracting_layers == 0.75
    assert stats.per_layer_rates == [0.25, 0.25, 0.25]
    assert stats.to_dict()["n_queries"] == 4


def test_extraction_stats_rejects_ragged_or_empty_grids():
    with pytest.raises(ValueError):
        aggregate_extraction_stats([])
    with pytest.raises(ValueError):
        aggregate_extraction_stats([[True], [True, False]])


def test_extraction_precedence():
    """Test one preceded query, one MLP-only query and one late MHSA query"""
    mhsa = [
        [True, False, False],
        [False, False, False],
        [False, False, True],
        [True, False, False],
    ]
    mlp = [
        [False, True, False],
        [False, False, True],
        [True, False, False],
        [False, False, False],
    ]
    result = extraction_precedence(mhsa, mlp)
    assert result["mlp_extracting_queries"] == 3
    assert result["preceded_by_mhsa"] == pytest.approx(1 / 3)
    assert result["without_mhsa"] == pytest.approx(1 / 3)


def test_precedence_counts_same_layer_events():
    result = extraction_precedence([[False, True]], [[False, True]])
    assert result["preceded_by_mhsa"] == 1.0


def test_precedence_without_mlp_events():
    result = extraction_precedence([[True, False]], [[False, False]])
    assert result == {"mlp_extracting_queries": 0, "preceded_by_mhsa": None, "without_mhsa": None}


def test_precedence_brute_force_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        mhsa = rng.random((6, 4)) < 0.3
        mlp = rng.random((6, 4)) < 0.3
        result = extraction_precedence(mhsa.tolist(), mlp.tolist())
        preceded = without = total = 0
        for q in range(6):
            layers = [l for l in range(4) if mlp[q, l]]
            if not layers:
                continue
            total += 1
            if not mhsa[q].any():
                without += 1
            elif any(mhsa[q, l] for l in range(layers[0] + 1)):
                preceded += 1
        assert result["mlp_extracting_queries"] == total
        if total:
            assert result["preceded_by_mhsa"] == pytest.approx(preceded / total)
            assert result["without_mhsa"] == pytest.approx(without / total)


@pytest.mark.parametrize("seed", range(100))
def test_attributes_rate_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, 200, size=int(rng.integers(1, 60))).tolist()
    universe = rng.permutation(200)[:int(rng.integers(0, 80))].tolist()
    result = attributes_rate(tokens, candidates(*universe))
    if not universe:
        assert result is None
        return
    hits = 0
    for t in tokens:
        for a in universe:
            if t == a:
                hits += 1
                break
    assert result == pytest.approx(hits / len(tokens), abs=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_extraction_stats_recount_oracle(seed):
    rng = np.random.default_rng(seed)
    n_queries, n_layers = int(rng.integers(1, 12)), int(rng.integers(1, 8))
    grid = (rng.random((n_queries, n_layers)) < rng.random()).tolist()
    stats = aggregate_extraction_stats(grid)

    extracting = 0
    total_layers = 0
    per_layer = [0] * n_layers
    for row in grid:
        count = 0
        for layer, hit in enumerate(row):
            if hit:
                count += 1
                per_layer[layer] += 1
        total_layers += count
        if count:
            extracting += 1
    assert stats.n_queries == n_queries and stats.n_layers == n_layers
    assert stats.extracting_queries == extracting
    assert stats.total_extracting_layers == total_layers
    assert stats.extraction_rate == pytest.approx(extracting / n_queries)
    assert stats.mean_extracting_layers == pytest.approx(total_layers / n_queries)
    assert stats.per_layer_rates == pytest.approx([c / n_queries for c in per_layer])


def test_means():
    assert mean_attribute_rank([1, 3]) == 2.0
    assert mean_attribute_rank([]) is None
    assert mean_ignoring_missing([None, 0.2, 0.4]) == pytest.approx(0.3)
    assert mean_ignoring_missing([None]) is None


def test_summarize_drops_missing_values():
    observations = [
        {"layer": 1, "condition": "subject", "value": 0.2},
        {"layer": 1, "condition": "subject", "value": 0.4},
        {"layer": 1, "condition": "last", "value": None},
        {"layer": 2, "condition": "subject", "value": 1.0},
    ]
    frame = summarize_observations(observations, ["layer", "condition"])
    assert list(frame.columns) == ["layer", "condition", "mean", "count"]
    assert len(frame) == 2
    first = frame.iloc[0]
    assert (first["layer"], first["condition"], first["count"]) == (1, "subject", 2)
    assert first["mean"] == pytest.approx(0.3)
    assert summarize_observations([], ["layer"]).empty


def test_embedding_attribute_rate(tiny_engine):
    lens = VocabularyLens(tiny_engine)
    E = tiny_engine.weights.embedding
    top = lens.project_to_vocab(E[3], 5, EMBEDDING).token_ids
    result = embedding_attribute_rate(lens, [3, 4], candidates(*top), top_k=5)
    assert result["per_token_max"] == 1.0
    assert 0.0 <= result["mean_vector_rate"] <= 1.0
    assert embedding_attribute_rate(lens, [3], candidates(), top_k=5) == {
        "per_token_max": None, "mean_vector_rate": None,
    }
