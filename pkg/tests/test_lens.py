"""
Tests for vocabulary projections, extraction detection and OV mappings
"""

import numpy as np
import pytest

from interventions import MHSA, MLP
from lens import DELTA, EMBEDDING, VocabularyLens, token_rank, top_k_tokens
from model_engine import TransformerEngine, softmax_row
from synthetic_weights import random_weights, tiny_config

from conftest import make_engine


def test_top_k_breaks_ties_by_lowest_id():
    logits = np.array([1.0, 3.0, 3.0, 2.0])
    assert top_k_tokens(logits, 2) == [(1, 3.0), (2, 3.0)]
    assert [token_rank(logits, t) for t in range(4)] == [4, 1, 2, 3]
    with pytest.raises(ValueError):
        top_k_tokens(logits, 0)
    with pytest.raises(ValueError):
        top_k_tokens(logits, 5)


def test_final_layer_lens_matches_prediction(tiny_engine):
    lens = VocabularyLens(tiny_engine)
    trace = tiny_engine.forward([3, 1, 4, 1, 5])
    last = trace.last_position
    logits = lens.logits(trace.residual(trace.n_layers)[last], DELTA)
    assert np.allclose(softmax_row(logits), tiny_engine.predict_distribution(trace, last))
    assert np.array_equal(logits, trace.final_logits)
    assert lens.attribute_rank(trace.residual(trace.n_layers)[last], trace.predicted_token) == 1

    projections = lens.layer_projections(trace, last, top_k=5)
    assert [p.layer for p in projections] == [1, 2]
    assert projections[-1].token_ids[0] == trace.predicted_token


def test_embedding_mode_skips_norm(tiny_engine):
    lens = VocabularyLens(tiny_engine)
    h = np.linspace(-1, 1, tiny_engine.config.d_model)
    assert np.allclose(lens.logits(h, EMBEDDING), tiny_engine.weights.embedding @ h)
    with pytest.raises(ValueError):
        lens.logits(h, "raw")


def test_projection_reports_requested_ranks(tiny_engine):
    lens = VocabularyLens(tiny_engine)
    h = np.ones(tiny_engine.config.d_model)
    projection = lens.project_to_vocab(h, top_k=3, rank_tokens=[7])
    logits = lens.logits(h)
    assert projection.full_rank_of == {7: token_rank(logits, 7)}
    assert len(projection.top_tokens) == 3


def test_detect_extraction_matches_brute_force(tiny_engine):
    lens = VocabularyLens(tiny_engine)
    trace = tiny_engine.forward([2, 7, 1, 8, 2, 8])
    E = tiny_engine.weights.embedding
    for kind in (MHSA, MLP):
        for event in lens.extraction_grid(trace, kind):
            update = trace.update(kind, event.layer)[trace.last_position]
            assert event.t_prime == int(np.argmax(E @ update))
            assert event.t_star == trace.predicted_token
            assert event.matched == (event.t_prime == event.t_star)


def test_explicit_target_and_normalized_projection(tiny_engine):
    trace = tiny_engine.forward([2, 7, 1, 8])
    lens = VocabularyLens(tiny_engine, normalize_update_projection=True)
    event = lens.detect_extraction(trace, 1, MHSA, target=5)
    assert event.t_star == 5
    update = trace.update(MHSA, 1)[trace.last_position]
    expected = tiny_engine.weights.embedding @ tiny_engine.final_norm(update)
    assert event.t_prime == int(np.argmax(expected))


def test_head_extraction_uses_single_head(tiny_engine):
    lens = VocabularyLens(tiny_engine)
    trace = tiny_engine.forward([2, 7, 1, 8])
    event = lens.head_extraction(trace, 2, 1)
    contribution = trace.head_contribution(2, 1)[trace.last_position]
    assert event.head == 1
    assert event.t_prime == int(np.argmax(tiny_engine.weights.embedding @ contribution))


def test_head_mapping_matches_materialized_matrix(tiny_engine):
    lens = VocabularyLens(tiny_engine)
    E = tiny_engine.weights.embedding
    for layer in (1, 2):
        for head in range(tiny_engine.config.n_heads):
            _, _, w_v, w_o = tiny_engine.weights.head_slices(layer, head, tiny_engine.config.n_heads)
            G = E @ w_v @ w_o @ E.T
            for token in (0, 9, 31):
                row = lens.head_mapping(layer, head, token, top_k=10)
                expected = top_k_tokens(G[token], 10)
                assert row.token_ids == [t for t, _ in expected]
                assert np.allclose([s for _, s in row.top_tokens], [s for _, s in expected])


def test_find_mapping_heads_agrees_with_rows(tiny_engine):
    lens = VocabularyLens(tiny_engine)
    subject = [4, 9]
    attribute = lens.head_mapping(1, 0, 4, top_k=3).token_ids[0]
    heads = lens.find_mapping_heads(1, subject, attribute, top_k=3)
    assert 0 in heads
    for head in range(tiny_engine.config.n_heads):
        hit = any(attribute in lens.head_mapping(1, head, t, top_k=3).token_ids for t in subject)
        assert (head in heads) == hit
    with pytest.raises(ValueError):
        lens.head_mapping(1, 5, 0)


def test_mlp_subupdates_reconstruct_update(tiny_engine):
    lens = VocabularyLens(tiny_engine)
    trace = tiny_engine.forward([3, 1, 4, 1, 5])
    d_inner = tiny_engine.config.d_inner
    for layer in (1, 2):
        subupdates = lens.mlp_subupdate_decomposition(trace, layer, 2, top_m=d_inner)
        assert len(subupdates) == d_inner
        rebuilt = sum(s.coefficient * s.direction for s in subupdates) + tiny_engine.weights.layer(layer).b_out
        assert np.allclose(rebuilt, trace.update(MLP, layer)[2])
        contributions = [s.contribution for s in subupdates]
        assert contributions == sorted(contributions, reverse=True)

    top = lens.mlp_subupdate_decomposition(trace, 1, 2, top_m=3, top_k=4)
    assert len(top) == 3
    assert all(len(s.top_tokens) == 4 for s in top)


def test_event_record_uses_tokenizer(word_engine, word_tokenizer):
    lens = VocabularyLens(word_engine, word_tokenizer)
    trace = word_engine.forward(word_tokenizer.encode("Paris is located in"))
    record = lens.event_record(lens.detect_extraction(trace, 1, MHSA), trace.last_position)
    assert record["position"] == 3
    assert record["tokens"][0]["string"] == word_tokenizer.token_string(trace.predicted_token)


def test_value_vector_projection_ignores_input(tiny_engine):
    lens = VocabularyLens(tiny_engine)
    w_out = tiny_engine.weights.layer(2).w_out
    projection = lens.value_vector_projection(2, 5, top_k=6)
    assert projection.layer == 2 and projection.position is None
    expected = top_k_tokens(tiny_engine.weights.embedding @ w_out[:, 5], 6)
    assert projection.token_ids == [t for t, _ in expected]
    assert np.allclose([s for _, s in projection.top_tokens], [s for _, s in expected])

    trace = tiny_engine.forward([3, 1, 4, 1, 5])
    for s in lens.mlp_subupdate_decomposition(trace, 2, 4, top_m=4, top_k=6):
        assert s.token_ids == lens.value_vector_projection(2, s.index, top_k=6).token_ids

    with pytest.raises(ValueError):
        lens.value_vector_projection(2, w_out.shape[1])


def test_projection_record_shape(word_engine, word_tokenizer):
    lens = VocabularyLens(word_engine, word_tokenizer)
    trace = word_engine.forward(word_tokenizer.encode("Paris is located in"))
    records = [lens.projection_record(p) for p in lens.layer_projections(trace, 0, top_k=3)]
    assert [r["layer"] for r in records] == [1, 2, 3]
    for record in records:
        assert record["position"] == 0 and record["kind"] == "residual"
        assert [t["string"] for t in record["tokens"]] == [word_tokenizer.token_string(t["id"]) for t in record["tokens"]]


def test_final_layer_lens_ranks_like_prediction(tiny_engine):
    """Test on 100 final-layer states that the lens order is the predicted distribution's order"""
    lens = VocabularyLens(tiny_engine)
    vocab = tiny_engine.config.vocab_size
    rng = np.random.default_rng(5)
    for _ in range(20):
        trace = tiny_engine.forward(rng.integers(0, vocab, size=5))
        projections = [lens.layer_projections(trace, position, top_k=vocab)[-1] for position in range(5)]
        for position, projection in enumerate(projections):
            probs = tiny_engine.predict_distribution(trace, position)
            assert projection.token_ids == np.argsort(-probs, kind="stable").tolist()


def test_detect_extraction_on_random_samples():
    """Test 1,000 random (trace, layer) samples against a full-vocabulary argmax"""
    engine = make_engine(seed=9, n_layers=4)
    lens = VocabularyLens(engine)
    E = engine.weights.embedding
    rng = np.random.default_rng(21)
    for _ in range(1000):
        trace = engine.forward(rng.integers(0, engine.config.vocab_size, size=int(rng.integers(1, 8))))
        layer = int(rng.integers(1, 5))
        kind = MHSA if rng.random() < 0.5 else MLP
        event = lens.detect_extraction(trace, layer, kind)
        scores = [float(E[t] @ trace.update(kind, layer)[-1]) for t in range(engine.config.vocab_size)]
        best = max(range(len(scores)), key=lambda t: (scores[t], -t))
        assert event.t_prime == best
        assert event.matched == (best == trace.predicted_token)


def test_head_mapping_with_zero_value_weights():
    config = tiny_config()
    weights = random_weights(config, seed=2)
    weights.layers[0].w_v = np.zeros_like(weights.layers[0].w_v)
    lens = VocabularyLens(TransformerEngine(config, weights))
    for head in range(config.n_heads):
        for token in (0, 17, 31):
            row = lens.head_mapping(1, head, token, top_k=5)
            assert row.token_ids == [0, 1, 2, 3, 4]
            assert all(score == 0.0 for _, score in row.top_tokens)
