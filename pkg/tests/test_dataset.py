"""
Tests for dataset ingestion and the correctness filter
"""

import pytest

from dataset import DatasetValidationError, filter_correct, load_dataset, parse_record, prediction_matches

from conftest import write_jsonl


def test_parse_record():
    record = parse_record({"query": "Beats Music is owned by", "subject": "Beats Music",
                           "attribute": "Apple", "relation_id": 127}, line_no=1)
    assert record.subject == "Beats Music"
    assert record.attribute == "Apple"
    assert record.relation_id == "127"
    assert record.line_no == 1


@pytest.mark.parametrize("raw, field_name", [
    ({"subject": "a", "attribute": "b"}, "query"),
    ({"query": "a b", "subject": "", "attribute": "c"}, "subject"),
    ({"query": "a b", "subject": "a", "attribute": 3}, "attribute"),
    ({"query": "a b", "subject": "z", "attribute": "c"}, "subject"),
])
def test_parse_record_names_bad_field(raw, field_name):
    with pytest.raises(DatasetValidationError) as err:
        parse_record(raw, line_no=7)
    assert err.value.field_name == field_name
    assert err.value.line_no == 7
    assert str(err.value).startswith("line 7:")


def test_load_dataset_strict_reports_line(tmp_path):
    path = tmp_path / "queries.jsonl"
    path.write_text(
        '{"query": "Paris is located in", "subject": "Paris", "attribute": "France"}\n'
        '\n'
        '{"query": "broken"\n',
        encoding="utf-8",
    )
    with pytest.raises(DatasetValidationError) as err:
        load_dataset(path)
    assert err.value.line_no == 3


def test_load_dataset_permissive_skips(tmp_path, caplog):
    path = write_jsonl(tmp_path / "queries.jsonl", [
        {"query": "Paris is located in", "subject": "Paris", "attribute": "France"},
        {"query": "Tokyo is located in", "subject": "Kyoto", "attribute": "Japan"},
    ])
    records = load_dataset(path, permissive=True)
    assert [r.subject for r in records] == ["Paris"]
    assert "line 2" in caplog.text


def test_empty_dataset_warns(tmp_path, caplog):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    assert load_dataset(path) == []
    assert "no usable records" in caplog.text


def test_prediction_matches():
    assert prediction_matches(" Wash", "Washington")
    assert prediction_matches("Apple", "Apple")
    assert not prediction_matches("Washington", "Wash")
    assert not prediction_matches("  ", "Washington")
    assert not prediction_matches(" apple", "Apple")


def test_filter_correct_keeps_own_predictions(synthetic_workspace, word_tokenizer):
    from model_config import load_weights
    from model_engine import TransformerEngine

    config, weights = load_weights(synthetic_workspace["weights"])
    engine = TransformerEngine(config, weights)
    records = load_dataset(synthetic_workspace["dataset"])
    queries = filter_correct(records, engine, word_tokenizer)

    assert len(queries) == len(records)
    assert [q.query_id for q in queries] == list(range(len(records)))
    for query in queries:
        predicted, probability = engine.predict_token(query.tokens)
        assert query.attribute_token == predicted
        assert query.base_probability == probability


def test_filter_correct_drops_wrong_and_unresolvable(synthetic_workspace, word_tokenizer):
    from model_config import load_weights
    from model_engine import TransformerEngine
    from dataset import QueryRecord

    config, weights = load_weights(synthetic_workspace["weights"])
    engine = TransformerEngine(config, weights)
    good = load_dataset(synthetic_workspace["dataset"])[0]
    wrong = QueryRecord(good.query, good.subject, "zzz-never-predicted")
    subject_last = QueryRecord("Toyota is owned by Apple", "Apple", "Apple")
    queries = filter_correct([wrong, subject_last, good], engine, word_tokenizer)
    assert [q.record for q in queries] == [good]
    assert queries[0].query_id == 0
