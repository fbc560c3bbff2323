"""
Shared fixtures: tiny seeded models, tokenizers, corpora and datasets
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "core"))

from corpus import Corpus, Document  # noqa: E402
from model_config import Layout, save_weights  # noqa: E402
from model_engine import TransformerEngine  # noqa: E402
from synthetic_weights import random_weights, tiny_config  # noqa: E402
from tokenizer import WhitespaceTokenizer, tokenize_query  # noqa: E402

WORDS = [
    "Beats", "Music", "is", "owned", "by", "Apple", "The", "Eiffel", "Tower", "located", "in",
    "Paris", "France", "Toyota", "Camry", "produced", "capital", "of", "Japan", "Tokyo",
    "city", "company", "founded", "streaming", "service",
]

# (query, subject); every query keeps at least two relation tokens
QUERY_TEMPLATES = [
    ("Beats Music is owned by", "Beats Music"),
    ("The Eiffel Tower is located in", "Eiffel Tower"),
    ("Toyota Camry is produced by", "Toyota Camry"),
    ("The capital of Japan is", "Japan"),
    ("Apple is located in", "Apple"),
    ("Tokyo is located in", "Tokyo"),
    ("The Eiffel Tower is owned by", "The Eiffel Tower"),
    ("Paris is located in", "Paris"),
    ("Beats Music is located in", "Beats"),
    ("Toyota is owned by", "Toyota"),
]

PARAGRAPHS = [
    ("p1", "Beats Music", "Beats Music is a streaming service owned by Apple"),
    ("p2", "Eiffel Tower", "The Eiffel Tower is located in Paris France"),
    ("p3", "Toyota", "Toyota Camry is produced by Toyota company in Japan"),
    ("p4", "Japan", "Tokyo is the capital city of Japan"),
    ("p5", "Apple", "Apple company founded the streaming service"),
    ("p6", "Paris", "Paris is the capital of France"),
]


def make_engine(seed: int = 0, dtype=np.float64, **overrides) -> TransformerEngine:
    config = tiny_config(**overrides)
    return TransformerEngine(config, random_weights(config, seed=seed, dtype=dtype))


@pytest.fixture
def tiny_engine() -> TransformerEngine:
    return make_engine()


@pytest.fixture
def parallel_engine() -> TransformerEngine:
    return make_engine(seed=3, layout=Layout.PARALLEL)


@pytest.fixture
def word_tokenizer() -> WhitespaceTokenizer:
    return WhitespaceTokenizer(WORDS)


@pytest.fixture
def word_engine(word_tokenizer) -> TransformerEngine:
    """Model whose vocabulary matches word_tokenizer"""
    return make_engine(seed=1, vocab_size=word_tokenizer.vocab_size, n_layers=3, n_heads=2, d_model=8)


@pytest.fixture
def small_corpus() -> Corpus:
    return Corpus(Document(doc_id, title=title, text=text) for doc_id, title, text in PARAGRAPHS)


def write_jsonl(path: Path, rows) -> Path:
    path.write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")
    return path


@pytest.fixture
def synthetic_workspace(tmp_path, word_tokenizer):
    """
    Weight container, vocabulary, corpus and a dataset whose attributes are the
    model's own greedy predictions, so every query survives the filter.
    """
    config = tiny_config(vocab_size=word_tokenizer.vocab_size, n_layers=3, n_heads=2, d_model=8, d_inner=16)
    weights = random_weights(config, seed=7)
    weights_path = tmp_path / "model.rpwt"
    save_weights(weights_path, config, weights)

    vocab_path = tmp_path / "vocab.json"
    word_tokenizer.save(vocab_path)

    engine = TransformerEngine(config, weights)
    records = []
    for query, subject in QUERY_TEMPLATES:
        token, _ = engine.predict_token(tokenize_query(query, subject, word_tokenizer))
        records.append({"query": query, "subject": subject, "attribute": word_tokenizer.token_string(token)})
    dataset_path = write_jsonl(tmp_path / "queries.jsonl", records)

    corpus_path = write_jsonl(tmp_path / "paragraphs.jsonl", [
        {"doc_id": doc_id, "title": title, "section_title": "", "text": text}
        for doc_id, title, text in PARAGRAPHS
    ])

    return {
        "root": tmp_path,
        "weights": weights_path,
        "vocab": vocab_path,
        "dataset": dataset_path,
        "corpus": corpus_path,
        "out": tmp_path / "results",
        "records": records,
    }
