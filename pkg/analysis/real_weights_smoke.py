#!/usr/bin/env python3
"""
Real-Weights Smoke Suite
Checks a converted GPT-2 checkpoint against reference logits, then compares
subject knockout with a random-position knockout on filtered factual queries.
"""

import sys
import json
import argparse
import logging
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "core"))

from dataset import filter_correct, load_dataset
from interventions import KnockoutWindow, knockout_window
from model_config import load_weights
from model_engine import LIGHT_GAUGES, TransformerEngine
from recall_metrics import relative_prob_change
from tokenizer import load_tokenizer

LOGIT_TOLERANCE = 1e-3
MIN_QUERIES = 20

logger = logging.getLogger(__name__)


def check_reference_logits(engine: TransformerEngine, reference_path: Path) -> float:
    """Largest absolute logit difference over the exported prompts"""
    worst = 0.0
    for record in json.loads(reference_path.read_text(encoding="utf-8")):
        trace = engine.forward(record["token_ids"], gauges=LIGHT_GAUGES)
        diff = float(np.max(np.abs(trace.final_logits - np.asarray(record["logits"]))))
        print(f"   {record['prompt']!r}: max |Δlogit| = {diff:.2e}")
        worst = max(worst, diff)
    return worst


def mean_upper_third_change(engine: TransformerEngine, query, sources, window_k: int) -> float:
    """Mean relative probability change over window centers in the upper third of layers"""
    L = engine.config.n_layers
    changes = []
    for center in range(L - L // 3 + 1, L + 1):
        window = KnockoutWindow(center, window_k, tuple(sources), query.tokens.last_position)
        trace = engine.forward(query.tokens, knockout_window(window, engine.config), LIGHT_GAUGES)
        p = float(trace.final_distribution[query.attribute_token])
        changes.append(relative_prob_change(query.base_probability, p))
    return float(np.mean(changes))


def main():
    parser = argparse.ArgumentParser(description="Smoke-test a converted GPT-2 checkpoint")
    parser.add_argument('--models-dir', type=str, default='../models')
    parser.add_argument('--name', type=str, default='gpt2-small')
    parser.add_argument('--dataset', type=str, required=True, help='Factual query JSONL')
    parser.add_argument('--window-k', type=int, default=9)
    parser.add_argument('--max-queries', type=int, default=50)
    parser.add_argument('--seed', type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)

    models = Path(args.models_dir)
    config, weights = load_weights(models / f"{args.name}.rpwt")
    engine = TransformerEngine(config, weights)
    tokenizer = load_tokenizer(models / f"{args.name}-vocab.json", models / f"{args.name}-merges.txt")

    print("🧪 REAL-WEIGHTS SMOKE SUITE")
    print("=" * 50)

    print("\n📐 Reference logits")
    worst = check_reference_logits(engine, models / f"{args.name}.reference_logits.json")
    logits_ok = worst < LOGIT_TOLERANCE
    print(f"   {'PASS' if logits_ok else 'FAIL'}: worst difference {worst:.2e} (tolerance {LOGIT_TOLERANCE})")

    print("\n🔍 Subject vs random knockout")
    queries = filter_correct(load_dataset(args.dataset, permissive=True), engine, tokenizer)[:args.max_queries]
    if len(queries) < MIN_QUERIES:
        print(f"   FAIL: only {len(queries)} queries survived the filter (need {MIN_QUERIES})")
        return 1

    rng = np.random.default_rng(args.seed)
    subject_changes, random_changes = [], []
    for query in queries:
        subject = list(query.tokens.subject_positions)
        # relation positions other than the first one
        pool = list(query.tokens.relation_positions)[1:]
        if not pool:
            continue
        size = min(len(subject), len(pool))
        random_sources = sorted(rng.choice(pool, size=size, replace=False).tolist())
        subject_changes.append(mean_upper_third_change(engine, query, subject, args.window_k))
        random_changes.append(mean_upper_third_change(engine, query, random_sources, args.window_k))

    subject_mean = float(np.mean(subject_changes))
    random_mean = float(np.mean(random_changes))
    direction_ok = subject_mean < random_mean
    print(f"   Queries compared: {len(subject_changes)}")
    print(f"   Subject knockout mean change: {subject_mean:+.2%}")
    print(f"   Random knockout mean change:  {random_mean:+.2%}")
    print(f"   {'PASS' if direction_ok else 'FAIL'}: subject knockout drops probability more")

    return 0 if logits_ok and direction_ok else 1


if __name__ == "__main__":
    sys.exit(main())
