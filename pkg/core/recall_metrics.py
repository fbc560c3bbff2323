"""
Recall Metrics Module
Attributes rates, relative probability changes and extraction statistics
aggregated across queries
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from corpus import CandidateAttributeSet

logger = logging.getLogger(__name__)


# ─── Per-query metrics ───────────────────────────────────────────────────────

def attributes_rate(tokens: Sequence[int], candidates: CandidateAttributeSet) -> Optional[float]:
    """Share of `tokens` inside A_s; None when A_s is empty"""
    if len(tokens) == 0:
        raise ValueError("attributes_rate needs a non-empty token list")
    if candidates.is_empty():
        return None
    hits = sum(1 for t in tokens if t in candidates)
    return hits / len(tokens)


def embedding_attribute_rate(lens, subject_tokens: Sequence[int], candidates: CandidateAttributeSet,
                             top_k: int = 50, mode: str = "embedding") -> Dict[str, Optional[float]]:
    """
    Attributes rate of the subject's own token embeddings: the best single
    token and the mean embedding vector.
    """
    if len(subject_tokens) == 0:
        raise ValueError("Subject has no tokens")
    E = lens.weights.embedding
    per_token = [
        attributes_rate(lens.project_to_vocab(E[t], top_k, mode).token_ids, candidates)
        for t in subject_tokens
    ]
    mean_vector = E[list(subject_tokens)].mean(axis=0)
    mean_rate = attributes_rate(lens.project_to_vocab(mean_vector, top_k, mode).token_ids, candidates)
    known = [r for r in per_token if r is not None]
    return {
        "per_token_max": max(known) if known else None,
        "mean_vector_rate": mean_rate,
    }


def relative_prob_change(base_p: float, intervened_p: float) -> float:
    """(intervened - base) / base as a fraction"""
    if not base_p > 0:
        raise ValueError(f"Base probability must be positive, got {base_p}")
    return (intervened_p - base_p) / base_p


# ─── Extraction statistics ───────────────────────────────────────────────────

@dataclass
class ExtractionStats:
    """Aggregated extraction statistics over a set of queries"""
    n_queries: int = 0
    n_layers: int = 0
    extracting_queries: int = 0
    total_extracting_layers: int = 0
    extraction_rate: float = 0.0
    mean_extracting_layers: float = 0.0
    per_layer_rates: List[float] = field(default_factory=list)

    def calculate_derived_metrics(self):
        if self.n_queries > 0:
            self.extraction_rate = self.extracting_queries / self.n_queries
            self.mean_extracting_layers = self.total_extracting_layers / self.n_queries

    def to_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "extraction_rate": round(self.extraction_rate, 6),
            "mean_extracting_layers": round(self.mean_extracting_layers, 6),
            "per_layer_rates": [round(r, 6) for r in self.per_layer_rates],
        }


Grid = Sequence[Union[bool, object]]


def _matched_matrix(grids: Sequence[Grid]) -> np.ndarray:
    """Q×L boolean matrix from bool grids or ExtractionEvent grids"""
    if len(grids) == 0:
        raise ValueError("Cannot aggregate extraction statistics over zero queries")
    lengths = {len(g) for g in grids}
    if len(lengths) != 1:
        raise ValueError(f"Extraction grids disagree on layer count: {sorted(lengths)}")
    return np.array([[bool(getattr(e, "matched", e)) for e in grid] for grid in grids], dtype=bool)


def aggregate_extraction_stats(grids: Sequence[Grid]) -> ExtractionStats:
    matched = _matched_matrix(grids)
    per_query = matched.sum(axis=1)
    stats = ExtractionStats(
        n_queries=matched.shape[0],
        n_layers=matched.shape[1],
        extracting_queries=int((per_query > 0).sum()),
        total_extracting_layers=int(per_query.sum()),
        per_layer_rates=matched.mean(axis=0).tolist(),
    )
    stats.calculate_derived_metrics()
    return stats


def extraction_precedence(mhsa_grids: Sequence[Grid], mlp_grids: Sequence[Grid]) -> Dict[str, Optional[float]]:
    """
    Among queries with an MLP extraction event: share with an MHSA event at or
    before the first MLP event layer, and share with no MHSA event at all.
    """
    mhsa = _matched_matrix(mhsa_grids)
    mlp = _matched_matrix(mlp_grids)
    if mhsa.shape != mlp.shape:
        raise ValueError("MHSA and MLP grids must cover the same queries and layers")

    mlp_queries = np.flatnonzero(mlp.any(axis=1))
    if len(mlp_queries) == 0:
        return {"mlp_extracting_queries": 0, "preceded_by_mhsa": None, "without_mhsa": None}

    preceded = 0
    without = 0
    for q in mlp_queries:
        first_mlp = int(np.argmax(mlp[q]))
        if not mhsa[q].any():
            without += 1
        elif mhsa[q, :first_mlp + 1].any():
            preceded += 1
    return {
        "mlp_extracting_queries": int(len(mlp_queries)),
        "preceded_by_mhsa": preceded / len(mlp_queries),
        "without_mhsa": without / len(mlp_queries),
    }


def mean_attribute_rank(ranks: Sequence[int]) -> Optional[float]:
    if len(ranks) == 0:
        return None
    return float(np.mean(ranks))


def mean_ignoring_missing(values: Sequence[Optional[float]]) -> Optional[float]:
    known = [v for v in values if v is not None]
    return float(np.mean(known)) if known else None


# ─── Tidy aggregation ────────────────────────────────────────────────────────

def summarize_observations(observations: Sequence[dict], keys: Sequence[str]) -> pd.DataFrame:
    """
    Mean and count of `value` per key combination; missing values are dropped
    so empty buckets produce no row.
    """
    columns = list(keys) + ["mean", "count"]
    if not observations:
        return pd.DataFrame(columns=columns)
    df = pd.DataFrame(list(observations))
    for key in keys:
        if key not in df.columns:
            df[key] = ""
    df = df[df["value"].notna()]
    if df.empty:
        return pd.DataFrame(columns=columns)
    summary = (df.groupby(list(keys), sort=True)["value"]
                 .agg(["mean", "count"])
                 .reset_index())
    return summary[columns]


def print_summary(title: str, aggregates: Dict):
    """Console summary of an experiment's aggregates"""
    print("\n" + "=" * 60)
    print(f"           {title.upper()}")
    print("=" * 60)
    for key, value in aggregates.items():
        if isinstance(value, dict):
            print(f"\n{key.replace('_', ' ').title()}:")
            for sub_key, sub_value in value.items():
                print(f"   {sub_key}: {_format_value(sub_value)}")
        else:
            print(f"   {key.replace('_', ' ').title()}: {_format_value(value)}")
    print("\n" + "=" * 60)


def _format_value(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    if isinstance(value, list) and len(value) > 8:
        return f"[{len(value)} values]"
    return str(value)
