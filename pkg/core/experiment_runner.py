"""
Experiment Runner
Builds per-query intervention plans, runs them on a bounded worker pool and
assembles self-describing reports plus tidy plot CSVs.

Every experiment kind produces observations of the form
    {"query_id", "series", <series keys>, "value"}
which emit_plot_data reduces to one CSV per series (keys, mean, count).
"""

import asyncio
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from attribution import DegenerateSaliencyError, gradient_times_activation, saliency_by_role
from config_manager import ExperimentConfig
from corpus import (
    DEFAULT_STOPWORDS_PATH, CandidateAttributeSet, CandidateCache, Corpus, build_candidate_set,
    input_fingerprint, load_stopwords,
)
from dataset import FactualQuery, QueryRecord, filter_correct, load_dataset
from interventions import (
    EMPTY_PLAN, MHSA, MLP, InterventionPlan, KnockoutWindow,
    block_sources_at_layers, exclude_first_position, extraction_knockout_conditions,
    info_flow_conditions, knockout_window, order_subset, patch_positions,
    subject_position_conditions, sublayer_knockout,
)
from lens import DELTA, VocabProjection, VocabularyLens
from model_config import atomic_write_text, file_sha256, load_weights
from model_engine import FULL_GAUGES, LIGHT_GAUGES, TraceGauges, TransformerEngine
from recall_metrics import (
    aggregate_extraction_stats, attributes_rate, embedding_attribute_rate,
    extraction_precedence, mean_attribute_rank, mean_ignoring_missing, relative_prob_change,
    summarize_observations,
)
from tokenizer import Tokenizer, load_tokenizer

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FLOAT_DIGITS = 10
CSV_FLOAT_FORMAT = "%.6f"

INFO_FLOW = "info-flow"
WINDOW_SWEEP = "window-sweep"
ORDER_SPLIT = "order-split"
NO_FIRST_POS = "no-first-pos"
SUBJECT_POS = "subject-pos"
ATTR_RATE = "attr-rate"
SUBLAYER_KNOCKOUT = "sublayer-knockout"
EXTRACTION = "extraction"
PATCHING = "patching"
HEADS = "heads"
SALIENCY = "saliency"
SUBUPDATES = "mlp-subupdates"

EXPERIMENT_KINDS = (
    INFO_FLOW, WINDOW_SWEEP, ORDER_SPLIT, NO_FIRST_POS, SUBJECT_POS, ATTR_RATE,
    SUBLAYER_KNOCKOUT, EXTRACTION, PATCHING, HEADS, SALIENCY, SUBUPDATES,
)
CORPUS_KINDS = (ATTR_RATE, SUBLAYER_KNOCKOUT)

SUBUPDATE_GAUGES = TraceGauges(attention_weights=False, head_contributions=False, mlp_activations=True)

# Series name -> grouping keys of its plot CSV
PLOT_SERIES = {
    "info_flow": ["layer", "condition"],
    "window_sweep": ["window", "layer", "condition"],
    "order_split": ["subset", "layer", "condition"],
    "no_first_pos": ["layer", "condition"],
    "subject_pos": ["layer", "condition"],
    "attr_rate": ["layer", "condition"],
    "attr_rate_embedding": ["condition"],
    "sublayer_knockout": ["measured_layer", "layer", "condition"],
    "extraction": ["layer", "condition"],
    "extraction_knockout": ["condition"],
    "patching": ["source_layer", "condition"],
    "heads": ["layer", "head"],
    "saliency": ["layer", "condition"],
    "saliency_heatmap": ["layer", "position"],
    "mlp_subupdates": ["layer", "condition"],
    "mlp_subupdate_dims": ["layer", "dimension"],
}


class ExperimentError(RuntimeError):
    """Experiment cannot run: unknown kind, missing corpus or no usable queries"""


@dataclass
class QueryOutcome:
    """Result of one query's work unit; `extras` never reaches the report"""
    record: dict
    observations: List[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)


@dataclass
class ExperimentReport:
    kind: str
    config: dict
    config_hash: str
    weights_hash: str
    dataset_hash: str
    per_query: List[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    observations: List[dict] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return _jsonable({
            "schema_version": self.schema_version,
            "kind": self.kind,
            "config": self.config,
            "config_hash": self.config_hash,
            "weights_hash": self.weights_hash,
            "dataset_hash": self.dataset_hash,
            "per_query": self.per_query,
            "aggregates": self.aggregates,
            "observations": self.observations,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, ensure_ascii=False) + "\n"

    def series(self, name: str) -> List[dict]:
        return [obs for obs in self.observations if obs.get("series") == name]


def _jsonable(value):
    """numpy scalars to Python, floats rounded, NaN to null"""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return None if math.isnan(value) else round(value, FLOAT_DIGITS)
    return value


# ─── Output ──────────────────────────────────────────────────────────────────

def report_dir(out_dir: Union[str, Path], kind: str) -> Path:
    return Path(out_dir) / kind


def write_report(report: ExperimentReport, out_dir: Union[str, Path]) -> Path:
    path = report_dir(out_dir, report.kind) / "report.json"
    atomic_write_text(path, report.to_json())
    logger.info(f"Report written to {path}")
    return path


def plot_frame(report: ExperimentReport, series: str) -> pd.DataFrame:
    return summarize_observations(report.series(series), PLOT_SERIES[series])


def emit_plot_data(report: ExperimentReport, out_dir: Union[str, Path]) -> List[Path]:
    """One CSV per observation series; empty buckets produce no row"""
    present = sorted({obs["series"] for obs in report.observations})
    paths = []
    for series in present:
        frame = plot_frame(report, series)
        path = report_dir(out_dir, report.kind) / f"{series}.csv"
        atomic_write_text(path, frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n"))
        paths.append(path)
    logger.info(f"Wrote {len(paths)} plot CSV(s) to {report_dir(out_dir, report.kind)}")
    return paths


def curve_minima(frame: pd.DataFrame, group: str = "condition", axis: str = "layer") -> Dict[str, dict]:
    """Lowest mean per group and where it occurs (largest probability drop)"""
    minima = {}
    for name, rows in frame.groupby(group, sort=True):
        best = rows.sort_values(["mean", axis], kind="mergesort").iloc[0]
        minima[str(name)] = {axis: int(best[axis]), "mean": float(best["mean"])}
    return minima


# ─── Runner ──────────────────────────────────────────────────────────────────

class ExperimentRunner:
    """Runs one experiment kind over the correctly predicted queries"""

    def __init__(self,
                 config: ExperimentConfig,
                 engine: TransformerEngine,
                 tokenizer: Tokenizer,
                 records: Sequence[QueryRecord],
                 corpus: Optional[Corpus] = None,
                 stopwords: Optional[set] = None,
                 weights_hash: str = "",
                 dataset_hash: str = "",
                 quiet: bool = False):
        self.engine = engine
        self.model_config = engine.config
        self.config = config.resolve(engine.config.n_layers)
        self.tokenizer = tokenizer
        self.records = list(records)
        self.corpus = corpus
        self.stopwords = stopwords
        self.weights_hash = weights_hash
        self.dataset_hash = dataset_hash
        self.quiet = quiet
        self.lens = VocabularyLens(engine, tokenizer, self.config.normalize_update_projection)

        vocab_size = engine.config.vocab_size
        self.top_k = min(self.config.top_k, vocab_size)
        self.head_top_k = min(self.config.head_top_k, vocab_size)
        if self.top_k < self.config.top_k:
            logger.warning(f"top_k={self.config.top_k} exceeds the vocabulary; using {self.top_k}")

        self._queries: Optional[List[FactualQuery]] = None
        self._candidates: Dict[str, CandidateAttributeSet] = {}

    @classmethod
    def from_config(cls, config: ExperimentConfig, quiet: bool = False) -> "ExperimentRunner":
        """Load weights, tokenizer, dataset and (optionally) corpus named by the config"""
        for name in ("weights", "tokenizer_vocab", "dataset"):
            if not getattr(config, name):
                raise ExperimentError(f"Configuration is missing '{name}'")

        model_config, weights = load_weights(config.weights)
        engine = TransformerEngine(model_config, weights)
        tokenizer = load_tokenizer(config.tokenizer_vocab, config.tokenizer_merges)
        records = load_dataset(config.dataset, permissive=config.permissive_dataset)

        corpus = None
        stopwords = None
        if config.corpus:
            corpus = Corpus.from_jsonl(config.corpus, permissive=config.permissive_dataset)
            stopwords = load_stopwords(config.stopwords)

        return cls(config, engine, tokenizer, records, corpus, stopwords,
                   weights_hash=file_sha256(config.weights),
                   dataset_hash=file_sha256(config.dataset),
                   quiet=quiet)

    # ─── Query preparation ─────────────────────────────────────────────────

    def queries(self) -> List[FactualQuery]:
        """Correctly predicted queries, subsampled to max_queries with the configured seed"""
        if self._queries is None:
            survivors = filter_correct(self.records, self.engine, self.tokenizer)
            limit = self.config.max_queries
            if limit is not None and len(survivors) > limit:
                rng = np.random.default_rng(self.config.seed)
                keep = sorted(rng.choice(len(survivors), size=limit, replace=False).tolist())
                survivors = [survivors[i] for i in keep]
                logger.info(f"Sampled {limit} queries with seed {self.config.seed}")
            self._queries = survivors
        if not self._queries:
            raise ExperimentError("No query survived the correctness filter; nothing to run")
        return self._queries

    def prepare_candidates(self, queries: Sequence[FactualQuery]):
        """Build candidate attribute sets for every subject before the workers start"""
        if self.corpus is None:
            raise ExperimentError("This experiment needs a corpus (--corpus)")
        if self.stopwords is None:
            self.stopwords = load_stopwords(self.config.stopwords)

        subjects = sorted({q.record.subject for q in queries})
        cache = None
        if self.config.candidate_cache:
            fingerprint = input_fingerprint(
                corpus=self.config.corpus,
                stopwords=self.config.stopwords or DEFAULT_STOPWORDS_PATH,
                tokenizer_vocab=self.config.tokenizer_vocab,
                tokenizer_merges=self.config.tokenizer_merges,
            )
            cache = CandidateCache(self.config.candidate_cache, self.config.candidate_top_n, fingerprint)
        for subject in subjects:
            if subject in self._candidates:
                continue
            if cache is not None:
                self._candidates[subject] = cache.get_or_build(subject, self.corpus, self.tokenizer, self.stopwords)
            else:
                self._candidates[subject] = build_candidate_set(
                    subject, self.corpus, self.tokenizer, self.stopwords, self.config.candidate_top_n
                )
        if cache is not None:
            cache.save()
        empty = sum(1 for s in subjects if self._candidates[s].is_empty())
        logger.info(f"Candidate sets ready for {len(subjects)} subjects ({empty} empty)")

    def candidates(self, subject: str) -> CandidateAttributeSet:
        return self._candidates[subject]

    def attribute_target(self, query: FactualQuery) -> int:
        """First token of the attribute string as it would continue the query"""
        ids = query.tokens.token_ids
        continued = self.tokenizer.encode(f"{query.record.query} {query.record.attribute}")
        if len(continued) > len(ids) and tuple(continued[:len(ids)]) == tuple(ids):
            return int(continued[len(ids)])
        logger.warning(f"Attribute of query {query.query_id} does not tokenize as a continuation; "
                       f"using the predicted token")
        return query.attribute_token

    def query_record(self, query: FactualQuery) -> dict:
        tokens = query.tokens
        return {
            "query_id": query.query_id,
            "query": query.record.query,
            "subject": query.record.subject,
            "attribute": query.record.attribute,
            "relation_id": query.record.relation_id,
            "predicted_token": query.attribute_token,
            "predicted_string": self.tokenizer.token_string(query.attribute_token),
            "base_probability": query.base_probability,
            "n_tokens": tokens.n_tokens,
            "subject_positions": list(tokens.subject_positions),
            "span_widened": tokens.span_widened,
        }

    # ─── Worker pool ───────────────────────────────────────────────────────

    async def map_queries(self, work: Callable[[FactualQuery], QueryOutcome],
                          queries: Sequence[FactualQuery], desc: str) -> List[QueryOutcome]:
        """Run `work` on every query with at most `workers` in flight; results keep query order"""
        semaphore = asyncio.Semaphore(self.config.workers)
        with tqdm(total=len(queries), desc=desc, disable=self.quiet) as progress:
            async def run_one(query: FactualQuery) -> QueryOutcome:
                async with semaphore:
                    outcome = await asyncio.to_thread(work, query)
                progress.update(1)
                return outcome

            return list(await asyncio.gather(*(run_one(q) for q in queries)))

    # ─── Entry points ──────────────────────────────────────────────────────

    def run(self, kind: str) -> ExperimentReport:
        return asyncio.run(self.run_async(kind))

    async def run_async(self, kind: str) -> ExperimentReport:
        handlers = {
            INFO_FLOW: self.info_flow,
            WINDOW_SWEEP: self.window_sweep,
            ORDER_SPLIT: self.order_split,
            NO_FIRST_POS: self.no_first_position,
            SUBJECT_POS: self.subject_positions,
            ATTR_RATE: self.attribute_rates,
            SUBLAYER_KNOCKOUT: self.sublayer_knockouts,
            EXTRACTION: self.extraction,
            PATCHING: self.patching,
            HEADS: self.heads,
            SALIENCY: self.saliency,
            SUBUPDATES: self.mlp_subupdates,
        }
        if kind not in handlers:
            raise ExperimentError(f"Unknown experiment kind '{kind}' (available: {', '.join(EXPERIMENT_KINDS)})")
        if kind in CORPUS_KINDS and self.corpus is None:
            raise ExperimentError(f"Experiment '{kind}' needs a corpus (--corpus)")

        queries = self.queries()
        logger.info("=" * 60)
        logger.info(f"Running {kind} on {len(queries)} queries "
                    f"(L={self.model_config.n_layers}, workers={self.config.workers})")
        logger.info("=" * 60)

        outcomes = await handlers[kind](queries)
        report = ExperimentReport(
            kind=kind,
            config=self.config.snapshot(),
            config_hash=self.config.config_hash(),
            weights_hash=self.weights_hash,
            dataset_hash=self.dataset_hash,
            per_query=[o.record for o in outcomes],
            observations=[obs for o in outcomes for obs in o.observations],
        )
        report.aggregates = self.aggregate(kind, report, outcomes)
        return report

    def aggregate(self, kind: str, report: ExperimentReport, outcomes: List[QueryOutcome]) -> dict:
        aggregates = {"n_records": len(self.records), "n_queries": len(outcomes)}
        knockout_series = {INFO_FLOW: "info_flow", NO_FIRST_POS: "no_first_pos", SUBJECT_POS: "subject_pos"}

        if kind in knockout_series:
            frame = plot_frame(report, knockout_series[kind])
            aggregates["largest_drop"] = curve_minima(frame) if not frame.empty else {}
        elif kind == WINDOW_SWEEP:
            frame = plot_frame(report, "window_sweep")
            aggregates["largest_drop"] = {
                f"k={int(window)}": curve_minima(rows)
                for window, rows in frame.groupby("window", sort=True)
            }
        elif kind == ORDER_SPLIT:
            frame = plot_frame(report, "order_split")
            aggregates["subset_sizes"] = dict(sorted(
                pd.Series([o.extras["subset"] for o in outcomes]).value_counts().items()
            ))
            aggregates["largest_drop"] = {
                str(subset): curve_minima(rows) for subset, rows in frame.groupby("subset", sort=True)
            }
        elif kind == ATTR_RATE:
            aggregates.update(self._aggregate_attr_rate(report, outcomes))
        elif kind == SUBLAYER_KNOCKOUT:
            frame = plot_frame(report, "sublayer_knockout")
            aggregates["reference_layer"] = self.config.reference_layer
            aggregates["largest_drop"] = {
                f"measured={int(m)}": curve_minima(rows) for m, rows in frame.groupby("measured_layer", sort=True)
            }
        elif kind == EXTRACTION:
            aggregates.update(self._aggregate_extraction(outcomes))
        elif kind == PATCHING:
            aggregates.update(self._aggregate_patching(report))
        elif kind == HEADS:
            aggregates.update(self._aggregate_heads(outcomes))
        elif kind == SALIENCY:
            frame = summarize_observations(report.series("saliency"), ["condition"])
            aggregates["role_means"] = {row.condition: float(row.mean) for row in frame.itertuples()}
            aggregates["skipped_layers"] = sum(o.extras.get("skipped_layers", 0) for o in outcomes)
        elif kind == SUBUPDATES:
            aggregates.update(self._aggregate_subupdates(report, outcomes))
        return aggregates

    # ─── Attention knockout ────────────────────────────────────────────────

    def attribute_probability(self, query: FactualQuery, plan: InterventionPlan) -> float:
        trace = self.engine.forward(query.tokens, plan, LIGHT_GAUGES)
        return float(trace.final_distribution[query.attribute_token])

    def knockout_curve(self, query: FactualQuery, conditions: Dict[str, List[int]], window_k: int,
                       series: str, extra: Optional[dict] = None) -> List[dict]:
        """Relative change of the attribute probability for every window center and condition"""
        observations = []
        target = query.tokens.last_position
        for name, sources in conditions.items():
            if not sources:
                continue
            for center in range(1, self.model_config.n_layers + 1):
                window = KnockoutWindow(center, window_k, tuple(sources), target)
                p = self.attribute_probability(query, knockout_window(window, self.model_config))
                observations.append({
                    "query_id": query.query_id,
                    "series": series,
                    **(extra or {}),
                    "layer": center,
                    "condition": name,
                    "value": relative_prob_change(query.base_probability, p),
                })
        return observations

    async def info_flow(self, queries: Sequence[FactualQuery]) -> List[QueryOutcome]:
        def work(query):
            conditions = info_flow_conditions(query.tokens)
            return QueryOutcome(self.query_record(query),
                                self.knockout_curve(query, conditions, self.config.window_k, "info_flow"))
        return await self.map_queries(work, queries, INFO_FLOW)

    async def window_sweep(self, queries: Sequence[FactualQuery]) -> List[QueryOutcome]:
        def work(query):
            conditions = info_flow_conditions(query.tokens)
            observations = []
            for k in self.config.window_sizes:
                observations.extend(self.knockout_curve(query, conditions, k, "window_sweep", {"window": k}))
            return QueryOutcome(self.query_record(query), observations)
        return await self.map_queries(work, queries, WINDOW_SWEEP)

    async def order_split(self, queries: Sequence[FactualQuery]) -> List[QueryOutcome]:
        def work(query):
            subset = order_subset(query.tokens)
            conditions = info_flow_conditions(query.tokens)
            record = {**self.query_record(query), "subset": subset}
            observations = self.knockout_curve(query, conditions, self.config.window_k,
                                               "order_split", {"subset": subset})
            return QueryOutcome(record, observations, {"subset": subset})
        return await self.map_queries(work, queries, ORDER_SPLIT)

    async def no_first_position(self, queries: Sequence[FactualQuery]) -> List[QueryOutcome]:
        def work(query):
            conditions = exclude_first_position(info_flow_conditions(query.tokens))
            return QueryOutcome(self.query_record(query),
                                self.knockout_curve(query, conditions, self.config.window_k, "no_first_pos"))
        return await self.map_queries(work, queries, NO_FIRST_POS)

    async def subject_positions(self, queries: Sequence[FactualQuery]) -> List[QueryOutcome]:
        def work(query):
            conditions = subject_position_conditions(query.tokens)
            record = {**self.query_record(query), "multi_token_subject": bool(conditions)}
            return QueryOutcome(record,
                                self.knockout_curve(query, conditions, self.config.window_k, "subject_pos"))
        return await self.map_queries(work, queries, SUBJECT_POS)

    # ─── Attributes rate ───────────────────────────────────────────────────

    def rate_at(self, hidden: np.ndarray, candidates: CandidateAttributeSet) -> Optional[float]:
        projection = self.lens.project_to_vocab(hidden, self.top_k, DELTA)
        return attributes_rate(projection.token_ids, candidates)

    async def attribute_rates(self, queries: Sequence[FactualQuery]) -> List[QueryOutcome]:
        self.prepare_candidates(queries)

        def work(query):
            tokens = query.tokens
            candidates = self.candidates(query.record.subject)
            positions = {
                "first_subject": tokens.subject_positions[0],
                "last_subject": tokens.last_subject_position,
                "after_subject": tokens.last_subject_position + 1,
                "last": tokens.last_position,
            }
            trace = self.engine.forward(tokens, gauges=LIGHT_GAUGES)
            observations = []
            for layer in range(0, self.model_config.n_layers + 1):
                hidden = trace.residual(layer)
                for name, pos in positions.items():
                    observations.append({
                        "query_id": query.query_id, "series": "attr_rate",
                        "layer": layer, "condition": name,
                        "value": self.rate_at(hidden[pos], candidates),
                    })

            subject_ids = [tokens.token_ids[p] for p in tokens.subject_positions]
            embedding_rates = embedding_attribute_rate(self.lens, subject_ids, candidates,
                                                       self.top_k, self.config.embedding_projection)
            for name, value in embedding_rates.items():
                observations.append({"query_id": query.query_id, "series": "attr_rate_embedding",
                                     "condition": name, "value": value})
            record = {**self.query_record(query), "candidate_set_size": len(candidates)}
            return QueryOutcome(record, observations)
        return await self.map_queries(work, queries, ATTR_RATE)

    def _aggregate_attr_rate(self, report: ExperimentReport, outcomes: List[QueryOutcome]) -> dict:
        frame = plot_frame(report, "attr_rate")
        peaks = {}
        for name, rows in frame.groupby("condition", sort=True):
            best = rows.sort_values(["mean", "layer"], ascending=[False, True], kind="mergesort").iloc[0]
            peaks[str(name)] = {"layer": int(best["layer"]), "mean": float(best["mean"])}
        embedding = plot_frame(report, "attr_rate_embedding")
        return {
            "empty_candidate_sets": sum(1 for o in outcomes if o.record["candidate_set_size"] == 0),
            "peak_rate": peaks,
            "embedding_rates": {row.condition: float(row.mean) for row in embedding.itertuples()},
        }

    # ─── Sublayer knockout ─────────────────────────────────────────────────

    async def sublayer_knockouts(self, queries: Sequence[FactualQuery]) -> List[QueryOutcome]:
        self.prepare_candidates(queries)
        L = self.model_config.n_layers
        measured = list(range(1, L + 1)) if self.config.measure_all_layers else [self.config.reference_layer]

        def work(query):
            tokens = query.tokens
            pos = tokens.last_subject_position
            candidates = self.candidates(query.record.subject)
            baseline = self.engine.forward(tokens, gauges=LIGHT_GAUGES)
            base_rates = {m: self.rate_at(baseline.residual(m)[pos], candidates) for m in measured}

            observations = []
            for start in range(1, max(measured) + 1):
                for m in measured:
                    if start <= m:
                        observations.append({
                            "query_id": query.query_id, "series": "sublayer_knockout",
                            "measured_layer": m, "layer": start, "condition": "none",
                            "value": base_rates[m],
                        })
                for kind in (MHSA, MLP):
                    plan = sublayer_knockout(kind, start, pos, self.model_config, self.config.sublayer_span)
                    trace = self.engine.forward(tokens, plan, LIGHT_GAUGES)
                    for m in measured:
                        if start <= m:
                            observations.append({
                                "query_id": query.query_id, "series": "sublayer_knockout",
                                "measured_layer": m, "layer": start, "condition": kind,
                                "value": self.rate_at(trace.residual(m)[pos], candidates),
                            })
            return QueryOutcome(self.query_record(query), observations)
        return await self.map_queries(work, queries, SUBLAYER_KNOCKOUT)

    # ─── Extraction ────────────────────────────────────────────────────────

    def knockout_grid(self, query: FactualQuery, sources: List[int]) -> List[bool]:
        """MHSA extraction per layer with the last position blocked from `sources`"""
        tokens = query.tokens
        target = query.attribute_token
        L = self.model_config.n_layers
        if self.config.knockout_scope == "all_layers" or not sources:
            plan = block_sources_at_layers(sources, tokens.last_position, range(1, L + 1)) if sources else EMPTY_PLAN
            trace = self.engine.forward(tokens, plan, LIGHT_GAUGES)
            return [e.matched for e in self.lens.extraction_grid(trace, MHSA, target)]

        grid = []
        for layer in range(1, L + 1):
            window = KnockoutWindow(layer, self.config.window_k, tuple(sources), tokens.last_position)
            trace = self.engine.forward(tokens, knockout_window(window, self.model_config), LIGHT_GAUGES)
            grid.append(self.lens.detect_extraction(trace, layer, MHSA, target).matched)
        return grid

    async def extraction(self, queries: Sequence[FactualQuery]) -> List[QueryOutcome]:
        def work(query):
            tokens = query.tokens
            target = query.attribute_token
            trace = self.engine.forward(tokens, gauges=LIGHT_GAUGES)
            mhsa = [e.matched for e in self.lens.extraction_grid(trace, MHSA, target)]
            mlp = [e.matched for e in self.lens.extraction_grid(trace, MLP, target)]

            observations = []
            for kind, grid in ((MHSA, mhsa), (MLP, mlp)):
                for layer, matched in enumerate(grid, start=1):
                    observations.append({"query_id": query.query_id, "series": "extraction",
                                         "layer": layer, "condition": kind, "value": float(matched)})

            # attribute rank in the subject representation entering each extracting layer
            ranks = [
                self.lens.attribute_rank(trace.residual(layer - 1)[tokens.last_subject_position], target, DELTA)
                for layer, matched in enumerate(mhsa, start=1) if matched
            ]

            knockout_grids = {}
            for name, sources in extraction_knockout_conditions(tokens).items():
                grid = self.knockout_grid(query, sources)
                knockout_grids[name] = grid
                observations.append({"query_id": query.query_id, "series": "extraction_knockout",
                                     "condition": name, "value": float(any(grid))})

            record = {
                **self.query_record(query),
                "mhsa_layers": [l for l, m in enumerate(mhsa, start=1) if m],
                "mlp_layers": [l for l, m in enumerate(mlp, start=1) if m],
                "subject_attribute_ranks": ranks,
            }
            return QueryOutcome(record, observations,
                                {"mhsa": mhsa, "mlp": mlp, "knockout": knockout_grids, "ranks": ranks})
        return await self.map_queries(work, queries, EXTRACTION)

    def _aggregate_extraction(self, outcomes: List[QueryOutcome]) -> dict:
        mhsa = [o.extras["mhsa"] for o in outcomes]
        mlp = [o.extras["mlp"] for o in outcomes]
        conditions = list(outcomes[0].extras["knockout"])
        return {
            "mhsa": aggregate_extraction_stats(mhsa).to_dict(),
            "mlp": aggregate_extraction_stats(mlp).to_dict(),
            "knockout": {
                name: aggregate_extraction_stats([o.extras["knockout"][name] for o in outcomes]).to_dict()
                for name in conditions
            },
            "knockout_scope": self.config.knockout_scope,
            "precedence": extraction_precedence(mhsa, mlp),
            "mean_subject_attribute_rank": mean_attribute_rank([r for o in outcomes for r in o.extras["ranks"]]),
        }

    # ─── Patching ──────────────────────────────────────────────────────────

    async def patching(self, queries: Sequence[FactualQuery]) -> List[QueryOutcome]:
        def work(query):
            tokens = query.tokens
            target = query.attribute_token
            groups = {
                "subject": list(tokens.subject_positions),
                "non_subject": list(tokens.relation_positions),
                "last": [tokens.last_position],
            }
            baseline = self.engine.forward(tokens, gauges=LIGHT_GAUGES)
            base_any = any(e.matched for e in self.lens.extraction_grid(baseline, MHSA, target))

            observations = []
            for src in self.config.patch_layers:
                observations.append({"query_id": query.query_id, "series": "patching",
                                     "source_layer": src, "condition": "none", "value": float(base_any)})
                for name, positions in groups.items():
                    if not positions:
                        continue
                    plan = patch_positions(positions, src, self.model_config)
                    trace = self.engine.forward(tokens, plan, LIGHT_GAUGES)
                    extracted = any(e.matched for e in self.lens.extraction_grid(trace, MHSA, target))
                    observations.append({"query_id": query.query_id, "series": "patching",
                                         "source_layer": src, "condition": name, "value": float(extracted)})
            record = {**self.query_record(query), "baseline_extraction": base_any}
            return QueryOutcome(record, observations)
        return await self.map_queries(work, queries, PATCHING)

    def _aggregate_patching(self, report: ExperimentReport) -> dict:
        frame = plot_frame(report, "patching")
        rates: Dict[str, Dict[str, float]] = {}
        for row in frame.itertuples():
            rates.setdefault(str(row.condition), {})[f"src={int(row.source_layer)}"] = float(row.mean)
        return {"patch_layers": list(self.config.patch_layers), "extraction_rate": rates}

    # ─── Heads ─────────────────────────────────────────────────────────────

    async def heads(self, queries: Sequence[FactualQuery]) -> List[QueryOutcome]:
        H = self.model_config.n_heads

        def work(query):
            tokens = query.tokens
            target = query.attribute_token
            trace = self.engine.forward(tokens, gauges=FULL_GAUGES)
            subject_ids = [tokens.token_ids[p] for p in tokens.subject_positions]

            events = []
            for event in self.lens.extraction_grid(trace, MHSA, target):
                if event.matched:
                    heads = self.lens.find_mapping_heads(event.layer, subject_ids, target, self.head_top_k)
                    events.append({"layer": event.layer, "mapping_heads": heads})

            observations = []
            extracting_heads = []
            for layer in range(1, self.model_config.n_layers + 1):
                for head in range(H):
                    matched = self.lens.head_extraction(trace, layer, head, target).matched
                    if matched:
                        extracting_heads.append((layer, head))
                    observations.append({"query_id": query.query_id, "series": "heads",
                                         "layer": layer, "head": head, "value": float(matched)})
            record = {**self.query_record(query), "extraction_events": events}
            return QueryOutcome(record, observations, {"events": events, "extracting_heads": extracting_heads})
        return await self.map_queries(work, queries, HEADS)

    def _aggregate_heads(self, outcomes: List[QueryOutcome]) -> dict:
        events = [e for o in outcomes for e in o.extras["events"]]
        explained = [e for e in events if e["mapping_heads"]]

        frequency: Dict[tuple, int] = {}
        for event in explained:
            for head in event["mapping_heads"]:
                key = (event["layer"], head)
                frequency[key] = frequency.get(key, 0) + 1

        extraction_counts: Dict[tuple, int] = {}
        for o in outcomes:
            for key in o.extras["extracting_heads"]:
                extraction_counts[key] = extraction_counts.get(key, 0) + 1
        n = len(outcomes)
        hubs = []
        for (layer, head), count in sorted(extraction_counts.items()):
            if count / n >= self.config.knowledge_hub_threshold:
                subjects = [o.record["subject"] for o in outcomes if (layer, head) in o.extras["extracting_heads"]]
                hubs.append({"layer": layer, "head": head, "extraction_rate": count / n,
                             "example_mappings": self._hub_examples(layer, head, subjects[:3])})

        return {
            "extraction_events": len(events),
            "explained_events": len(explained),
            "explained_share": len(explained) / len(events) if events else None,
            "distinct_mapping_heads": len(frequency),
            "head_frequency": [
                {"layer": layer, "head": head, "count": count}
                for (layer, head), count in sorted(frequency.items(), key=lambda kv: (-kv[1], kv[0]))
            ],
            "knowledge_hubs": hubs,
        }

    def _hub_examples(self, layer: int, head: int, subjects: Sequence[str]) -> List[dict]:
        """Top OV mappings of a hub head for the last token of a few subjects it extracts for"""
        examples = []
        for subject in subjects:
            ids = self.tokenizer.encode(" " + subject) or self.tokenizer.encode(subject)
            if not ids:
                continue
            row = self.lens.head_mapping(layer, head, ids[-1], self.head_top_k)
            examples.append({
                "subject": subject,
                "source_token": self.tokenizer.token_string(ids[-1]),
                "top_tokens": [self.tokenizer.token_string(t) for t in row.token_ids],
            })
        return examples

    # ─── Saliency ──────────────────────────────────────────────────────────

    async def saliency(self, queries: Sequence[FactualQuery]) -> List[QueryOutcome]:
        def work(query):
            tokens = query.tokens
            target = query.attribute_token if self.config.saliency_target == "predicted" \
                else self.attribute_target(query)
            trace = self.engine.forward(tokens, gauges=LIGHT_GAUGES)

            observations = []
            skipped = 0
            for layer in range(0, self.model_config.n_layers + 1):
                try:
                    saliency = gradient_times_activation(self.engine, trace, target, layer)
                except DegenerateSaliencyError as e:
                    logger.warning(f"Query {query.query_id}: {e}; layer skipped")
                    skipped += 1
                    continue
                for role, score in saliency_by_role(saliency, tokens).items():
                    observations.append({"query_id": query.query_id, "series": "saliency",
                                         "layer": layer, "condition": role, "value": score})
                for row in saliency.as_rows():
                    observations.append({"query_id": query.query_id, "series": "saliency_heatmap",
                                         "layer": row["layer"], "position": row["position"],
                                         "value": row["score"]})
            record = {**self.query_record(query), "saliency_target": target}
            return QueryOutcome(record, observations, {"skipped_layers": skipped})
        return await self.map_queries(work, queries, SALIENCY)

    # ─── MLP sub-updates ───────────────────────────────────────────────────

    def subupdate_layers(self) -> List[int]:
        top = self.model_config.n_layers
        if self.config.subupdate_max_layer is not None:
            top = min(top, self.config.subupdate_max_layer)
        return list(range(1, top + 1))

    async def mlp_subupdates(self, queries: Sequence[FactualQuery]) -> List[QueryOutcome]:
        """Dominant W_F sub-updates of the MLP output at the last subject position"""
        layers = self.subupdate_layers()

        def work(query):
            tokens = query.tokens
            position = tokens.last_subject_position
            target = query.attribute_token
            subject_ids = {tokens.token_ids[p] for p in tokens.subject_positions}
            trace = self.engine.forward(tokens, gauges=SUBUPDATE_GAUGES)

            observations = []
            dominant = []
            for layer in layers:
                subupdates = self.lens.mlp_subupdate_decomposition(
                    trace, layer, position, self.config.subupdate_top_m, self.head_top_k)
                promotes_attribute = [target in s.token_ids for s in subupdates]
                promotes_subject = [bool(subject_ids.intersection(s.token_ids)) for s in subupdates]
                for condition, hits in (("attribute", promotes_attribute), ("subject", promotes_subject)):
                    observations.append({"query_id": query.query_id, "series": "mlp_subupdates",
                                         "layer": layer, "condition": condition,
                                         "value": float(np.mean(hits))})
                for s in subupdates:
                    observations.append({"query_id": query.query_id, "series": "mlp_subupdate_dims",
                                         "layer": layer, "dimension": s.index, "value": s.contribution})

                top = subupdates[0]
                projection = VocabProjection(layer, position, top.top_tokens)
                dominant.append({**self.lens.projection_record(projection, kind="mlp_subupdate"),
                                 "dimension": top.index, "coefficient": top.coefficient})

            subject_lens = [self.lens.projection_record(p) for p in
                            self.lens.layer_projections(trace, position, self.head_top_k) if p.layer in layers]
            record = {**self.query_record(query), "dominant_subupdates": dominant, "subject_lens": subject_lens}
            return QueryOutcome(record, observations)
        return await self.map_queries(work, queries, SUBUPDATES)

    def _aggregate_subupdates(self, report: ExperimentReport, outcomes: List[QueryOutcome]) -> dict:
        by_condition: Dict[str, List[Optional[float]]] = {}
        for obs in report.series("mlp_subupdates"):
            by_condition.setdefault(obs["condition"], []).append(obs["value"])

        # Dimension found in the most queries' top-m per layer, lowest index on ties
        frame = plot_frame(report, "mlp_subupdate_dims")
        recurring = []
        for layer, rows in frame.groupby("layer", sort=True):
            best = rows.sort_values(["count", "dimension"], ascending=[False, True], kind="mergesort").iloc[0]
            projection = self.lens.value_vector_projection(int(layer), int(best["dimension"]), self.head_top_k)
            recurring.append({
                "layer": int(layer),
                "dimension": int(best["dimension"]),
                "query_share": int(best["count"]) / len(outcomes),
                "mean_contribution": float(best["mean"]),
                "top_tokens": [self.lens.token_string(t) for t in projection.token_ids],
            })

        return {
            "layers": self.subupdate_layers(),
            "top_m": self.config.subupdate_top_m,
            "promotion_rate": {name: mean_ignoring_missing(values) for name, values in sorted(by_condition.items())},
            "recurring_dimensions": recurring,
        }


def run_experiment(kind: str, config: ExperimentConfig, quiet: bool = False) -> Tuple[ExperimentReport, List[Path]]:
    """Load the inputs named by config, run one kind and write report.json plus its plot CSVs"""
    runner = ExperimentRunner.from_config(config, quiet=quiet)
    report = runner.run(kind)
    write_report(report, runner.config.out_dir)
    return report, emit_plot_data(report, runner.config.out_dir)
