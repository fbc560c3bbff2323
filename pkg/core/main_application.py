#!/usr/bin/env python3
"""
Factual Recall Tracer
Command-line entry point: runs attention-knockout, vocabulary-projection,
patching and attribution experiments on a local decoder-only model
"""

import sys
import logging
import argparse
from typing import Optional

import numpy as np
import yaml

from config_manager import ConfigManager, MODEL_PRESETS
from dataset import load_dataset
from experiment_runner import EXPERIMENT_KINDS, ExperimentError, report_dir, run_experiment
from model_config import WeightFileError, load_weights
from model_engine import FULL_GAUGES, TransformerEngine, check_trace_invariants
from recall_metrics import print_summary
from tokenizer import load_tokenizer, tokenize_query

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3

# Flag destination -> ExperimentConfig field
OVERRIDE_FIELDS = {
    "weights": "weights",
    "tokenizer": "tokenizer_vocab",
    "merges": "tokenizer_merges",
    "dataset": "dataset",
    "corpus": "corpus",
    "stopwords": "stopwords",
    "candidate_cache": "candidate_cache",
    "out": "out_dir",
    "window_k": "window_k",
    "top_k": "top_k",
    "seed": "seed",
    "workers": "workers",
    "max_queries": "max_queries",
    "preset": "preset",
}


# Setup logging
def setup_logging(log_level: str = "INFO", log_file: str = None):
    """Configure logging for the application"""

    format_str = '%(asctime)s.%(msecs)03d - %(name)s - %(levelname)s - %(message)s'
    date_format = '%Y-%m-%d %H:%M:%S'

    handlers = [logging.StreamHandler()]

    if log_file:
        file_handler = logging.FileHandler(log_file)
        handlers.append(file_handler)

    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format=format_str,
        datefmt=date_format,
        handlers=handlers,
        force=True,
    )

    logging.getLogger('asyncio').setLevel(logging.WARNING)

    return logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='YAML or JSON experiment configuration')
    common.add_argument('--weights', type=str, help='Weight container file')
    common.add_argument('--tokenizer', type=str, help='Tokenizer vocabulary JSON')
    common.add_argument('--merges', type=str, help='BPE merges file (omit for a whitespace tokenizer)')
    common.add_argument('--dataset', type=str, help='Query dataset (JSONL)')
    common.add_argument('--corpus', type=str, help='Paragraph corpus (JSONL)')
    common.add_argument('--stopwords', type=str, help='Stopword list (one word per line)')
    common.add_argument('--candidate-cache', type=str, help='JSON cache of candidate attribute sets')
    common.add_argument('--out', type=str, help='Output directory')
    common.add_argument('--window-k', type=int, help='Attention knockout window size (odd)')
    common.add_argument('--top-k', type=int, help='Tokens kept per vocabulary projection')
    common.add_argument('--seed', type=int, help='Seed for query subsampling')
    common.add_argument('--workers', type=int, help='Queries processed concurrently')
    common.add_argument('--max-queries', type=int, help='Cap on the number of filtered queries')
    common.add_argument('--preset', type=str, choices=sorted(MODEL_PRESETS),
                        help='Checkpoint preset (window size, reference layer)')
    common.add_argument('--log-level', type=str, default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Logging level')
    common.add_argument('--log-file', type=str, help='Log file path')
    common.add_argument('--quiet', action='store_true', help='No progress bars or console summary')

    parser = argparse.ArgumentParser(
        description="Trace how a decoder-only language model recalls factual attributes",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Check a weight file and dataset before a long run
  python main_application.py validate --weights gpt2.rpwt --tokenizer vocab.json --merges merges.txt --dataset queries.jsonl

  # Information flow to the last position, 9-layer windows
  python main_application.py info-flow --config ../configs/example_experiment.yaml --window-k 9

  # Attributes rate needs a paragraph corpus
  python main_application.py attr-rate --config ../configs/example_experiment.yaml --corpus paragraphs.jsonl

  # Write a default configuration file
  python main_application.py init-config experiment.yaml
        """,
    )
    subparsers = parser.add_subparsers(dest='command', required=True)
    for kind in EXPERIMENT_KINDS:
        subparsers.add_parser(kind, parents=[common], help=f'Run the {kind} experiment')
    subparsers.add_parser('validate', parents=[common], help='Load all inputs and run engine self-checks')
    init = subparsers.add_parser('init-config', help='Write a default configuration file')
    init.add_argument('path', type=str, help='Destination YAML file')
    return parser


def collect_overrides(args: argparse.Namespace) -> dict:
    return {field: getattr(args, dest, None) for dest, field in OVERRIDE_FIELDS.items()}


def run_validation(config, logger: logging.Logger) -> int:
    """Load inputs strictly and self-check the engine on the first query"""
    for name in ("weights", "tokenizer_vocab", "dataset"):
        if not getattr(config, name):
            raise ExperimentError(f"validate needs '{name}'")

    model_config, weights = load_weights(config.weights)
    logger.info(f"Weights OK: L={model_config.n_layers}, H={model_config.n_heads}, "
                f"d={model_config.d_model}, |V|={model_config.vocab_size}, layout={model_config.layout.value}")
    tokenizer = load_tokenizer(config.tokenizer_vocab, config.tokenizer_merges)
    records = load_dataset(config.dataset, permissive=False)
    engine = TransformerEngine(model_config, weights)

    if records:
        query = tokenize_query(records[0].query, records[0].subject, tokenizer)
        token_ids = query.token_ids
    else:
        token_ids = tuple(i % model_config.vocab_size for i in range(min(4, model_config.max_positions)))

    trace = engine.forward(token_ids, gauges=FULL_GAUGES)
    passed, reason = check_trace_invariants(trace, engine)
    if not passed:
        logger.error(f"Engine self-check failed: {reason}")
        return EXIT_VALIDATION

    again = engine.forward(token_ids, gauges=FULL_GAUGES)
    if not (np.array_equal(trace.hidden_states, again.hidden_states)
            and np.array_equal(trace.final_logits, again.final_logits)):
        logger.error("Engine self-check failed: repeated forward passes differ")
        return EXIT_VALIDATION

    logger.info(f"Engine self-checks passed on {len(token_ids)} tokens; {len(records)} dataset records valid")
    return EXIT_OK


def main(argv: Optional[list] = None) -> int:
    """Main entry point"""

    parser = build_parser()
    args = parser.parse_args(argv)

    logger = setup_logging(getattr(args, 'log_level', 'INFO'), getattr(args, 'log_file', None))

    try:
        if args.command == 'init-config':
            ConfigManager().create_default_config(args.path)
            return EXIT_OK

        config = ConfigManager(args.config).load(collect_overrides(args))

        if args.command == 'validate':
            return run_validation(config, logger)

        report, csv_paths = run_experiment(args.command, config, quiet=args.quiet)
        if not args.quiet:
            print_summary(args.command, report.aggregates)
        logger.info(f"{args.command} complete: {report_dir(config.out_dir, args.command)} "
                    f"({len(csv_paths)} plot files)")
        return EXIT_OK

    except (ExperimentError, WeightFileError, ValueError, yaml.YAMLError) as e:
        logger.error(f"Validation failed: {e}")
        logger.debug("Failure details", exc_info=True)
        return EXIT_VALIDATION
    except OSError as e:
        logger.error(f"I/O error: {e}")
        logger.debug("Failure details", exc_info=True)
        return EXIT_IO
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
