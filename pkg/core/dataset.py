"""
Factual Query Dataset
JSONL ingestion of (query, subject, attribute) records and the correctness filter
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

from tokenizer import TokenizedQuery, Tokenizer, tokenize_query

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ("query", "subject", "attribute")


class DatasetValidationError(ValueError):
    def __init__(self, message: str, line_no: Optional[int] = None, field_name: Optional[str] = None):
        self.line_no = line_no
        self.field_name = field_name
        location = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{location}{message}")


@dataclass(frozen=True)
class QueryRecord:
    query: str
    subject: str
    attribute: str
    relation_id: Optional[str] = None
    line_no: Optional[int] = None


@dataclass(frozen=True)
class FactualQuery:
    """A dataset record with its tokenization and the model's predicted attribute token"""
    query_id: int
    record: QueryRecord
    tokens: TokenizedQuery
    base_probability: float = 0.0

    @property
    def attribute_token(self) -> int:
        return self.tokens.attribute_token


def parse_record(raw: dict, line_no: Optional[int] = None) -> QueryRecord:
    if not isinstance(raw, dict):
        raise DatasetValidationError("record is not a JSON object", line_no)
    for name in REQUIRED_FIELDS:
        if name not in raw:
            raise DatasetValidationError(f"missing field '{name}'", line_no, name)
        if not isinstance(raw[name], str) or not raw[name].strip():
            raise DatasetValidationError(f"field '{name}' must be a non-empty string", line_no, name)
    if raw["subject"] not in raw["query"]:
        raise DatasetValidationError(
            f"subject '{raw['subject']}' is not a substring of query '{raw['query']}'", line_no, "subject"
        )
    relation = raw.get("relation_id")
    return QueryRecord(
        query=raw["query"],
        subject=raw["subject"],
        attribute=raw["attribute"],
        relation_id=None if relation is None else str(relation),
        line_no=line_no,
    )


def load_dataset(path: Union[str, Path], permissive: bool = False) -> List[QueryRecord]:
    """
    Parse a JSONL dataset. Malformed lines raise DatasetValidationError, or are
    logged with their line number and skipped when permissive.
    """
    records = []
    skipped = 0
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                try:
                    raw = json.loads(line)
                except ValueError as e:
                    raise DatasetValidationError(f"invalid JSON: {e}", line_no) from e
                records.append(parse_record(raw, line_no))
            except DatasetValidationError as e:
                if not permissive:
                    raise
                skipped += 1
                logger.warning(f"{path}: skipping {e}")

    if not records:
        logger.warning(f"Dataset {path} contains no usable records")
    else:
        logger.info(f"Loaded {len(records)} queries from {path}" + (f" ({skipped} skipped)" if skipped else ""))
    return records


def prediction_matches(predicted: str, attribute: str) -> bool:
    """The predicted token, leading spaces removed, is a non-empty prefix of the attribute"""
    stripped = predicted.lstrip()
    return bool(stripped) and attribute.startswith(stripped)


def filter_correct(records: List[QueryRecord], engine, tokenizer: Tokenizer) -> List[FactualQuery]:
    """Keep queries whose greedy next token string-prefixes the expected attribute"""
    survivors = []
    for record in records:
        try:
            tokens = tokenize_query(record.query, record.subject, tokenizer)
        except ValueError as e:
            logger.warning(f"Dropping query '{record.query}': {e}")
            continue
        predicted, probability = engine.predict_token(tokens)
        if prediction_matches(tokenizer.token_string(predicted), record.attribute):
            survivors.append(FactualQuery(
                query_id=len(survivors),
                record=record,
                tokens=tokens.with_attribute(predicted),
                base_probability=probability,
            ))

    if not survivors:
        logger.warning("No query survived the correctness filter")
    else:
        logger.info(f"{len(survivors)}/{len(records)} queries predicted correctly")
    return survivors
