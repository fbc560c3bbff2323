"""
Local Paragraph Corpus
JSONL paragraph ingestion, an inverted index with BM25 ranking, and candidate
attribute sets built from paragraphs that mention a subject.
"""

import json
import logging
import math
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple, Union

from tqdm import tqdm

from model_config import atomic_write_text, file_sha256

logger = logging.getLogger(__name__)

BM25_K1 = 1.5
BM25_B = 0.75
DEFAULT_TOP_N = 100
MIN_TOKEN_CHARS = 3
BPE_SPACE_MARKER = "Ġ"

DEFAULT_STOPWORDS_PATH = Path(__file__).resolve().parent.parent / "data" / "stopwords_en.txt"


class EmptyQueryError(ValueError):
    """Retrieval query has no terms"""


def retrieval_terms(text: str) -> List[str]:
    """Whitespace split, lowercase, strip surrounding punctuation"""
    terms = (word.strip(string.punctuation) for word in text.lower().split())
    return [t for t in terms if t]


@dataclass
class Document:
    doc_id: str
    title: str = ""
    section_title: str = ""
    text: str = ""


class Corpus:
    """Documents plus an inverted index (term -> [(doc index, term frequency)])"""

    def __init__(self, documents: Iterable[Document] = (), k1: float = BM25_K1, b: float = BM25_B):
        self.k1 = k1
        self.b = b
        self.documents: List[Document] = []
        self.postings: Dict[str, List[Tuple[int, int]]] = {}
        self.doc_lengths: List[int] = []
        self.avg_doc_length = 0.0
        self.add_documents(documents)

    @classmethod
    def from_jsonl(cls, path: Union[str, Path], permissive: bool = False) -> "Corpus":
        documents = []
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    documents.append(Document(
                        doc_id=str(record["doc_id"]),
                        title=record.get("title", "") or "",
                        section_title=record.get("section_title", "") or "",
                        text=record["text"],
                    ))
                except (ValueError, KeyError, TypeError) as e:
                    if not permissive:
                        raise ValueError(f"{path}:{line_no}: malformed corpus record: {e}") from e
                    logger.warning(f"{path}:{line_no}: skipping malformed corpus record: {e}")
        corpus = cls(documents)
        logger.info(f"Loaded corpus from {path}: {len(corpus)} documents, {len(corpus.postings)} terms")
        return corpus

    def __len__(self) -> int:
        return len(self.documents)

    def add_documents(self, documents: Iterable[Document]):
        self.documents.extend(documents)
        self.rebuild_index()

    def rebuild_index(self):
        """Recompute postings and lengths from the documents; idempotent"""
        postings: Dict[str, List[Tuple[int, int]]] = {}
        lengths = []
        for idx, doc in enumerate(tqdm(self.documents, desc="Indexing", disable=len(self.documents) < 1000)):
            terms = retrieval_terms(doc.text)
            lengths.append(len(terms))
            for term, tf in sorted(Counter(terms).items()):
                postings.setdefault(term, []).append((idx, tf))
        self.postings = postings
        self.doc_lengths = lengths
        self.avg_doc_length = sum(lengths) / len(lengths) if lengths else 0.0

    def idf(self, term: str) -> float:
        n = len(self.postings.get(term, ()))
        return math.log(1 + (len(self.documents) - n + 0.5) / (n + 0.5))

    def bm25_rank(self, query_terms: List[str], top_n: int = DEFAULT_TOP_N) -> List[Tuple[str, float]]:
        """(doc_id, score) by descending score then doc_id; zero-overlap documents never appear"""
        terms = [t for term in query_terms for t in retrieval_terms(term)]
        if not terms:
            raise EmptyQueryError("BM25 query has no terms")

        scores: Dict[int, float] = {}
        for term in terms:
            postings = self.postings.get(term)
            if not postings:
                continue
            idf = self.idf(term)
            for idx, tf in postings:
                norm = self.k1 * (1 - self.b + self.b * self.doc_lengths[idx] / self.avg_doc_length)
                scores[idx] = scores.get(idx, 0.0) + idf * tf * (self.k1 + 1) / (tf + norm)

        ranked = sorted(((self.documents[idx].doc_id, score) for idx, score in scores.items()),
                        key=lambda item: (-item[1], item[0]))
        return ranked[:top_n]

    def search(self, text: str, top_n: int = DEFAULT_TOP_N) -> List[Document]:
        by_id = {doc.doc_id: doc for doc in self.documents}
        return [by_id[doc_id] for doc_id, _ in self.bm25_rank(retrieval_terms(text), top_n)]


# ─── Candidate attribute sets ────────────────────────────────────────────────

def load_stopwords(path: Optional[Union[str, Path]] = None) -> Set[str]:
    """One word per line, '#' starts a comment"""
    path = Path(path) if path else DEFAULT_STOPWORDS_PATH
    words = set()
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            word = line.split("#", 1)[0].strip().lower()
            if word:
                words.add(word)
    logger.debug(f"Loaded {len(words)} stopwords from {path}")
    return words


@dataclass
class CandidateAttributeSet:
    subject: str
    tokens: FrozenSet[int]
    retained_paragraphs: int

    def __contains__(self, token_id: int) -> bool:
        return token_id in self.tokens

    def __len__(self) -> int:
        return len(self.tokens)

    def is_empty(self) -> bool:
        return not self.tokens

    def to_dict(self) -> dict:
        return {"subject": self.subject, "tokens": sorted(self.tokens),
                "retained_paragraphs": self.retained_paragraphs}

    @classmethod
    def from_dict(cls, data: dict) -> "CandidateAttributeSet":
        return cls(data["subject"], frozenset(int(t) for t in data["tokens"]), int(data["retained_paragraphs"]))


def mentions_subject(doc: Document, subject: str) -> bool:
    return subject in doc.text or subject in doc.title or subject in doc.section_title


def keep_candidate_token(token_string: str, stopwords: Set[str]) -> bool:
    """Length (excluding spaces and the BPE space marker) ≥ 3 and not a stopword"""
    stripped = token_string.replace(BPE_SPACE_MARKER, "").replace(" ", "").strip()
    return len(stripped) >= MIN_TOKEN_CHARS and stripped.lower() not in stopwords


def build_candidate_set(subject: str, corpus: Corpus, tokenizer, stopwords: Set[str],
                        top_n: int = DEFAULT_TOP_N) -> CandidateAttributeSet:
    """Tokens of retrieved paragraphs that mention the subject verbatim"""
    try:
        retrieved = corpus.search(subject, top_n)
    except EmptyQueryError:
        retrieved = []
    retained = [doc for doc in retrieved if mentions_subject(doc, subject)]
    if not retained:
        logger.warning(f"No retrieved paragraph mentions '{subject}'; attributes rate will be missing")
        return CandidateAttributeSet(subject, frozenset(), 0)

    unk_id = getattr(tokenizer, "unk_id", None)
    tokens = set()
    for doc in retained:
        for token_id in dict.fromkeys(tokenizer.encode(doc.text)):
            if token_id in tokens or token_id == unk_id:
                continue
            if keep_candidate_token(tokenizer.token_string(token_id), stopwords):
                tokens.add(token_id)
    logger.debug(f"Candidate set for '{subject}': {len(tokens)} tokens from {len(retained)} paragraphs")
    return CandidateAttributeSet(subject, frozenset(tokens), len(retained))


def input_fingerprint(**paths: Optional[Union[str, Path]]) -> Dict[str, Optional[str]]:
    """SHA-256 of every input file a candidate set depends on; None for an absent input"""
    return {name: file_sha256(path) if path else None for name, path in sorted(paths.items())}


class CandidateCache:
    """
    Candidate sets persisted as JSON keyed by subject. The file also records
    top_n and the input fingerprint; a cache built from other inputs is ignored.
    """

    def __init__(self, path: Union[str, Path], top_n: int = DEFAULT_TOP_N,
                 fingerprint: Optional[Dict[str, Optional[str]]] = None):
        self.path = Path(path)
        self.top_n = top_n
        self.fingerprint = dict(fingerprint or {})
        self.sets: Dict[str, CandidateAttributeSet] = {}
        if self.path.exists():
            data = json.loads(self.path.read_text(encoding="utf-8"))
            cached_inputs = data.get("inputs", {})
            changed = sorted(name for name in set(cached_inputs) | set(self.fingerprint)
                             if cached_inputs.get(name) != self.fingerprint.get(name))
            if data.get("top_n") != top_n:
                logger.info(f"Ignoring candidate cache {self.path}: built with top_n={data.get('top_n')}")
            elif changed:
                logger.warning(f"Ignoring stale candidate cache {self.path}: {', '.join(changed)} changed")
            else:
                self.sets = {s: CandidateAttributeSet.from_dict(v) for s, v in data.get("sets", {}).items()}

    def get_or_build(self, subject: str, corpus: Corpus, tokenizer, stopwords: Set[str]) -> CandidateAttributeSet:
        if subject not in self.sets:
            self.sets[subject] = build_candidate_set(subject, corpus, tokenizer, stopwords, self.top_n)
        return self.sets[subject]

    def save(self):
        payload = {
            "top_n": self.top_n,
            "inputs": self.fingerprint,
            "sets": {s: self.sets[s].to_dict() for s in sorted(self.sets)},
        }
        atomic_write_text(self.path, json.dumps(payload, sort_keys=True, indent=1))
