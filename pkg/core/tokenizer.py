"""
Tokenizers and Query Tokenization
Byte-level BPE (vocabulary JSON + merges file), a whitespace tokenizer for
synthetic models, and subject/relation span resolution for factual queries.
"""

import json
import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import regex as re

logger = logging.getLogger(__name__)

# GPT-2 pre-tokenization: contractions, letter runs, digit runs, punctuation, whitespace
PRETOKEN_PATTERN = re.compile(r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+""")

UNK_TOKEN = "<unk>"

Span = Tuple[int, int]


class SubjectNotFoundError(ValueError):
    """Subject string does not occur in the query text"""


@lru_cache()
def bytes_to_unicode() -> Dict[int, str]:
    """Reversible byte -> printable character table used by byte-level BPE vocabularies"""
    printable = (list(range(ord("!"), ord("~") + 1))
                 + list(range(ord("¡"), ord("¬") + 1))
                 + list(range(ord("®"), ord("ÿ") + 1)))
    chars = printable[:]
    extra = 0
    for b in range(256):
        if b not in printable:
            printable.append(b)
            chars.append(256 + extra)
            extra += 1
    return dict(zip(printable, map(chr, chars)))


class BPETokenizer:
    """Byte-level BPE with rank-ordered merges"""

    def __init__(self, encoder: Dict[str, int], merges: Sequence[Tuple[str, str]]):
        self.encoder = dict(encoder)
        self.decoder = {idx: tok for tok, idx in self.encoder.items()}
        self.bpe_ranks = {pair: rank for rank, pair in enumerate(merges)}
        self.byte_encoder = bytes_to_unicode()
        self.byte_decoder = {c: b for b, c in self.byte_encoder.items()}
        self._cache: Dict[str, Tuple[str, ...]] = {}

    @classmethod
    def from_files(cls, vocab_path: Union[str, Path], merges_path: Union[str, Path]) -> "BPETokenizer":
        with open(vocab_path, "r", encoding="utf-8") as f:
            encoder = json.load(f)
        merges = []
        with open(merges_path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line or line.startswith("#version"):
                    continue
                left, right = line.split(" ")
                merges.append((left, right))
        logger.info(f"Loaded BPE tokenizer: {len(encoder)} tokens, {len(merges)} merges")
        return cls(encoder, merges)

    @property
    def vocab_size(self) -> int:
        return len(self.encoder)

    def _bpe(self, piece: str) -> Tuple[str, ...]:
        if piece in self._cache:
            return self._cache[piece]

        word = tuple(piece)
        while len(word) > 1:
            pairs = set(zip(word, word[1:]))
            best = min(pairs, key=lambda pair: self.bpe_ranks.get(pair, float("inf")))
            if best not in self.bpe_ranks:
                break
            merged = []
            i = 0
            while i < len(word):
                if i < len(word) - 1 and (word[i], word[i + 1]) == best:
                    merged.append(word[i] + word[i + 1])
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = tuple(merged)

        self._cache[piece] = word
        return word

    def encode_with_offsets(self, text: str) -> Tuple[List[int], List[Span]]:
        """Token ids plus the [start, end) character span of each token in `text`"""
        ids: List[int] = []
        spans: List[Span] = []
        for match in PRETOKEN_PATTERN.finditer(text):
            chunk = match.group(0)
            # byte index -> character offset within text
            byte_chars: List[int] = []
            for offset, ch in enumerate(chunk, start=match.start()):
                byte_chars.extend([offset] * len(ch.encode("utf-8")))

            mapped = "".join(self.byte_encoder[b] for b in chunk.encode("utf-8"))
            cursor = 0
            for token in self._bpe(mapped):
                if token not in self.encoder:
                    raise ValueError(f"BPE piece {token!r} missing from vocabulary")
                ids.append(self.encoder[token])
                first, last = cursor, cursor + len(token) - 1
                spans.append((byte_chars[first], byte_chars[last] + 1))
                cursor += len(token)
        return ids, spans

    def encode(self, text: str) -> List[int]:
        return self.encode_with_offsets(text)[0]

    def decode(self, ids: Sequence[int]) -> str:
        text = "".join(self.decoder[int(i)] for i in ids)
        return bytearray(self.byte_decoder[c] for c in text).decode("utf-8", errors="replace")

    def token_string(self, token_id: int) -> str:
        return self.decode([token_id])


class WhitespaceTokenizer:
    """One token per whitespace-separated word; id 0 is reserved for unknown words"""

    unk_id = 0

    def __init__(self, words: Sequence[str]):
        vocab = [UNK_TOKEN] + [w for w in dict.fromkeys(words) if w != UNK_TOKEN]
        self.encoder = {w: i for i, w in enumerate(vocab)}
        self.decoder = dict(enumerate(vocab))

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "WhitespaceTokenizer":
        words = []
        for text in texts:
            words.extend(text.split())
        return cls(sorted(set(words)))

    @classmethod
    def from_file(cls, vocab_path: Union[str, Path]) -> "WhitespaceTokenizer":
        """Vocabulary JSON (token -> id, ids contiguous from 0) or a plain word list"""
        with open(vocab_path, "r", encoding="utf-8") as f:
            data = json.load(f)
        if isinstance(data, dict):
            words = [w for w, _ in sorted(data.items(), key=lambda kv: kv[1])]
            if words and words[0] == UNK_TOKEN:
                words = words[1:]
        else:
            words = list(data)
        tokenizer = cls(words)
        logger.info(f"Loaded whitespace tokenizer: {tokenizer.vocab_size} tokens")
        return tokenizer

    def save(self, vocab_path: Union[str, Path]):
        with open(vocab_path, "w", encoding="utf-8") as f:
            json.dump(self.encoder, f, indent=2, ensure_ascii=False)

    @property
    def vocab_size(self) -> int:
        return len(self.encoder)

    def encode_with_offsets(self, text: str) -> Tuple[List[int], List[Span]]:
        ids, spans = [], []
        for match in re.finditer(r"\S+", text):
            ids.append(self.encoder.get(match.group(0), 0))
            spans.append((match.start(), match.end()))
        return ids, spans

    def encode(self, text: str) -> List[int]:
        return self.encode_with_offsets(text)[0]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.decoder[int(i)] for i in ids)

    def token_string(self, token_id: int) -> str:
        return self.decoder[int(token_id)]


Tokenizer = Union[BPETokenizer, WhitespaceTokenizer]


def load_tokenizer(vocab_path: Union[str, Path], merges_path: Optional[Union[str, Path]] = None) -> Tokenizer:
    """BPE when a merges file is given, whitespace otherwise"""
    if merges_path:
        return BPETokenizer.from_files(vocab_path, merges_path)
    return WhitespaceTokenizer.from_file(vocab_path)


# ─── Queries ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TokenizedQuery:
    """Token ids with the subject span S and relation positions R (0-based; last position in neither)"""
    token_ids: Tuple[int, ...]
    subject_positions: Tuple[int, ...]
    relation_positions: Tuple[int, ...]
    raw_text: str
    subject_text: str
    attribute_token: Optional[int] = None
    span_widened: bool = False

    @property
    def n_tokens(self) -> int:
        return len(self.token_ids)

    @property
    def last_position(self) -> int:
        return len(self.token_ids) - 1

    @property
    def last_subject_position(self) -> int:
        return self.subject_positions[-1]

    def with_attribute(self, token_id: int) -> "TokenizedQuery":
        return replace(self, attribute_token=int(token_id))


def _content_start(text: str, span: Span) -> int:
    """Offset of the first non-space character of a token"""
    piece = text[span[0]:span[1]]
    return span[0] + (len(piece) - len(piece.lstrip()))


def tokenize_query(text: str, subject: str, tokenizer: Tokenizer) -> TokenizedQuery:
    """
    Resolve the subject span of a query.

    S covers every token whose character span intersects the first occurrence
    of `subject`; R is every other position except the last.
    """
    if not subject:
        raise ValueError("Subject must be a non-empty string")
    start = text.find(subject)
    if start < 0:
        raise SubjectNotFoundError(f"Subject '{subject}' not found in '{text}'")
    end = start + len(subject)

    ids, spans = tokenizer.encode_with_offsets(text)
    if not ids:
        raise ValueError(f"Query '{text}' produced no tokens")
    subject_positions = [i for i, (s, e) in enumerate(spans) if s < end and e > start]
    if not subject_positions:
        raise SubjectNotFoundError(f"Subject '{subject}' maps to no token in '{text}'")

    last = len(ids) - 1
    if subject_positions[-1] == last:
        raise ValueError(f"Subject '{subject}' covers the last token of '{text}'; nothing left to predict from")

    widened = (_content_start(text, spans[subject_positions[0]]) != start
               or spans[subject_positions[-1]][1] != end)
    if widened:
        covered = text[spans[subject_positions[0]][0]:spans[subject_positions[-1]][1]]
        logger.warning(f"Subject '{subject}' is not token-aligned in '{text}'; widened to '{covered.strip()}'")

    subject_set = set(subject_positions)
    relation_positions = [i for i in range(last) if i not in subject_set]
    return TokenizedQuery(
        token_ids=tuple(ids),
        subject_positions=tuple(subject_positions),
        relation_positions=tuple(relation_positions),
        raw_text=text,
        subject_text=subject,
        span_widened=widened,
    )
