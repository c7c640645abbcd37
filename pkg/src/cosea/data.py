"""Corpus ingestion: tokenizers, vocabularies, fixed-length encoding, splits."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigurationError, EmptySequenceError, ParseError, SkipRecord

log = logging.getLogger(__name__)

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
MAX_QUERY_LEN = 20
MAX_CODE_LEN = 200
DEFAULT_MIN_COUNT = 2


@dataclass(frozen=True)
class RawPair:
    id: int
    query: str
    code: str
    language: str = ""


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------

_QUERY_WORD = re.compile(r"[^\W_]+")
_CODE_PIECE = re.compile(r"[^\W_]+|[^\w\s]|_")
_CAMEL_PART = re.compile(r"[A-Z]+(?![a-z])|[A-Z]?[a-z]+|\d+|[^\W\d_A-Za-z]+")


def tokenize_query(text: str) -> list[str]:
    """Lowercased words; punctuation and underscores act as separators and are dropped."""
    tokens = _QUERY_WORD.findall(text.lower())
    if not tokens:
        raise EmptySequenceError(f"query tokenizes to nothing: {text!r}")
    return tokens


def _split_identifier(word: str) -> list[str]:
    parts = _CAMEL_PART.findall(word)
    return [p.lower() for p in parts] if parts else [word.lower()]


def tokenize_code(text: str) -> list[str]:
    """Split code into identifier pieces and single punctuation characters.

    ``snake_case`` and ``camelCase`` identifiers are broken into lowercase
    pieces; underscores are dropped, every other operator or punctuation
    character becomes its own token.

    >>> tokenize_code("Content.objects.all()")
    ['content', '.', 'objects', '.', 'all', '(', ')']
    """
    tokens = []
    for piece in _CODE_PIECE.findall(text):
        if piece == "_":
            continue
        if piece[0].isalnum():
            tokens.extend(_split_identifier(piece))
        else:
            tokens.append(piece)
    if not tokens:
        raise EmptySequenceError(f"code tokenizes to nothing: {text[:40]!r}")
    return tokens


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


class TokenVocabulary:
    """Token/id map with PAD=0 and UNK=1 reserved."""

    def __init__(self, tokens: Iterable[str] = (), min_count: int = DEFAULT_MIN_COUNT):
        self.min_count = min_count
        self.itos: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.stoi: dict[str, int] = {}
        for tok in tokens:
            if tok in self.stoi or tok in (PAD_TOKEN, UNK_TOKEN):
                raise ConfigurationError(f"duplicate or reserved token {tok!r} in vocabulary")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, TokenVocabulary) and self.itos == other.itos

    def __contains__(self, token):
        return token in self.stoi

    @property
    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self.itos[2:]

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids if i != PAD]

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TokenVocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(token_lists: Iterable[Iterable[str]], min_count: int = DEFAULT_MIN_COUNT) -> TokenVocabulary:
    """Keep tokens seen at least ``min_count`` times, most frequent first, ties lexicographic."""
    if min_count < 1:
        raise ConfigurationError(f"min_count must be >= 1, got {min_count}")
    counts = Counter()
    for tokens in token_lists:
        counts.update(tokens)
    if not counts:
        raise ConfigurationError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return TokenVocabulary(kept, min_count=min_count)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


@dataclass
class EncodedPair:
    id: int
    query_ids: np.ndarray
    query_mask: np.ndarray
    code_ids: np.ndarray
    code_mask: np.ndarray

    @property
    def query_len(self) -> int:
        return int(self.query_mask.sum())

    @property
    def code_len(self) -> int:
        return int(self.code_mask.sum())


def pad_ids(ids: list[int], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    ids = ids[:max_len]
    out = np.full(max_len, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(ids)] = True
    return out, mask


def encode_code_text(code: str, vocab: TokenVocabulary, max_len: int = MAX_CODE_LEN):
    return pad_ids(vocab.encode(tokenize_code(code)), max_len)


def encode_query_text(query: str, vocab: TokenVocabulary, max_len: int = MAX_QUERY_LEN):
    return pad_ids(vocab.encode(tokenize_query(query)), max_len)


def encode_pair(
    pair: RawPair,
    code_vocab: TokenVocabulary,
    query_vocab: TokenVocabulary,
    max_query_len: int = MAX_QUERY_LEN,
    max_code_len: int = MAX_CODE_LEN,
) -> EncodedPair:
    """Tokenize, map to ids, keep the prefix up to the max length and pad.

    Raises :class:`SkipRecord` when either side tokenizes to nothing.
    """
    try:
        q_ids, q_mask = encode_query_text(pair.query, query_vocab, max_query_len)
    except EmptySequenceError:
        raise SkipRecord(pair.id, "query") from None
    try:
        c_ids, c_mask = encode_code_text(pair.code, code_vocab, max_code_len)
    except EmptySequenceError:
        raise SkipRecord(pair.id, "code") from None
    return EncodedPair(pair.id, q_ids, q_mask, c_ids, c_mask)


def encode_corpus(pairs, code_vocab, query_vocab, max_query_len=MAX_QUERY_LEN, max_code_len=MAX_CODE_LEN):
    """Encode every pair; returns ``(id -> EncodedPair, skipped ids)``."""
    encoded, skipped = {}, []
    for pair in pairs:
        try:
            encoded[pair.id] = encode_pair(pair, code_vocab, query_vocab, max_query_len, max_code_len)
        except SkipRecord as exc:
            skipped.append(exc.record_id)
    if skipped:
        log.warning("skipped %d record(s) that tokenized to nothing", len(skipped))
    return encoded, skipped


# ---------------------------------------------------------------------------
# corpus files and splits
# ---------------------------------------------------------------------------


def read_corpus(path) -> list[RawPair]:
    """Read a JSON-lines corpus of ``{"id", "query", "code"}`` records."""
    pairs, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record must be an object", lineno)
            try:
                rid, query, code = rec["id"], rec["query"], rec["code"]
            except KeyError as exc:
                raise ParseError(f"missing field {exc.args[0]!r}", lineno) from None
            if not isinstance(rid, int) or isinstance(rid, bool) or rid < 0:
                raise ParseError(f"id must be a non-negative integer, got {rid!r}", lineno)
            if not isinstance(query, str) or not isinstance(code, str):
                raise ParseError("query and code must be strings", lineno)
            if not query.strip() or not code.strip():
                raise ParseError(f"record {rid}: query and code must be non-empty", lineno)
            if rid in seen:
                raise ParseError(f"duplicate id {rid}", lineno)
            seen.add(rid)
            pairs.append(RawPair(rid, query, code, str(rec.get("language", ""))))
    return pairs


def write_corpus(pairs: Iterable[RawPair], path):
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            rec = {"id": p.id, "query": p.query, "code": p.code}
            if p.language:
                rec["language"] = p.language
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


@dataclass
class DatasetSplit:
    train: list[int]
    valid: list[int]
    test: list[int]
    seed: int

    def save(self, out_dir):
        out = Path(out_dir)
        for name in ("train", "valid", "test"):
            ids = getattr(self, name)
            (out / f"{name}.ids").write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
        (out / "split.seed").write_text(f"{self.seed}\n", encoding="utf-8")

    @classmethod
    def load(cls, out_dir) -> "DatasetSplit":
        out = Path(out_dir)
        parts = {}
        for name in ("train", "valid", "test"):
            text = (out / f"{name}.ids").read_text(encoding="utf-8")
            parts[name] = [int(x) for x in text.split()]
        seed = int((out / "split.seed").read_text(encoding="utf-8").strip())
        return cls(seed=seed, **parts)


def split_dataset(ids, seed: int) -> DatasetSplit:
    """Seeded shuffle then a contiguous 75/10/15 cut (floors for train and validation)."""
    ids = list(ids)
    n = len(ids)
    if n == 0:
        raise ConfigurationError("cannot split an empty corpus")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = n * 75 // 100
    n_valid = n * 10 // 100
    return DatasetSplit(
        train=shuffled[:n_train],
        valid=shuffled[n_train : n_train + n_valid],
        test=shuffled[n_train + n_valid :],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# pretrained vectors
# ---------------------------------------------------------------------------


@dataclass
class PretrainedEmbeddings:
    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    missing: list[str] = field(default_factory=list)


def load_pretrained_embeddings(path, vocab: TokenVocabulary, dim: Optional[int] = None):
    """Load a ``"V D"``-headed word-vector text file, keeping vocabulary tokens only.

    Returns ``(PretrainedEmbeddings, coverage)`` where coverage is the share
    of non-reserved vocabulary tokens found in the file.
    """
    wanted = set(vocab.tokens)
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ParseError("header must be 'V D'", 1)
        try:
            count, file_dim = int(header[0]), int(header[1])
        except ValueError:
            raise ParseError("header must hold two integers", 1) from None
        if count < 0 or file_dim < 1:
            raise ParseError(f"bad header counts {count} {file_dim}", 1)
        if dim is not None and file_dim != dim:
            raise ConfigurationError(f"pretrained dimension {file_dim} does not match configured {dim}")
        rows, lineno = 0, 1
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if len(parts) != file_dim + 1:
                raise ParseError(f"expected token plus {file_dim} values, got {len(parts) - 1}", lineno)
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError:
                raise ParseError("non-numeric vector entry", lineno) from None
            if not np.all(np.isfinite(vec)):
                raise ParseError("non-finite vector entry", lineno)
            rows += 1
            if parts[0] in wanted:
                vectors[parts[0]] = vec
        if rows != count:
            raise ParseError(f"header announces {count} vectors, file has {rows}", lineno)
    missing = [t for t in vocab.tokens if t not in vectors]
    coverage = len(vectors) / len(wanted) if wanted else 0.0
    return PretrainedEmbeddings(file_dim, vectors, missing), coverage


# ---------------------------------------------------------------------------
# ingestion statistics
# ---------------------------------------------------------------------------

LENGTH_BUCKETS = ((1, 20), (21, 120), (121, 200), (201, None))


def length_bucket_shares(lengths) -> dict[str, float]:
    """Share of sequences per token-count bucket (1-20, 21-120, 121-200, >200)."""
    lengths = np.asarray(list(lengths))
    shares = {}
    for lo, hi in LENGTH_BUCKETS:
        label = f"{lo}-{hi}" if hi is not None else f">{lo - 1}"
        inside = (lengths >= lo) if hi is None else ((lengths >= lo) & (lengths <= hi))
        shares[label] = float(inside.mean()) if lengths.size else 0.0
    return shares
