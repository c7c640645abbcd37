"""Offline code index and exhaustive cosine search."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .binio import ByteReader
from .data import RawPair, encode_code_text, encode_query_text
from .errors import (
    ConfigurationError,
    CorruptionError,
    DegenerateVectorError,
    EmptySequenceError,
    FormatError,
    StalenessError,
)
from .evaluation import similarities
from .training import model_fingerprint

log = logging.getLogger(__name__)

INDEX_MAGIC = b"COSIDX"
INDEX_VERSION = 1


@dataclass
class CodeIndex:
    checkpoint_id: str
    dim: int
    ids: list = field(default_factory=list)
    texts: list = field(default_factory=list)
    vectors: np.ndarray = None
    skipped: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


@dataclass
class SearchResult:
    query: str
    hits: list  # (code id, similarity, source text)


def build_index(pairs: Sequence[RawPair], model) -> CodeIndex:
    """Encode every code with the frozen code encoder, in corpus order.

    Codes that tokenize to nothing are skipped and listed in ``skipped``.
    """
    if not pairs:
        raise ConfigurationError("cannot index an empty corpus")
    ids, texts, vecs, skipped, seen = [], [], [], [], set()
    for pair in pairs:
        if pair.id in seen:
            raise ConfigurationError(f"duplicate code id {pair.id}")
        seen.add(pair.id)
        try:
            c_ids, c_mask = encode_code_text(pair.code, model.code_vocab, model.config.max_code_len)
        except EmptySequenceError:
            skipped.append(pair.id)
            continue
        vec = model.code_vector(c_ids, c_mask)
        if not np.linalg.norm(vec) > 0:
            raise DegenerateVectorError(f"code {pair.id} encodes to a zero vector")
        ids.append(pair.id)
        texts.append(pair.code)
        vecs.append(vec)
    if skipped:
        log.warning("index: skipped %d code(s) that tokenized to nothing", len(skipped))
    E = model.config.embed_dim
    vectors = np.stack(vecs) if vecs else np.zeros((0, E))
    return CodeIndex(model_fingerprint(model), E, ids, texts, vectors, skipped)


def search(query: str, index: CodeIndex, model, k: int = 10) -> SearchResult:
    """Top-``k`` entries by descending cosine; equal similarities go to the lower id first."""
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise ConfigurationError("index is empty")
    current = model_fingerprint(model)
    if index.checkpoint_id != current:
        raise StalenessError(f"index was built with checkpoint {index.checkpoint_id}, model is {current}")
    q_ids, q_mask = encode_query_text(query, model.query_vocab, model.config.max_query_len)
    e_q = model.query_vector(q_ids, q_mask)
    return rank_index(query, e_q, index, k)


def rank_index(query: str, e_q: np.ndarray, index: CodeIndex, k: int) -> SearchResult:
    sims = np.clip(similarities(e_q, index.vectors, index.ids), -1.0, 1.0)
    order = np.lexsort((np.asarray(index.ids), -sims))[:k]
    return SearchResult(query, [(index.ids[i], float(sims[i]), index.texts[i]) for i in order])


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def index_bytes(index: CodeIndex) -> bytes:
    cid = index.checkpoint_id.encode("utf-8")
    out = [
        INDEX_MAGIC,
        struct.pack("<I", INDEX_VERSION),
        struct.pack("<I", len(cid)),
        cid,
        struct.pack("<I", index.dim),
        struct.pack("<Q", len(index)),
    ]
    for cid_, text, vec in zip(index.ids, index.texts, index.vectors):
        raw = text.encode("utf-8")
        out.append(struct.pack("<QI", cid_, len(raw)))
        out.append(raw)
        out.append(np.ascontiguousarray(vec, dtype="<f8").tobytes())
    return b"".join(out)


def save_index(index: CodeIndex, path):
    with open(path, "wb") as fh:
        fh.write(index_bytes(index))


def parse_index(buf: bytes) -> CodeIndex:
    if buf[: len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise FormatError("not an index file (bad magic)")
    r = ByteReader(buf)
    r.pos = len(INDEX_MAGIC)
    version = r.u32("format version")
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version} (expected {INDEX_VERSION})")
    checkpoint_id = r.text("checkpoint id")
    dim = r.u32("embedding dimension")
    count = r.u64("entry count")
    ids, texts, vecs = [], [], []
    for _ in range(count):
        ids.append(r.u64("entry id"))
        texts.append(r.text("entry text"))
        vecs.append(np.frombuffer(r.take(8 * dim, "entry vector"), dtype="<f8").astype(np.float64))
    if r.pos != len(buf):
        raise CorruptionError("trailing bytes after index", r.pos)
    vectors = np.stack(vecs) if vecs else np.zeros((0, dim))
    return CodeIndex(checkpoint_id, dim, ids, texts, vectors)


def load_index(path) -> CodeIndex:
    with open(path, "rb") as fh:
        return parse_index(fh.read())
