"""Offline corpus encoding and exhaustive top-K inner-product search.

Embeddings are stored as 32-bit floats (on disk and in memory); scores are
accumulated in 64-bit.  Search is exact: partition on the K-th largest
score, then order the surviving candidates by (-score, table_id).

Embedding file layout (little-endian):
    magic "EMBINDEX" | version u32 | count u64 | d u32
    | per table: id length u32 + UTF-8 bytes
    | f32[count*d] row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Corpus, DataFormatError, Question
from .encoder import EncoderParams, encode_question, encode_table
from .metrics import RetrievalRun

_MAGIC = b"EMBINDEX"
_VERSION = 1


@dataclass
class EmbeddingIndex:
    table_ids: list[str]
    vectors: np.ndarray  # (n, d) float32

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.table_ids):
            raise ValueError("vectors must be (len(table_ids), d)")
        if len(set(self.table_ids)) != len(self.table_ids):
            raise ValueError("duplicate table ids in index")

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.table_ids)


def encode_corpus(params: EncoderParams, corpus: Corpus) -> EmbeddingIndex:
    """One embedding per table, in corpus order."""
    vectors = np.zeros((len(corpus), params.d), dtype=np.float32)
    ids = []
    for i, table in enumerate(corpus):
        ids.append(table.table_id)
        vectors[i] = encode_table(params, table).astype(np.float32)
    return EmbeddingIndex(table_ids=ids, vectors=vectors)


def search(idx: EmbeddingIndex, h_q: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by inner product; ties break on ascending table_id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if h_q.shape != (idx.d,):
        raise ValueError(f"query dimension {h_q.shape} does not match index d={idx.d}")
    n = len(idx)
    if n == 0:
        return []
    scores = idx.vectors.astype(np.float64) @ h_q.astype(np.float64)
    k = min(k, n)
    if k < n:
        kth = np.partition(scores, n - k)[n - k]
        candidates = np.flatnonzero(scores >= kth)
    else:
        candidates = np.arange(n)
    ordered = sorted(candidates, key=lambda i: (-scores[i], idx.table_ids[i]))[:k]
    return [(idx.table_ids[i], float(scores[i])) for i in ordered]


def run_retrieval(
    idx: EmbeddingIndex,
    params: EncoderParams,
    questions: Sequence[Question],
    k: int = 10,
) -> RetrievalRun:
    run = RetrievalRun(tag="dense")
    for q in questions:
        h_q = encode_question(params, q)
        run.add(q.question_id, search(idx, h_q, k))
    return run


def save_embeddings(idx: EmbeddingIndex, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQI", _VERSION, len(idx), idx.d))
        for tid in idx.table_ids:
            raw = tid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(idx.vectors.astype("<f4").tobytes(order="C"))


def load_embeddings(path: str | Path) -> EmbeddingIndex:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise DataFormatError(f"{path}: not an embedding index (bad magic at offset 0)")

        def read_exact(n: int, what: str) -> bytes:
            offset = fh.tell()
            raw = fh.read(n)
            if len(raw) != n:
                raise DataFormatError(
                    f"{path}: truncated {what} at offset {offset}"
                )
            return raw

        version, count, d = struct.unpack("<IQI", read_exact(16, "header"))
        if version != _VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        ids = []
        for _ in range(count):
            (length,) = struct.unpack("<I", read_exact(4, "id length"))
            ids.append(read_exact(length, "table id").decode("utf-8"))
        raw = read_exact(4 * count * d, "vector block")
        vectors = np.frombuffer(raw, dtype="<f4").reshape(count, d).copy()
    return EmbeddingIndex(table_ids=ids, vectors=vectors)
