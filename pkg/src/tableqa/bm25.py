"""Okapi BM25 over flattened tables with title/header token boosting.

Page-title and header tokens are counted ``boost`` times when the index is
built (recall improves when those fields dominate term frequencies).  The
idf uses the non-negative variant ln(1 + (N - df + 0.5)/(df + 0.5)) so tiny
corpora cannot produce negative scores.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus, DataFormatError, Question
from .text import SEGMENT_HEADER, SEGMENT_TITLE, TokenSeq, flatten_table, tokenize

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_BOOST = 15

_MAGIC = b"BM25IDX\x01"


@dataclass
class InvertedIndex:
    table_ids: list[str]
    postings: dict[str, list[tuple[int, int]]]  # token -> [(ordinal, tf)], ordinal-sorted
    doc_lengths: np.ndarray  # int64, boosted token counts
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    boost: int = DEFAULT_BOOST
    avg_doc_length: float = field(init=False)

    def __post_init__(self) -> None:
        n = len(self.table_ids)
        self.avg_doc_length = float(self.doc_lengths.sum() / n) if n else 0.0

    @property
    def n_docs(self) -> int:
        return len(self.table_ids)


def build_index(
    corpus: Corpus,
    boost: int = DEFAULT_BOOST,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> InvertedIndex:
    """Index every table; title and header tokens are counted ``boost`` times."""
    if boost < 1:
        raise ValueError(f"boost must be >= 1, got {boost}")
    table_ids = []
    doc_lengths = []
    postings: dict[str, list[tuple[int, int]]] = {}
    for ordinal, table in enumerate(corpus):
        table_ids.append(table.table_id)
        counts: dict[str, int] = {}
        for st in flatten_table(table, "full"):
            weight = boost if st.segment in (SEGMENT_TITLE, SEGMENT_HEADER) else 1
            counts[st.token] = counts.get(st.token, 0) + weight
        doc_lengths.append(sum(counts.values()))
        for token, tf in counts.items():
            postings.setdefault(token, []).append((ordinal, tf))
    return InvertedIndex(
        table_ids=table_ids,
        postings=postings,
        doc_lengths=np.array(doc_lengths, dtype=np.int64),
        k1=k1,
        b=b,
        boost=boost,
    )


def idf(idx: InvertedIndex, token: str) -> float:
    df = len(idx.postings.get(token, ()))
    return math.log(1.0 + (idx.n_docs - df + 0.5) / (df + 0.5))


def _tf_weight(idx: InvertedIndex, tf: int, doc_length: int) -> float:
    if idx.avg_doc_length == 0.0:
        return 0.0
    denom = tf + idx.k1 * (1.0 - idx.b + idx.b * doc_length / idx.avg_doc_length)
    return tf * (idx.k1 + 1.0) / denom


def bm25_score(idx: InvertedIndex, query: TokenSeq, table_ordinal: int) -> float:
    """Score one document against a query (distinct query tokens summed once)."""
    if not 0 <= table_ordinal < idx.n_docs:
        raise IndexError(f"table ordinal {table_ordinal} out of range")
    dl = int(idx.doc_lengths[table_ordinal])
    score = 0.0
    for token in dict.fromkeys(query.tokens):
        plist = idx.postings.get(token)
        if not plist:
            continue
        tf = next((tf for ordinal, tf in plist if ordinal == table_ordinal), 0)
        if tf == 0:
            continue
        score += idf(idx, token) * _tf_weight(idx, tf, dl)
    return score


def all_scores(idx: InvertedIndex, query: TokenSeq) -> np.ndarray:
    """Scores for every document, accumulated through the postings lists."""
    scores = np.zeros(idx.n_docs, dtype=np.float64)
    for token in dict.fromkeys(query.tokens):
        plist = idx.postings.get(token)
        if not plist:
            continue
        token_idf = idf(idx, token)
        for ordinal, tf in plist:
            scores[ordinal] += token_idf * _tf_weight(idx, tf, int(idx.doc_lengths[ordinal]))
    return scores


def bm25_topk(idx: InvertedIndex, question: Question, k: int) -> list[tuple[str, float]]:
    """Top-k (table_id, score), score-descending, ties broken by ascending id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = all_scores(idx, tokenize(question.text))
    order = sorted(range(idx.n_docs), key=lambda i: (-scores[i], idx.table_ids[i]))
    return [(idx.table_ids[i], float(scores[i])) for i in order[:k]]


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise DataFormatError(f"truncated index file at offset {fh.tell()}")
    return raw


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def save_index(idx: InvertedIndex, path: str | Path) -> None:
    """Binary layout: magic, k1/b f64, boost u32, N u32, doc lengths u64[N],
    ids (length-prefixed UTF-8), vocab size u64, then per token (sorted):
    token, posting count u32, (ordinal u32, tf u32) pairs."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<ddII", idx.k1, idx.b, idx.boost, idx.n_docs))
        fh.write(struct.pack(f"<{idx.n_docs}Q", *idx.doc_lengths.tolist()))
        for tid in idx.table_ids:
            _write_str(fh, tid)
        fh.write(struct.pack("<Q", len(idx.postings)))
        for token in sorted(idx.postings):
            _write_str(fh, token)
            plist = idx.postings[token]
            fh.write(struct.pack("<I", len(plist)))
            for ordinal, tf in plist:
                fh.write(struct.pack("<II", ordinal, tf))


def load_index(path: str | Path) -> InvertedIndex:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise DataFormatError(f"{path}: not a BM25 index (bad magic at offset 0)")
        k1, b, boost, n_docs = struct.unpack("<ddII", _read_exact(fh, 24))
        doc_lengths = np.array(
            struct.unpack(f"<{n_docs}Q", _read_exact(fh, 8 * n_docs)), dtype=np.int64
        )
        table_ids = [_read_str(fh) for _ in range(n_docs)]
        (vocab_size,) = struct.unpack("<Q", _read_exact(fh, 8))
        postings: dict[str, list[tuple[int, int]]] = {}
        for _ in range(vocab_size):
            token = _read_str(fh)
            (count,) = struct.unpack("<I", _read_exact(fh, 4))
            plist = []
            for _ in range(count):
                ordinal, tf = struct.unpack("<II", _read_exact(fh, 8))
                plist.append((ordinal, tf))
            postings[token] = plist
    return InvertedIndex(
        table_ids=table_ids, postings=postings, doc_lengths=doc_lengths,
        k1=k1, b=b, boost=boost,
    )
