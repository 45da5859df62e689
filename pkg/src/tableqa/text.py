"""Tokenization, table flattening, and sparse feature vectors.

One tokenizer is used everywhere (BM25, dedup, encoders, answer matching):
lowercase, split on whitespace and punctuation, punctuation dropped, digits
kept.  Hashed features use FNV-1a 64-bit (public-domain reference constants,
no per-process seed) so feature spaces are reproducible across machines.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import Table

# Word characters except underscore; matched on the original text so span
# offsets stay valid, lowercased per token afterwards.
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

DEFAULT_FEATURE_DIMS = 2**18

SEGMENT_QUESTION = "question"
SEGMENT_TITLE = "title"
SEGMENT_SECTION = "section"
SEGMENT_CAPTION = "caption"
SEGMENT_HEADER = "header"
SEGMENT_CELL = "cell"


@dataclass(frozen=True)
class TokenSeq:
    """Lowercased tokens plus (start, end) character offsets into the source."""

    tokens: tuple[str, ...]
    source_spans: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(text: str) -> TokenSeq:
    tokens = []
    spans = []
    for m in _TOKEN_RE.finditer(text):
        tokens.append(m.group().lower())
        spans.append((m.start(), m.end()))
    return TokenSeq(tokens=tuple(tokens), source_spans=tuple(spans))


@dataclass(frozen=True)
class StructuredToken:
    """A token tagged with its position in the flattened table.

    Header tokens carry row_idx=0 and col_idx>=1; cell tokens carry
    row_idx>=1 and col_idx>=1; metadata segments use 0 for both.
    """

    token: str
    segment: str
    row_idx: int = 0
    col_idx: int = 0


def question_tokens(text: str) -> list[StructuredToken]:
    return [StructuredToken(tok, SEGMENT_QUESTION) for tok in tokenize(text).tokens]


def flatten_table(t: Table, mode: str = "full") -> list[StructuredToken]:
    """Linearize a table: title, section, caption, header, then cells row-major.

    mode="schema_only" omits caption and cell tokens, leaving the page title,
    section title and column headers as the table representation.
    """
    if mode not in ("full", "schema_only"):
        raise ValueError(f"unknown flatten mode {mode!r}")
    out: list[StructuredToken] = []
    for tok in tokenize(t.page_title).tokens:
        out.append(StructuredToken(tok, SEGMENT_TITLE))
    if t.section_title:
        for tok in tokenize(t.section_title).tokens:
            out.append(StructuredToken(tok, SEGMENT_SECTION))
    if mode == "full" and t.caption:
        for tok in tokenize(t.caption).tokens:
            out.append(StructuredToken(tok, SEGMENT_CAPTION))
    for col, name in enumerate(t.header, start=1):
        for tok in tokenize(name).tokens:
            out.append(StructuredToken(tok, SEGMENT_HEADER, row_idx=0, col_idx=col))
    if mode == "full":
        for r, row in enumerate(t.rows, start=1):
            for c, cell in enumerate(row, start=1):
                for tok in tokenize(cell).tokens:
                    out.append(StructuredToken(tok, SEGMENT_CELL, row_idx=r, col_idx=c))
    return out


@dataclass(frozen=True)
class SparseVector:
    """Sorted (index, value) pairs; zero entries are never stored."""

    indices: np.ndarray  # int64, strictly increasing
    values: np.ndarray  # float64

    @staticmethod
    def empty() -> "SparseVector":
        return SparseVector(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))

    @staticmethod
    def from_counts(counts: Mapping[int, float]) -> "SparseVector":
        items = sorted((i, v) for i, v in counts.items() if v != 0.0)
        if not items:
            return SparseVector.empty()
        idx, vals = zip(*items)
        return SparseVector(np.array(idx, dtype=np.int64), np.array(vals, dtype=np.float64))

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def dot(self, other: "SparseVector") -> float:
        if self.nnz == 0 or other.nnz == 0:
            return 0.0
        common, ia, ib = np.intersect1d(
            self.indices, other.indices, assume_unique=True, return_indices=True
        )
        if len(common) == 0:
            return 0.0
        return float(np.dot(self.values[ia], other.values[ib]))

    def l2_normalized(self) -> "SparseVector":
        n = self.norm()
        if n == 0.0:
            return self
        return SparseVector(self.indices, self.values / n)


class Vocabulary:
    """Token -> integer id, assigned in first-seen order."""

    def __init__(self) -> None:
        self._ids: dict[str, int] = {}

    def add(self, token: str) -> int:
        tid = self._ids.get(token)
        if tid is None:
            tid = len(self._ids)
            self._ids[token] = tid
        return tid

    def get(self, token: str) -> int | None:
        return self._ids.get(token)

    def __len__(self) -> int:
        return len(self._ids)


def unigram_vector(tokens: Iterable[str], vocab: Vocabulary) -> SparseVector:
    """L2-normalized unigram count vector over a shared vocabulary."""
    counts: dict[int, float] = {}
    for tok in tokens:
        tid = vocab.add(tok)
        counts[tid] = counts.get(tid, 0.0) + 1.0
    return SparseVector.from_counts(counts).l2_normalized()


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: str) -> int:
    """FNV-1a 64-bit over the UTF-8 bytes of ``data``."""
    h = _FNV_OFFSET
    for byte in data.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def token_feature_indices(st: StructuredToken, dims: int, use_structure: bool) -> list[int]:
    """Hash slots a single token contributes to.

    Always the plain token hash; with use_structure also a segment channel
    and, for header/cell tokens, column and row channels.
    """
    keys = [st.token]
    if use_structure:
        keys.append(f"{st.token}\x1eseg:{st.segment}")
        if st.col_idx >= 1:
            keys.append(f"{st.token}\x1ecol:{st.col_idx}")
        if st.row_idx >= 1:
            keys.append(f"{st.token}\x1erow:{st.row_idx}")
    return [fnv1a64(k) % dims for k in keys]


def feature_counts(
    tokens: Sequence[StructuredToken], dims: int, use_structure: bool
) -> dict[int, float]:
    """Raw hashed counts before normalization (exposed for collision tests)."""
    counts: dict[int, float] = {}
    for st in tokens:
        for idx in token_feature_indices(st, dims, use_structure):
            counts[idx] = counts.get(idx, 0.0) + 1.0
    return counts


def hash_features(
    tokens: Sequence[StructuredToken],
    dims: int = DEFAULT_FEATURE_DIMS,
    use_structure: bool = True,
) -> SparseVector:
    """L2-normalized hashed bag-of-token features.

    Each token contributes count 1 at fnv1a64(token) mod dims.  With
    use_structure, channels keyed by segment and by column/row position
    (for header/cell tokens) are added, so the same word in a header versus
    a cell, or in a different row or column, hashes to extra distinct slots.
    """
    if dims < 1024:
        raise ValueError(f"feature dims must be >= 1024, got {dims}")
    return SparseVector.from_counts(feature_counts(tokens, dims, use_structure)).l2_normalized()
