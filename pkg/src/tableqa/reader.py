"""Candidate scoring and answer-span extraction over retrieved tables.

Each table token gets an additive embedding from its hashed structural
features plus a question-conditioning term (the mean embedding of the
question tokens).  Spans live strictly inside single cells (header cells
included by default); a span is scored by a two-layer perceptron over the
concatenated first/last token representations, with softplus as the hidden
nonlinearity.  A separate linear head over the mean-pooled token
representations scores whole candidates; at inference the best span of the
highest-scoring candidate is the answer.

Reader file layout (little-endian): magic "RDRPARMS" | version u32
| feature_dims u64 | r u32 | hidden u32 | f32 blocks: embed, W1, b1, w2,
b2, wc, bc (row-major).
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Config
from .data import Corpus, QAExample, Question, Table
from .metrics import Prediction, RetrievalRun
from .text import (
    SEGMENT_CELL,
    SEGMENT_HEADER,
    StructuredToken,
    flatten_table,
    question_tokens,
    token_feature_indices,
    tokenize,
)

log = logging.getLogger(__name__)

_MAGIC = b"RDRPARMS"
_VERSION = 1

READER_PARAM_KEYS = ("embed", "W1", "b1", "w2", "b2", "wc", "bc")


@dataclass
class ReaderParams:
    embed: np.ndarray  # (feature_dims, r)
    W1: np.ndarray  # (hidden, 2r)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: np.ndarray  # (1,)
    wc: np.ndarray  # (r,)
    bc: np.ndarray  # (1,)

    @property
    def r(self) -> int:
        return self.embed.shape[1]

    @property
    def feature_dims(self) -> int:
        return self.embed.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def copy(self) -> "ReaderParams":
        return ReaderParams(**{k: getattr(self, k).copy() for k in READER_PARAM_KEYS})


def init_reader(
    feature_dims: int, r: int = 64, hidden: int = 64, seed: int = 0
) -> ReaderParams:
    rng = np.random.default_rng(seed)
    return ReaderParams(
        embed=rng.uniform(-0.5, 0.5, size=(feature_dims, r)),
        W1=rng.uniform(-1.0, 1.0, size=(hidden, 2 * r)) / np.sqrt(2 * r),
        b1=np.zeros(hidden),
        w2=rng.uniform(-1.0, 1.0, size=hidden) / np.sqrt(hidden),
        b2=np.zeros(1),
        wc=rng.uniform(-1.0, 1.0, size=r) / np.sqrt(r),
        bc=np.zeros(1),
    )


@dataclass(frozen=True)
class SpanCandidate:
    """A within-cell token span; offsets are inclusive and cell-relative."""

    row_idx: int
    col_idx: int
    token_start: int
    token_end: int
    text: str


def _cell_grid(t: Table, include_header: bool) -> list[tuple[int, int, str]]:
    """(row, col, cell text) in span-enumeration order; header is row 0."""
    cells = []
    if include_header:
        for c, name in enumerate(t.header, start=1):
            cells.append((0, c, name))
    for r, row in enumerate(t.rows, start=1):
        for c, cell in enumerate(row, start=1):
            cells.append((r, c, cell))
    return cells


def enumerate_spans(
    t: Table, max_len: int, include_header: bool = True
) -> list[SpanCandidate]:
    """All within-cell spans of up to max_len tokens, (row, col, start, end)
    ordered.  Title and caption tokens are never answer locations."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    spans: list[SpanCandidate] = []
    for row_idx, col_idx, cell_text in _cell_grid(t, include_header):
        seq = tokenize(cell_text)
        n = len(seq)
        for start in range(n):
            for end in range(start, min(n, start + max_len)):
                text = cell_text[seq.source_spans[start][0] : seq.source_spans[end][1]]
                spans.append(
                    SpanCandidate(
                        row_idx=row_idx,
                        col_idx=col_idx,
                        token_start=start,
                        token_end=end,
                        text=text,
                    )
                )
    return spans


@dataclass
class _TableCtx:
    """Static (parameter-independent) featurization of one (question, table)."""

    feat_idx: np.ndarray  # concatenated feature slots over all tokens
    tok_of_feat: np.ndarray  # owning token position per feature slot
    offsets: np.ndarray  # segment starts into feat_idx, one per token
    n_tokens: int
    cell_positions: dict[tuple[int, int], list[int]]  # (row, col) -> flat positions


def _build_table_ctx(t: Table, dims: int) -> _TableCtx:
    sts = flatten_table(t, "full")
    feat_idx: list[int] = []
    tok_of_feat: list[int] = []
    offsets: list[int] = []
    cell_positions: dict[tuple[int, int], list[int]] = {}
    for pos, st in enumerate(sts):
        offsets.append(len(feat_idx))
        for f in token_feature_indices(st, dims, use_structure=True):
            feat_idx.append(f)
            tok_of_feat.append(pos)
        if st.segment in (SEGMENT_HEADER, SEGMENT_CELL):
            cell_positions.setdefault((st.row_idx, st.col_idx), []).append(pos)
    return _TableCtx(
        feat_idx=np.array(feat_idx, dtype=np.int64),
        tok_of_feat=np.array(tok_of_feat, dtype=np.int64),
        offsets=np.array(offsets, dtype=np.int64),
        n_tokens=len(sts),
        cell_positions=cell_positions,
    )


def _question_feat_idx(q: Question | str, dims: int) -> np.ndarray:
    text = q.text if isinstance(q, Question) else q
    idx = []
    for st in question_tokens(text):
        idx.extend(token_feature_indices(st, dims, use_structure=False))
    return np.array(idx, dtype=np.int64)


def _q_mean(rp: ReaderParams, q_feat_idx: np.ndarray) -> np.ndarray:
    if len(q_feat_idx) == 0:
        return np.zeros(rp.r)
    return rp.embed[q_feat_idx].mean(axis=0)


def _token_reps(rp: ReaderParams, ctx: _TableCtx, q_mean: np.ndarray) -> np.ndarray:
    if ctx.n_tokens == 0:
        return np.zeros((0, rp.r))
    sums = np.add.reduceat(rp.embed[ctx.feat_idx], ctx.offsets, axis=0)
    return sums + q_mean


def token_representation(
    rp: ReaderParams, q: Question | str, t: Table, position: tuple[int, int, int]
) -> np.ndarray:
    """Representation of the token at (row, col, within-cell offset)."""
    ctx = _build_table_ctx(t, rp.feature_dims)
    row, col, offset = position
    positions = ctx.cell_positions.get((row, col))
    if positions is None or not 0 <= offset < len(positions):
        raise ValueError(f"position {position} not present in table {t.table_id!r}")
    reps = _token_reps(rp, ctx, _q_mean(rp, _question_feat_idx(q, rp.feature_dims)))
    return reps[positions[offset]]


def _span_positions(
    ctx: _TableCtx, spans: Sequence[SpanCandidate]
) -> tuple[np.ndarray, np.ndarray]:
    starts = []
    ends = []
    for s in spans:
        positions = ctx.cell_positions.get((s.row_idx, s.col_idx))
        if positions is None or s.token_end >= len(positions):
            raise ValueError(f"span {s} does not fit its cell")
        starts.append(positions[s.token_start])
        ends.append(positions[s.token_end])
    return np.array(starts, dtype=np.int64), np.array(ends, dtype=np.int64)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _span_logits(rp: ReaderParams, reps: np.ndarray, starts: np.ndarray, ends: np.ndarray):
    Z = np.concatenate([reps[starts], reps[ends]], axis=1)  # (m, 2r)
    A1 = Z @ rp.W1.T + rp.b1
    H1 = _softplus(A1)
    scores = H1 @ rp.w2 + rp.b2[0]
    return scores, Z, A1, H1


def score_spans(
    rp: ReaderParams, q: Question | str, t: Table, spans: Sequence[SpanCandidate]
) -> np.ndarray:
    """Span logits; softmax over the returned vector is the span distribution."""
    if not spans:
        raise ValueError(f"table {t.table_id!r} has no candidate spans")
    ctx = _build_table_ctx(t, rp.feature_dims)
    reps = _token_reps(rp, ctx, _q_mean(rp, _question_feat_idx(q, rp.feature_dims)))
    starts, ends = _span_positions(ctx, spans)
    scores, _, _, _ = _span_logits(rp, reps, starts, ends)
    return scores


def score_candidate(rp: ReaderParams, q: Question | str, t: Table) -> float:
    """Candidate logit from the mean-pooled token representations."""
    ctx = _build_table_ctx(t, rp.feature_dims)
    reps = _token_reps(rp, ctx, _q_mean(rp, _question_feat_idx(q, rp.feature_dims)))
    pooled = reps.mean(axis=0) if ctx.n_tokens else np.zeros(rp.r)
    return float(rp.wc @ pooled + rp.bc[0])


@dataclass
class Answer:
    table_id: str | None
    text: str
    score: float
    status: str  # "ok" | "no_spans"


def _best_span_text(rp: ReaderParams, q_feat_idx: np.ndarray, t: Table, ctx: _TableCtx,
                    spans: Sequence[SpanCandidate]) -> tuple[str, float]:
    reps = _token_reps(rp, ctx, _q_mean(rp, q_feat_idx))
    starts, ends = _span_positions(ctx, spans)
    scores, _, _, _ = _span_logits(rp, reps, starts, ends)
    best = int(np.argmax(scores))
    return spans[best].text, float(scores[best])


def predict(
    rp: ReaderParams,
    q: Question | str,
    candidates: Sequence[Table],
    max_len: int = 10,
    include_header: bool = True,
) -> tuple[Answer, list[tuple[str, str]]]:
    """Answer from the highest-logit candidate plus each candidate's best span.

    Candidates without any enumerable span are skipped; if all are skipped
    the answer is empty with status "no_spans".  Ties on the candidate logit
    break on ascending table_id, so the result is independent of input order.
    """
    if not candidates:
        raise ValueError("empty candidate list")
    dims = rp.feature_dims
    q_feat_idx = _question_feat_idx(q, dims)
    scored: list[tuple[float, str, str]] = []  # (logit, table_id, best span text)
    per_candidate: list[tuple[str, str]] = []
    for t in candidates:
        spans = enumerate_spans(t, max_len, include_header)
        if not spans:
            continue
        ctx = _build_table_ctx(t, dims)
        reps = _token_reps(rp, ctx, _q_mean(rp, q_feat_idx))
        pooled = reps.mean(axis=0) if ctx.n_tokens else np.zeros(rp.r)
        logit = float(rp.wc @ pooled + rp.bc[0])
        text, _ = _best_span_text(rp, q_feat_idx, t, ctx, spans)
        scored.append((logit, t.table_id, text))
        per_candidate.append((t.table_id, text))
    if not scored:
        return Answer(table_id=None, text="", score=0.0, status="no_spans"), []
    best = min(scored, key=lambda x: (-x[0], x[1]))
    return Answer(table_id=best[1], text=best[2], score=best[0], status="ok"), per_candidate


def answer(
    rp: ReaderParams,
    q: Question | str,
    candidates: Sequence[Table],
    max_len: int = 10,
    include_header: bool = True,
) -> Answer:
    return predict(rp, q, candidates, max_len, include_header)[0]


def _answer_token_sets(answers: Sequence[str]) -> list[tuple[str, ...]]:
    out = []
    for a in answers:
        toks = tokenize(a).tokens
        if toks:
            out.append(toks)
    return out


def _match_mask(spans: Sequence[SpanCandidate], answers: Sequence[str]) -> np.ndarray:
    targets = _answer_token_sets(answers)
    mask = np.zeros(len(spans), dtype=bool)
    for i, s in enumerate(spans):
        toks = tokenize(s.text).tokens
        if any(toks == t for t in targets):
            mask[i] = True
    return mask


@dataclass
class _ExampleStatic:
    q_feat_idx: np.ndarray
    n_q: int
    candidates: list[tuple[_TableCtx, float]]  # (ctx, gold label)
    gold_ctx: _TableCtx
    span_starts: np.ndarray
    span_ends: np.ndarray
    match_mask: np.ndarray


def _build_example_static(
    q: Question | str,
    gold: Table,
    candidates: Sequence[Table],
    answers: Sequence[str],
    dims: int,
    max_len: int,
    include_header: bool,
) -> _ExampleStatic | None:
    """None when the gold table contains no answer-matching span."""
    spans = enumerate_spans(gold, max_len, include_header)
    if not spans:
        return None
    mask = _match_mask(spans, answers)
    if not mask.any():
        return None
    gold_ctx = _build_table_ctx(gold, dims)
    starts, ends = _span_positions(gold_ctx, spans)
    q_feat_idx = _question_feat_idx(q, dims)
    text = q.text if isinstance(q, Question) else q
    n_q = len(question_tokens(text))
    cand_ctxs = []
    for t in candidates:
        label = 1.0 if t.table_id == gold.table_id else 0.0
        ctx = gold_ctx if t.table_id == gold.table_id else _build_table_ctx(t, dims)
        cand_ctxs.append((ctx, label))
    return _ExampleStatic(
        q_feat_idx=q_feat_idx,
        n_q=n_q,
        candidates=cand_ctxs,
        gold_ctx=gold_ctx,
        span_starts=starts,
        span_ends=ends,
        match_mask=mask,
    )


def _zero_grads(rp: ReaderParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(getattr(rp, k)) for k in READER_PARAM_KEYS}


def _accumulate_rep_grads(
    rp: ReaderParams,
    grads: dict[str, np.ndarray],
    ctx: _TableCtx,
    q_feat_idx: np.ndarray,
    d_reps: np.ndarray,
) -> None:
    if ctx.n_tokens == 0:
        return
    np.add.at(grads["embed"], ctx.feat_idx, d_reps[ctx.tok_of_feat])
    n_q = len(q_feat_idx)
    if n_q:
        g_qmean = d_reps.sum(axis=0) / n_q
        np.add.at(grads["embed"], q_feat_idx, np.broadcast_to(g_qmean, (n_q, rp.r)))


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + math.log(float(np.exp(x - m).sum()))


def example_loss_and_grads(
    rp: ReaderParams,
    static: _ExampleStatic,
    grads: dict[str, np.ndarray] | None = None,
    scale: float = 1.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Candidate logistic loss + marginal span cross entropy, with gradients.

    Span supervision marginalizes over every answer-matching span of the
    gold table rather than picking one.
    """
    if grads is None:
        grads = _zero_grads(rp)
    q_mean = _q_mean(rp, static.q_feat_idx)

    # Candidate scoring: logistic loss against the gold indicator.
    cand_loss = 0.0
    n_cands = len(static.candidates)
    for ctx, label in static.candidates:
        reps = _token_reps(rp, ctx, q_mean)
        pooled = reps.mean(axis=0) if ctx.n_tokens else np.zeros(rp.r)
        z = float(rp.wc @ pooled + rp.bc[0])
        cand_loss += np.logaddexp(0.0, z) - z * label
        g_z = (float(_sigmoid(np.array(z))) - label) * scale / n_cands
        grads["wc"] += g_z * pooled
        grads["bc"] += g_z
        if ctx.n_tokens:
            d_reps = np.broadcast_to(g_z * rp.wc / ctx.n_tokens, (ctx.n_tokens, rp.r)).copy()
            _accumulate_rep_grads(rp, grads, ctx, static.q_feat_idx, d_reps)
    cand_loss /= n_cands

    # Span scoring on the gold table.
    reps = _token_reps(rp, static.gold_ctx, q_mean)
    scores, Z, A1, H1 = _span_logits(rp, reps, static.span_starts, static.span_ends)
    lse_all = _logsumexp(scores)
    lse_match = _logsumexp(scores[static.match_mask])
    span_loss = lse_all - lse_match
    p = np.exp(scores - lse_all)
    target = np.zeros_like(p)
    target[static.match_mask] = np.exp(scores[static.match_mask] - lse_match)
    ds = (p - target) * scale

    grads["w2"] += H1.T @ ds
    grads["b2"] += ds.sum()
    dH1 = np.outer(ds, rp.w2)
    dA1 = dH1 * _sigmoid(A1)
    grads["W1"] += dA1.T @ Z
    grads["b1"] += dA1.sum(axis=0)
    dZ = dA1 @ rp.W1
    d_reps = np.zeros_like(reps)
    np.add.at(d_reps, static.span_starts, dZ[:, : rp.r])
    np.add.at(d_reps, static.span_ends, dZ[:, rp.r :])
    _accumulate_rep_grads(rp, grads, static.gold_ctx, static.q_feat_idx, d_reps)

    return float(cand_loss + span_loss), grads


def build_example_static(
    q: Question | str,
    gold: Table,
    candidates: Sequence[Table],
    answers: Sequence[str],
    dims: int,
    max_len: int = 10,
    include_header: bool = True,
) -> _ExampleStatic | None:
    return _build_example_static(q, gold, candidates, answers, dims, max_len, include_header)


def train_reader(
    rp: ReaderParams,
    run: RetrievalRun,
    examples: Sequence[QAExample],
    corpus: Corpus,
    cfg: Config,
) -> ReaderParams:
    """Adam training over retrieval candidates, gold table injected if absent.

    Examples whose gold table is missing from the corpus or has no span
    matching an answer are skipped (counts logged).
    """
    from .training import adam_update  # shared optimizer step

    statics: list[_ExampleStatic] = []
    span_losses_seen = 0
    skipped = 0
    for ex in examples:
        if ex.gold_table_id is None or ex.gold_table_id not in corpus:
            skipped += 1
            continue
        if not ex.answers:
            skipped += 1
            continue
        gold = corpus[ex.gold_table_id]
        cand_ids = [tid for tid, _ in run.rankings.get(ex.question_id, [])][: cfg.top_k]
        cand_tables = [corpus[tid] for tid in cand_ids if tid in corpus]
        if all(t.table_id != gold.table_id for t in cand_tables):
            cand_tables.append(gold)
        static = _build_example_static(
            ex.question, gold, cand_tables, ex.answers,
            rp.feature_dims, cfg.max_answer_len, cfg.spans_include_header,
        )
        if static is None:
            skipped += 1
            continue
        statics.append(static)
    if skipped:
        log.warning("reader training skipped %d unanswerable examples", skipped)
    if not statics:
        raise ValueError("no trainable reader examples")

    m = _zero_grads(rp)
    v = _zero_grads(rp)
    rng = np.random.default_rng((cfg.seed, 303))
    step = 0
    batch_size = min(cfg.reader_batch, len(statics))
    while step < cfg.reader_steps:
        order = rng.permutation(len(statics))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            batch = order[start : start + batch_size]
            grads = _zero_grads(rp)
            total = 0.0
            for i in batch:
                loss, _ = example_loss_and_grads(rp, statics[i], grads, scale=1.0 / len(batch))
                total += loss
            step += 1
            for key in READER_PARAM_KEYS:
                adam_update(getattr(rp, key), grads[key], m[key], v[key], cfg.reader_lr, step)
            if step >= cfg.reader_steps:
                break
    return rp


def mean_span_cross_entropy(rp: ReaderParams, statics: Sequence[_ExampleStatic]) -> float:
    """Monitoring helper: mean -ln(total matching-span probability)."""
    total = 0.0
    for static in statics:
        q_mean = _q_mean(rp, static.q_feat_idx)
        reps = _token_reps(rp, static.gold_ctx, q_mean)
        scores, _, _, _ = _span_logits(rp, reps, static.span_starts, static.span_ends)
        total += _logsumexp(scores) - _logsumexp(scores[static.match_mask])
    return total / len(statics)


def save_reader(rp: ReaderParams, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQII", _VERSION, rp.feature_dims, rp.r, rp.hidden))
        for key in READER_PARAM_KEYS:
            fh.write(getattr(rp, key).astype("<f4").tobytes(order="C"))


def load_reader(path: str | Path) -> ReaderParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a reader parameter file (bad magic at offset 0)")
        version, dims, r, hidden = struct.unpack("<IQII", fh.read(20))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        shapes = {
            "embed": (dims, r),
            "W1": (hidden, 2 * r),
            "b1": (hidden,),
            "w2": (hidden,),
            "b2": (1,),
            "wc": (r,),
            "bc": (1,),
        }
        arrays = {}
        for key, shape in shapes.items():
            count = int(np.prod(shape))
            offset = fh.tell()
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError(f"{path}: truncated block {key!r} at offset {offset}")
            arrays[key] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    return ReaderParams(**arrays)
