"""Retriever training: in-batch negatives, mined hard negatives, Adam.

The in-batch objective scores every question in a batch against every gold
table in the batch (a B x B logit matrix with the gold scores on the
diagonal) and applies row-wise cross entropy against identity labels.  With
mined negatives, each question's logit row is extended to length 2B by its
scores against the batch's negative tables; labels stay on the gold side.

The model is linear, so parameter gradients have closed forms through the
bilinear score; everything runs in float64 for reproducibility.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import Config
from .data import Corpus, QAExample, Question, Table, TextTablePair
from .encoder import EncoderParams, project, question_features, table_features
from .text import SparseVector, tokenize

MASK_LOGIT = -1e9

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PARAM_KEYS = ("q_tower", "q_bias", "t_tower", "t_bias")


@dataclass
class ScoreBatch:
    """B x B gold-on-diagonal logits, optionally with hard-negative logits."""

    S: np.ndarray
    S_hard: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.S.ndim != 2 or self.S.shape[0] != self.S.shape[1]:
            raise ValueError(f"S must be square, got shape {self.S.shape}")
        if self.S_hard is not None and self.S_hard.shape != self.S.shape:
            raise ValueError("S_hard must match S's shape")

    @property
    def batch_size(self) -> int:
        return self.S.shape[0]


@dataclass
class TrainState:
    params: EncoderParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    best_dev_recall: float = field(default=float("-inf"))
    evals_since_improvement: int = 0


def init_state(params: EncoderParams) -> TrainState:
    zeros = lambda arr: np.zeros_like(arr)
    m = {k: zeros(getattr(params, k)) for k in PARAM_KEYS}
    v = {k: zeros(getattr(params, k)) for k in PARAM_KEYS}
    return TrainState(params=params, m=m, v=v)


def row_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable row-wise softmax."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {name}")


def batch_scores(
    params: EncoderParams,
    batch: Sequence[tuple[Question | str, Table]],
    hard_negs: Sequence[Table | None] | None = None,
) -> ScoreBatch:
    """Score a batch at inference settings (no dropout).

    Gold tables must be distinct within the batch: a duplicate would make
    the identity-label cross entropy inconsistent.  Rows and columns of the
    hard-negative block belonging to questions without a mined negative are
    masked to a large negative constant so they vanish under softmax.
    """
    if len(batch) < 2:
        raise ValueError("in-batch training needs batch size >= 2")
    gold_ids = [t.table_id for _, t in batch]
    if len(set(gold_ids)) != len(gold_ids):
        raise ValueError("duplicate gold tables in one batch")
    if hard_negs is not None and len(hard_negs) != len(batch):
        raise ValueError("hard_negs must align with the batch")

    dims = params.feature_dims
    q_feats = [question_features(q, dims) for q, _ in batch]
    t_feats = [
        table_features(t, dims, params.use_structure, params.schema_only) for _, t in batch
    ]
    n_feats = None
    if hard_negs is not None:
        n_feats = [
            None
            if t is None
            else table_features(t, dims, params.use_structure, params.schema_only)
            for t in hard_negs
        ]
    S, S_hard, _, _, _ = _forward(params, q_feats, t_feats, n_feats)
    return ScoreBatch(S=S, S_hard=S_hard)


def _forward(
    params: EncoderParams,
    q_feats: Sequence[SparseVector],
    t_feats: Sequence[SparseVector],
    n_feats: Sequence[SparseVector | None] | None,
):
    Q = np.stack([project(params.q_tower, params.q_bias, f) for f in q_feats])
    T = np.stack([project(params.t_tower, params.t_bias, f) for f in t_feats])
    S = Q @ T.T
    S_hard = None
    N = None
    if n_feats is not None:
        N = np.stack(
            [
                np.zeros(params.d) if f is None else project(params.t_tower, params.t_bias, f)
                for f in n_feats
            ]
        )
        S_hard = Q @ N.T
        missing = np.array([f is None for f in n_feats], dtype=bool)
        S_hard[missing, :] = MASK_LOGIT
        S_hard[:, missing] = MASK_LOGIT
    return S, S_hard, Q, T, N


def in_batch_loss(sb: ScoreBatch) -> tuple[float, np.ndarray]:
    """Mean cross entropy of softmax rows against the identity labels.

    Returns (loss, dLoss/dS); gradient rows are (softmax - onehot)/B.
    """
    if sb.S_hard is not None:
        raise ValueError("in_batch_loss takes a batch without hard negatives")
    _check_finite("S", sb.S)
    B = sb.batch_size
    probs = row_softmax(sb.S)
    shifted = sb.S - sb.S.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs_diag = np.diag(shifted) - log_z
    loss = float(-log_probs_diag.mean())
    grad = (probs - np.eye(B)) / B
    return loss, grad


def hard_negative_loss(sb: ScoreBatch) -> tuple[float, np.ndarray, np.ndarray]:
    """Cross entropy over rows [S[i] || S_hard[i]] with the label on gold i."""
    if sb.S_hard is None:
        raise ValueError("hard_negative_loss requires S_hard")
    _check_finite("S", sb.S)
    B = sb.batch_size
    logits = np.concatenate([sb.S, sb.S_hard], axis=1)  # (B, 2B)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    gold = shifted[np.arange(B), np.arange(B)]
    loss = float(-(gold - log_z).mean())
    probs = row_softmax(logits)
    grad_full = probs.copy()
    grad_full[np.arange(B), np.arange(B)] -= 1.0
    grad_full /= B
    return loss, grad_full[:, :B], grad_full[:, B:]


def loss_and_grads(
    params: EncoderParams,
    q_feats: Sequence[SparseVector],
    t_feats: Sequence[SparseVector],
    n_feats: Sequence[SparseVector | None] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus analytic parameter gradients for one featurized batch.

    Closed forms for the linear towers: with G = dL/dS,
    dL/dW_q = (G T + G' N)^T-projected onto question features, and
    symmetrically for the table tower over gold and negative features.
    """
    S, S_hard, Q, T, N = _forward(params, q_feats, t_feats, n_feats)
    if n_feats is None:
        loss, g_s = in_batch_loss(ScoreBatch(S=S))
        g_hard = None
    else:
        loss, g_s, g_hard = hard_negative_loss(ScoreBatch(S=S, S_hard=S_hard))

    dQ = g_s @ T
    dT = g_s.T @ Q
    if g_hard is not None:
        dQ += g_hard @ N
        dN = g_hard.T @ Q
    else:
        dN = None

    grads = {k: np.zeros_like(getattr(params, k)) for k in PARAM_KEYS}
    for i, feats in enumerate(q_feats):
        if feats.nnz:
            grads["q_tower"][:, feats.indices] += np.outer(dQ[i], feats.values)
    grads["q_bias"] += dQ.sum(axis=0)
    for i, feats in enumerate(t_feats):
        if feats.nnz:
            grads["t_tower"][:, feats.indices] += np.outer(dT[i], feats.values)
    grads["t_bias"] += dT.sum(axis=0)
    if dN is not None:
        for i, feats in enumerate(n_feats):
            if feats is not None and feats.nnz:
                grads["t_tower"][:, feats.indices] += np.outer(dN[i], feats.values)
                grads["t_bias"] += dN[i]
    return loss, grads


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    t: int,
) -> None:
    """One bias-corrected Adam step, in place."""
    m *= ADAM_BETA1
    m += (1.0 - ADAM_BETA1) * grad
    v *= ADAM_BETA2
    v += (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def linear_lr_schedule(base_lr: float, warmup_steps: int, max_steps: int) -> Callable[[int], float]:
    """Linear warm-up to base_lr, then linear decay to zero at max_steps."""

    def lr(t: int) -> float:
        if warmup_steps > 0 and t <= warmup_steps:
            return base_lr * t / warmup_steps
        if max_steps <= warmup_steps:
            return base_lr
        return base_lr * max(0, max_steps - t) / (max_steps - warmup_steps)

    return lr


def apply_dropout(feats: SparseVector, rate: float, rng: np.random.Generator) -> SparseVector:
    """Inverted dropout over sparse feature entries (survivors scaled 1/(1-p))."""
    if rate <= 0.0 or feats.nnz == 0:
        return feats
    keep = rng.random(feats.nnz) >= rate
    return SparseVector(feats.indices[keep], feats.values[keep] / (1.0 - rate))


def backprop_and_step(
    state: TrainState,
    batch: Sequence[tuple[Question | str, Table]],
    hard_negs: Sequence[Table | None] | None,
    lr_schedule: Callable[[int], float],
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> TrainState:
    """Featurize, backprop through both towers, apply one Adam step."""
    params = state.params
    dims = params.feature_dims
    if dropout > 0.0 and rng is None:
        raise ValueError("dropout requires an rng")
    q_feats = [question_features(q, dims) for q, _ in batch]
    t_feats = [
        table_features(t, dims, params.use_structure, params.schema_only) for _, t in batch
    ]
    n_feats = None
    if hard_negs is not None:
        n_feats = [
            None
            if t is None
            else table_features(t, dims, params.use_structure, params.schema_only)
            for t in hard_negs
        ]
    if dropout > 0.0:
        q_feats = [apply_dropout(f, dropout, rng) for f in q_feats]
        t_feats = [apply_dropout(f, dropout, rng) for f in t_feats]
        if n_feats is not None:
            n_feats = [None if f is None else apply_dropout(f, dropout, rng) for f in n_feats]
    loss, grads = loss_and_grads(params, q_feats, t_feats, n_feats)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at step {state.step + 1}: {loss}")
    for key in PARAM_KEYS:
        _check_finite(f"grad[{key}]", grads[key])
    state.step += 1
    lr = lr_schedule(state.step)
    for key in PARAM_KEYS:
        adam_update(getattr(params, key), grads[key], state.m[key], state.v[key], lr, state.step)
    return state


def generate_ict_pairs(corpus: Corpus, per_table: int, seed: int = 0) -> list[TextTablePair]:
    """Sample text spans from table metadata, paired with their table.

    Spans are contiguous token windows of 3-12 tokens (clamped to field
    length) drawn uniformly from the page title, section title and caption.
    Tables with no usable metadata yield no pairs; duplicate span texts for
    one table are collapsed, so a table yields up to per_table pairs.
    """
    if per_table < 1:
        raise ValueError("per_table must be >= 1")
    rng = np.random.default_rng(seed)
    pairs: list[TextTablePair] = []
    for table in corpus:
        fields = []
        for raw in (table.page_title, table.section_title, table.caption):
            if raw:
                toks = tokenize(raw).tokens
                if toks:
                    fields.append(toks)
        if not fields:
            continue
        seen: set[str] = set()
        attempts = 0
        while len(seen) < per_table and attempts < per_table * 8:
            attempts += 1
            toks = fields[int(rng.integers(len(fields)))]
            want = int(rng.integers(3, 13))
            length = min(want, len(toks))
            start = int(rng.integers(0, len(toks) - length + 1))
            text = " ".join(toks[start : start + length])
            if text not in seen:
                seen.add(text)
                pairs.append(TextTablePair(text=text, table_id=table.table_id))
    return pairs


def _epoch_batches(order: np.ndarray, gold_ids: list[str], batch_size: int):
    """Full-size batches with distinct golds; conflicting items are deferred
    to the next batch and any final partial batch is dropped."""
    remaining = deque(int(i) for i in order)
    while remaining:
        batch: list[int] = []
        seen: set[str] = set()
        skipped: deque[int] = deque()
        while remaining and len(batch) < batch_size:
            i = remaining.popleft()
            gid = gold_ids[i]
            if gid in seen:
                skipped.append(i)
            else:
                batch.append(i)
                seen.add(gid)
        skipped.extend(remaining)
        remaining = skipped
        if len(batch) == batch_size:
            yield batch
        else:
            return


def dev_recall_at_10(params: EncoderParams, dev: Sequence[QAExample], corpus: Corpus) -> float:
    """Recall@10 over the dev questions against the dev-gold-tables-only corpus."""
    from .index import encode_corpus, search

    dev_tables: list[Table] = []
    seen: set[str] = set()
    scored: list[QAExample] = []
    for ex in dev:
        if ex.gold_table_id is None or ex.gold_table_id not in corpus:
            continue
        scored.append(ex)
        if ex.gold_table_id not in seen:
            seen.add(ex.gold_table_id)
            dev_tables.append(corpus[ex.gold_table_id])
    if not scored:
        return 0.0
    idx = encode_corpus(params, Corpus(dev_tables))
    hits = 0
    for ex in scored:
        h_q = project(
            params.q_tower, params.q_bias, question_features(ex.question, params.feature_dims)
        )
        top = search(idx, h_q, 10)
        if any(tid == ex.gold_table_id for tid, _ in top):
            hits += 1
    return hits / len(scored)


def train(
    state: TrainState,
    pairs: Sequence[tuple[str | Question, Table]],
    dev: Sequence[QAExample],
    corpus: Corpus,
    cfg: Config,
    negatives: Sequence[Table | None] | None = None,
    max_steps: int | None = None,
    log_path: str | Path | None = None,
) -> TrainState:
    """Run the training loop with periodic dev recall@10 early stopping.

    ``pairs`` are (query text, gold table); pre-training pairs and QA
    fine-tuning use the same loop.  Batches are drawn without replacement
    per epoch and reshuffled each epoch with the seeded generator.  The
    best-on-dev parameters are restored into the returned state.
    """
    if max_steps is None:
        max_steps = cfg.max_steps
    if max_steps == 0:
        return state
    if not pairs:
        raise ValueError("training data is empty")
    if cfg.batch_size > len(pairs):
        raise ValueError(
            f"batch size {cfg.batch_size} larger than dataset of {len(pairs)}"
        )
    if negatives is not None and len(negatives) != len(pairs):
        raise ValueError("negatives must align with pairs")

    params = state.params
    dims = params.feature_dims
    gold_ids = [t.table_id for _, t in pairs]
    q_feats_cache = [question_features(q, dims) for q, _ in pairs]
    t_feats_cache: dict[str, SparseVector] = {}
    for _, t in pairs:
        if t.table_id not in t_feats_cache:
            t_feats_cache[t.table_id] = table_features(
                t, dims, params.use_structure, params.schema_only
            )
    n_feats_cache: list[SparseVector | None] = []
    if negatives is not None:
        neg_by_id: dict[str, SparseVector] = {}
        for t in negatives:
            if t is not None and t.table_id not in neg_by_id:
                neg_by_id[t.table_id] = table_features(
                    t, dims, params.use_structure, params.schema_only
                )
        n_feats_cache = [None if t is None else neg_by_id[t.table_id] for t in negatives]

    shuffle_rng = np.random.default_rng((cfg.seed, 101))
    dropout_rng = np.random.default_rng((cfg.seed, 202))
    warmup = int(round(cfg.warmup_frac * max_steps))
    schedule = linear_lr_schedule(cfg.learning_rate, warmup, max_steps)

    best_params: EncoderParams | None = None
    log_rows: list[str] = []
    stop = False
    while state.step < max_steps and not stop:
        order = shuffle_rng.permutation(len(pairs))
        for batch_idx in _epoch_batches(order, gold_ids, cfg.batch_size):
            q_feats = [apply_dropout(q_feats_cache[i], cfg.dropout, dropout_rng) for i in batch_idx]
            t_feats = [
                apply_dropout(t_feats_cache[gold_ids[i]], cfg.dropout, dropout_rng)
                for i in batch_idx
            ]
            n_feats = None
            if negatives is not None:
                n_feats = [
                    None
                    if n_feats_cache[i] is None
                    else apply_dropout(n_feats_cache[i], cfg.dropout, dropout_rng)
                    for i in batch_idx
                ]
            loss, grads = loss_and_grads(params, q_feats, t_feats, n_feats)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {state.step + 1}")
            state.step += 1
            lr = schedule(state.step)
            for key in PARAM_KEYS:
                adam_update(
                    getattr(params, key), grads[key], state.m[key], state.v[key], lr, state.step
                )

            recall_str = ""
            if dev and state.step % cfg.eval_every == 0:
                recall = dev_recall_at_10(params, dev, corpus)
                recall_str = f"{recall:.6f}"
                if recall > state.best_dev_recall:
                    state.best_dev_recall = recall
                    state.evals_since_improvement = 0
                    best_params = params.copy()
                else:
                    state.evals_since_improvement += 1
                    if state.evals_since_improvement >= cfg.patience:
                        stop = True
            log_rows.append(f"{state.step}\t{loss:.9f}\t{recall_str}")
            if state.step >= max_steps or stop:
                break

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("step\tloss\tdev_recall10\n")
            fh.write("\n".join(log_rows) + ("\n" if log_rows else ""))
    if best_params is not None:
        state.params = best_params
    return state
