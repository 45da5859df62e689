"""Evaluation: recall@K, exact match / token F1, oracle variants, McNemar.

Run files are TSV: question_id, table_id, rank, score, tag.  Prediction
files are JSONL rows {"question_id", "table_id", "answer", "score",
"candidate_answers"}.  EM/F1 follow the SQuAD normalization: lowercase,
strip punctuation, strip the articles a/an/the, collapse whitespace.
"""

from __future__ import annotations

import json
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .data import DataFormatError, QAExample


@dataclass
class RetrievalRun:
    """Ranked (table_id, score) lists per question, score non-increasing."""

    rankings: dict[str, list[tuple[str, float]]] = field(default_factory=dict)
    tag: str = "file"

    def add(self, question_id: str, ranked: list[tuple[str, float]]) -> None:
        if question_id in self.rankings:
            raise ValueError(f"duplicate question {question_id!r} in run")
        self.rankings[question_id] = ranked

    def __len__(self) -> int:
        return len(self.rankings)


def save_run(run: RetrievalRun, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, ranked in run.rankings.items():
            for rank, (tid, score) in enumerate(ranked, start=1):
                fh.write(f"{qid}\t{tid}\t{rank}\t{score:.17g}\t{run.tag}\n")


def load_run(path: str | Path) -> RetrievalRun:
    rankings: dict[str, list[tuple[str, float]]] = {}
    tag = "file"
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataFormatError(f"{path}, line {lineno}: expected 5 columns")
            qid, tid, rank_s, score_s, tag = parts
            ranked = rankings.setdefault(qid, [])
            if int(rank_s) != len(ranked) + 1:
                raise DataFormatError(
                    f"{path}, line {lineno}: rank {rank_s} out of order for {qid!r}"
                )
            ranked.append((tid, float(score_s)))
    return RetrievalRun(rankings=rankings, tag=tag)


@dataclass
class Prediction:
    question_id: str
    table_id: str | None
    answer: str
    score: float
    candidate_answers: list[str] = field(default_factory=list)


def save_predictions(preds: Sequence[Prediction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            obj = {
                "question_id": p.question_id,
                "table_id": p.table_id,
                "answer": p.answer,
                "score": p.score,
                "candidate_answers": p.candidate_answers,
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_predictions(path: str | Path) -> list[Prediction]:
    preds = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}, line {lineno}: {exc.msg}") from exc
            preds.append(
                Prediction(
                    question_id=str(obj["question_id"]),
                    table_id=obj.get("table_id"),
                    answer=str(obj.get("answer", "")),
                    score=float(obj.get("score", 0.0)),
                    candidate_answers=[str(a) for a in obj.get("candidate_answers", [])],
                )
            )
    return preds


@dataclass
class EvalReport:
    metrics: dict[str, float]
    counts: dict[str, int]

    def to_json(self) -> str:
        return json.dumps({"metrics": self.metrics, "counts": self.counts}, indent=2, sort_keys=True)


def recall_at_k(
    run: RetrievalRun,
    examples: Sequence[QAExample],
    k: int,
    idmap: Mapping[str, str] | None = None,
) -> float:
    """Fraction of questions whose (remapped) gold table is in the top k.

    Questions absent from the run count as misses, never dropped.  An empty
    example set is undefined and raises.
    """
    if not examples:
        raise ValueError("recall is undefined for an empty example set")
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = 0
    for ex in examples:
        gold = ex.gold_table_id
        if gold is None:
            raise ValueError(f"example {ex.question_id!r} has no gold table")
        if idmap is not None:
            gold = idmap.get(gold, gold)
        ranked = run.rankings.get(ex.question_id, [])
        if any(tid == gold for tid, _ in ranked[:k]):
            hits += 1
    return hits / len(examples)


_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    """SQuAD normalization: lower, strip punctuation and articles, fix spaces."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLE_RE.sub(" ", s)
    return " ".join(s.split())


def _f1_single(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(pred_tokens)
    recall = num_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def em_f1(pred: str, golds: Sequence[str]) -> tuple[int, float]:
    """Exact match against any gold, and max token-multiset F1 over golds."""
    if not golds:
        raise ValueError("golds must be non-empty")
    norm_pred = normalize_answer(pred)
    pred_tokens = norm_pred.split()
    em = 0
    f1 = 0.0
    for gold in golds:
        norm_gold = normalize_answer(gold)
        if norm_pred == norm_gold:
            em = 1
        f1 = max(f1, _f1_single(pred_tokens, norm_gold.split()))
    return em, f1


def qa_report(
    predictions: Sequence[Prediction], examples: Sequence[QAExample]
) -> EvalReport:
    """EM/F1 on selected answers plus oracle EM/F1 over candidate answers.

    The oracle considers the selected answer alongside candidate_answers so
    oracle metrics never fall below the plain ones.  Examples without a
    prediction score zero; predictions without an example are counted and
    ignored.
    """
    if not examples:
        raise ValueError("qa_report is undefined for an empty example set")
    by_qid = {p.question_id: p for p in predictions}
    known = {ex.question_id for ex in examples}
    unmatched = sum(1 for p in predictions if p.question_id not in known)

    em_sum = f1_sum = oracle_em_sum = oracle_f1_sum = 0.0
    missing = 0
    for ex in examples:
        if not ex.answers:
            raise ValueError(f"example {ex.question_id!r} has no reference answers")
        pred = by_qid.get(ex.question_id)
        if pred is None:
            missing += 1
            continue
        em, f1 = em_f1(pred.answer, ex.answers)
        em_sum += em
        f1_sum += f1
        oracle_em, oracle_f1 = em, f1
        for cand in pred.candidate_answers:
            c_em, c_f1 = em_f1(cand, ex.answers)
            oracle_em = max(oracle_em, c_em)
            oracle_f1 = max(oracle_f1, c_f1)
        oracle_em_sum += oracle_em
        oracle_f1_sum += oracle_f1

    n = len(examples)
    return EvalReport(
        metrics={
            "em": em_sum / n,
            "f1": f1_sum / n,
            "oracle_em": oracle_em_sum / n,
            "oracle_f1": oracle_f1_sum / n,
        },
        counts={
            "num_questions": n,
            "num_missing_predictions": missing,
            "num_unmatched_predictions": unmatched,
        },
    )


def retrieval_report(
    run: RetrievalRun,
    examples: Sequence[QAExample],
    ks: Iterable[int],
    idmap: Mapping[str, str] | None = None,
) -> EvalReport:
    missing = sum(1 for ex in examples if ex.question_id not in run.rankings)
    metrics = {f"recall@{k}": recall_at_k(run, examples, k, idmap) for k in ks}
    return EvalReport(
        metrics=metrics,
        counts={"num_questions": len(examples), "num_missing_from_run": missing},
    )


def mcnemar(correct_a: Sequence[int], correct_b: Sequence[int]) -> tuple[float, float]:
    """Continuity-corrected McNemar test on paired 0/1 outcomes.

    statistic = (|b - c| - 1)^2 / (b + c) over the discordant counts;
    p is the chi-square(1) upper tail, computed as erfc(sqrt(stat / 2)).
    No discordant pairs means no evidence of difference (p = 1).
    """
    if len(correct_a) != len(correct_b):
        raise ValueError("paired outcome vectors must have equal length")
    if len(correct_a) == 0:
        raise ValueError("empty outcome vectors")
    b = sum(1 for x, y in zip(correct_a, correct_b) if x == 1 and y == 0)
    c = sum(1 for x, y in zip(correct_a, correct_b) if x == 0 and y == 1)
    if b + c == 0:
        return 0.0, 1.0
    stat = (abs(b - c) - 1) ** 2 / (b + c)
    p = math.erfc(math.sqrt(stat / 2.0))
    return stat, p
