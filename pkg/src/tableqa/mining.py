"""Hard-negative mining from an existing retrieval run.

For each training question the ranked list is scanned top-down: the gold
table and any table containing a reference answer (a false negative) are
skipped, and the first survivor becomes the question's hard negative.
Works unchanged on lexical and dense runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .data import Corpus, QAExample, Table
from .metrics import RetrievalRun
from .text import tokenize

log = logging.getLogger(__name__)

DEFAULT_DEPTH = 100


@dataclass(frozen=True)
class MinedTriple:
    question_id: str
    gold_table_id: str
    hard_negative_table_id: str


def contains_answer(table: Table, answers: Sequence[str]) -> bool:
    """True iff an answer appears as a contiguous token run inside one cell.

    Cells (header and body) are tokenized independently, so an answer split
    across adjacent cells does not count.  Matching is on normalized tokens.
    """
    if not answers:
        raise ValueError("answers must be non-empty")
    answer_tokens = [tokenize(a).tokens for a in answers]
    answer_tokens = [toks for toks in answer_tokens if toks]
    if not answer_tokens:
        return False
    cells = list(table.header)
    for row in table.rows:
        cells.extend(row)
    for cell in cells:
        cell_tokens = tokenize(cell).tokens
        if not cell_tokens:
            continue
        for toks in answer_tokens:
            n = len(toks)
            if n > len(cell_tokens):
                continue
            for start in range(len(cell_tokens) - n + 1):
                if cell_tokens[start : start + n] == toks:
                    return True
    return False


def mine_hard_negatives(
    run: RetrievalRun,
    examples: Sequence[QAExample],
    corpus: Corpus,
    depth: int = DEFAULT_DEPTH,
) -> list[MinedTriple]:
    """One clean hard negative per question, if any exists in the top ``depth``.

    Questions whose whole prefix is gold or answer-bearing are omitted (they
    fall back to in-batch-only training).  Questions missing from the run
    are reported and skipped.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    triples: list[MinedTriple] = []
    for ex in examples:
        if ex.gold_table_id is None:
            log.warning("question %s has no gold table; skipped", ex.question_id)
            continue
        ranked = run.rankings.get(ex.question_id)
        if ranked is None:
            log.warning("question %s missing from run; skipped", ex.question_id)
            continue
        for table_id, _ in ranked[:depth]:
            if table_id == ex.gold_table_id:
                continue
            table = corpus.get(table_id)
            if table is None:
                log.warning(
                    "question %s: ranked table %s not in corpus; skipped entry",
                    ex.question_id,
                    table_id,
                )
                continue
            if contains_answer(table, ex.answers):
                continue
            triples.append(
                MinedTriple(
                    question_id=ex.question_id,
                    gold_table_id=ex.gold_table_id,
                    hard_negative_table_id=table_id,
                )
            )
            break
    return triples


def save_negatives(triples: Sequence[MinedTriple], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(f"{t.question_id}\t{t.hard_negative_table_id}\n")


def load_negatives(path: str | Path) -> dict[str, str]:
    """question_id -> hard negative table_id."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            qid, tid = line.split("\t")
            out[qid] = tid
    return out
