"""Synthetic corpora with controllable retrieval difficulty.

Two generators:

* ``keyed_corpus`` -- each question shares a unique two-token key with its
  gold table (the key also appears in the gold's title, so metadata-span
  pre-training can align unseen keys); five distractor tables share exactly
  one of the two key tokens.

* ``near_duplicate_corpus`` -- each gold table has a near-duplicate twin
  differing in a single cell (the answer cell), the classic case where
  mined hard negatives should help.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Corpus, QAExample, Question, Table


@dataclass
class SynthSplits:
    corpus: Corpus
    train: list[QAExample]
    dev: list[QAExample]
    test: list[QAExample]

    @property
    def examples(self) -> list[QAExample]:
        return self.train + self.dev + self.test


def _keyed_gold_table(i: int) -> Table:
    # Title-only metadata: with one sampled span per table the span is the
    # clamped full title, so pre-training always sees both key tokens.
    k_a, k_b = f"key{i:03d}a", f"key{i:03d}b"
    return Table(
        table_id=f"T{i:03d}",
        page_title=f"{k_a} {k_b} register",
        page_version="v1",
        header=("name", "value"),
        rows=(
            (k_a, f"ans{i:03d}"),
            (k_b, f"note{i:03d}"),
        ),
    )


def _keyed_distractor_table(t: int, n_questions: int, rng: np.random.Generator) -> Table:
    # Table t carries the first key token of five consecutive questions, so
    # every question ends up with exactly five one-token-overlap distractors.
    shared = [f"key{(t + m) % n_questions:03d}a" for m in range(5)]
    noise = [f"noise{t:03d}x{rng.integers(1000):03d}" for _ in range(3)]
    rows = tuple((tok,) for tok in shared + noise)
    return Table(
        table_id=f"T{t + n_questions:03d}",
        page_title=f"omnibus listing {t:03d}",
        page_version="v1",
        header=("entry",),
        rows=rows,
    )


def keyed_corpus(
    n_questions: int = 100,
    n_tables: int = 200,
    n_dev: int = 10,
    n_test: int = 30,
    seed: int = 0,
) -> SynthSplits:
    """Separable retrieval task: unique 2-token key per (question, gold) pair."""
    if n_tables < 2 * n_questions:
        raise ValueError("need at least one distractor table per question")
    rng = np.random.default_rng(seed)
    tables = [_keyed_gold_table(i) for i in range(n_questions)]
    for t in range(n_tables - n_questions):
        tables.append(_keyed_distractor_table(t, n_questions, rng))
    corpus = Corpus(tables)

    examples = []
    for i in range(n_questions):
        examples.append(
            QAExample(
                question=Question(
                    question_id=f"q{i:03d}",
                    text=f"what value is stored under key{i:03d}a key{i:03d}b",
                ),
                gold_table_id=f"T{i:03d}",
                answers=(f"ans{i:03d}",),
            )
        )
    n_train = n_questions - n_dev - n_test
    if n_train < 1:
        raise ValueError("splits leave no training questions")
    return SynthSplits(
        corpus=corpus,
        train=examples[:n_train],
        dev=examples[n_train : n_train + n_dev],
        test=examples[n_train + n_dev :],
    )


def near_duplicate_corpus(
    n_questions: int = 40,
    n_filler: int = 20,
    seed: int = 0,
) -> SynthSplits:
    """Each gold has a twin differing only in the answer cell.

    The twin never appears as an in-batch negative (it is nobody's gold), so
    only mined hard negatives introduce a direct gold-versus-twin contrast.
    """
    rng = np.random.default_rng(seed)
    tables: list[Table] = []
    examples: list[QAExample] = []
    for i in range(n_questions):
        k_a, k_b = f"key{i:03d}a", f"key{i:03d}b"
        shared_rows = (
            ("status", f"tag{i:03d}"),
            ("owner", k_a),
            ("region", f"zone{i % 7}"),
        )
        gold_rows = shared_rows + (("amount", f"ans{i:03d}"),)
        twin_rows = shared_rows + (("amount", f"alt{i:03d}"),)
        tables.append(
            Table(
                table_id=f"G{i:03d}",
                page_title=f"ledger {k_a} {k_b}",
                page_version="v1",
                caption=f"ledger entries for {k_a}",
                header=("field", "value"),
                rows=gold_rows,
            )
        )
        tables.append(
            Table(
                table_id=f"H{i:03d}",
                page_title=f"ledger {k_a} {k_b}",
                page_version="v2",
                caption=f"ledger entries for {k_a}",
                header=("field", "value"),
                rows=twin_rows,
            )
        )
        examples.append(
            QAExample(
                question=Question(
                    question_id=f"q{i:03d}",
                    text=f"which amount is recorded as ans{i:03d} under {k_a} {k_b}",
                ),
                gold_table_id=f"G{i:03d}",
                answers=(f"ans{i:03d}",),
            )
        )
    for j in range(n_filler):
        rows = tuple(
            (f"filler{j:03d}r{k}", f"blob{rng.integers(10000):04d}") for k in range(3)
        )
        tables.append(
            Table(
                table_id=f"F{j:03d}",
                page_title=f"miscellany {j:03d}",
                page_version="v1",
                header=("item", "data"),
                rows=rows,
            )
        )
    # All questions double as training data; recall@1 is measured on them.
    return SynthSplits(corpus=Corpus(tables), train=examples, dev=list(examples), test=list(examples))


def dedup_fixture_corpus() -> tuple[Corpus, set[frozenset[str]]]:
    """Twelve tables across three pages exercising every dedup condition.

    Returns the corpus and the exact set of expected merged clusters (as
    member-id sets); everything else must stay a singleton.  Cosine values
    are constructed from integer token counts: identical pairs (1.0),
    a 0.90 pair (shared squared mass 9 vs one distinct token each),
    a same-version 0.99 pair, and a row-difference-3 pair.
    """

    def t(tid, page, version, header, rows, **kw):
        return Table(
            table_id=tid, page_title=page, page_version=version,
            header=header, rows=rows, **kw,
        )

    tables = [
        # Page p1: identical cross-version pair -> merges.
        t("A1", "p1", "v1", ("acol",), (("alpha beta",), ("gamma",))),
        t("A2", "p1", "v2", ("acol",), (("alpha beta",), ("gamma",))),
        # Page p1: cosine exactly 0.90 (not > 0.91) -> stays split.
        t("B1", "p1", "v1", ("bcol",), (("btok btok bgad bgad bone",),)),
        t("B2", "p1", "v2", ("bcol",), (("btok btok bgad bgad btwo",),)),
        # Page p2: cosine 0.99 but same page version -> stays split.
        t("C1", "p2", "v1", ("ccol",), ((" ".join(["ctok"] * 7 + ["cgad"] * 7 + ["cone"]),),)),
        t("C2", "p2", "v1", ("ccol",), ((" ".join(["ctok"] * 7 + ["cgad"] * 7 + ["ctwo"]),),)),
        # Page p2: near-identical but row counts differ by 3 -> stays split.
        t("D1", "p2", "v1", ("dcol",), tuple((("delta",),) * 5)),
        t("D2", "p2", "v2", ("dcol",), tuple((("delta",),) * 8)),
        # Page p3: another identical cross-version pair -> merges.
        t("E1", "p3", "v1", ("ecol",), (("epsilon zeta",),)),
        t("E2", "p3", "v2", ("ecol",), (("epsilon zeta",),)),
        # Page p3: unrelated singletons.
        t("F1", "p3", "v1", ("fcol",), (("foxtrot",),)),
        t("F2", "p3", "v2", ("gcol",), (("golf hotel",),)),
    ]
    expected_merges = {frozenset({"A1", "A2"}), frozenset({"E1", "E2"})}
    return Corpus(tables), expected_merges
