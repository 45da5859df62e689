"""Core data model: tables, questions, corpora, and their JSONL serialization.

File formats (one JSON object per line):

tables.jsonl
    {"table_id": str, "page_title": str, "page_version": str,
     "section_title": str|null, "caption": str|null,
     "header": [str], "rows": [[str]], "is_infobox": bool}

questions.jsonl
    {"question_id": str, "text": str, "gold_table_id": str|null,
     "answers": [str]}

pairs.jsonl
    {"text": str, "table_id": str}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator


class DataFormatError(ValueError):
    """Raised when an input file violates the documented schema."""


@dataclass(frozen=True)
class Table:
    """A structured cell grid plus page metadata; the retrieval unit.

    Every row must have exactly ``len(header)`` cells and the header must be
    non-empty.  ``page_version`` is an opaque revision identifier supplied by
    the ingester; equality of (page_title, page_version) defines "same page
    version" for deduplication.
    """

    table_id: str
    page_title: str
    page_version: str
    header: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]
    section_title: str | None = None
    caption: str | None = None
    is_infobox: bool = False

    def __post_init__(self) -> None:
        if not self.header:
            raise DataFormatError(f"table {self.table_id!r}: header is empty")
        for i, row in enumerate(self.rows):
            if len(row) != len(self.header):
                raise DataFormatError(
                    f"table {self.table_id!r}: row {i} has {len(row)} cells, "
                    f"expected {len(self.header)}"
                )

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_cols(self) -> int:
        return len(self.header)


@dataclass(frozen=True)
class Question:
    question_id: str
    text: str


@dataclass(frozen=True)
class QAExample:
    """A question paired with its reference table and answer strings.

    ``gold_table_id`` may be None for unlabeled (retrieval-only) rows;
    consumers that need the gold table or answers validate at point of use.
    """

    question: Question
    gold_table_id: str | None
    answers: tuple[str, ...] = ()

    @property
    def question_id(self) -> str:
        return self.question.question_id


@dataclass(frozen=True)
class TextTablePair:
    """A text span paired with the table it was sampled from (pre-training)."""

    text: str
    table_id: str

    def __post_init__(self) -> None:
        if not self.text:
            raise DataFormatError("pair text is empty")


class Corpus:
    """Id-keyed table collection with stable, file-order iteration."""

    def __init__(self, tables: Iterator[Table] | list[Table] = ()) -> None:
        self._tables: dict[str, Table] = {}
        for t in tables:
            self.add(t)

    def add(self, t: Table) -> None:
        if t.table_id in self._tables:
            raise DataFormatError(f"duplicate table_id {t.table_id!r}")
        self._tables[t.table_id] = t

    def __len__(self) -> int:
        return len(self._tables)

    def __iter__(self) -> Iterator[Table]:
        return iter(self._tables.values())

    def __contains__(self, table_id: str) -> bool:
        return table_id in self._tables

    def __getitem__(self, table_id: str) -> Table:
        return self._tables[table_id]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return list(self) == list(other)

    def ids(self) -> list[str]:
        return list(self._tables)

    def get(self, table_id: str) -> Table | None:
        return self._tables.get(table_id)


def table_from_json(obj: dict, where: str = "") -> Table:
    try:
        return Table(
            table_id=str(obj["table_id"]),
            page_title=str(obj["page_title"]),
            page_version=str(obj["page_version"]),
            section_title=obj.get("section_title"),
            caption=obj.get("caption"),
            header=tuple(str(h) for h in obj["header"]),
            rows=tuple(tuple(str(c) for c in row) for row in obj["rows"]),
            is_infobox=bool(obj.get("is_infobox", False)),
        )
    except KeyError as exc:
        raise DataFormatError(f"{where}missing field {exc.args[0]!r}") from exc


def table_to_json(t: Table) -> dict:
    return {
        "table_id": t.table_id,
        "page_title": t.page_title,
        "page_version": t.page_version,
        "section_title": t.section_title,
        "caption": t.caption,
        "header": list(t.header),
        "rows": [list(r) for r in t.rows],
        "is_infobox": t.is_infobox,
    }


def _iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}, line {lineno}: {exc.msg}") from exc
            yield lineno, obj


def load_corpus(path: str | Path) -> Corpus:
    """Load a tables.jsonl file; errors carry the offending line number."""
    corpus = Corpus()
    for lineno, obj in _iter_jsonl(path):
        try:
            corpus.add(table_from_json(obj, where=f"line {lineno}: "))
        except DataFormatError as exc:
            raise DataFormatError(f"{path}, line {lineno}: {exc}") from exc
    return corpus


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in corpus:
            fh.write(json.dumps(table_to_json(t), ensure_ascii=False) + "\n")


def load_examples(path: str | Path) -> list[QAExample]:
    """Load a questions.jsonl file."""
    out = []
    for lineno, obj in _iter_jsonl(path):
        try:
            q = Question(question_id=str(obj["question_id"]), text=str(obj["text"]))
        except KeyError as exc:
            raise DataFormatError(
                f"{path}, line {lineno}: missing field {exc.args[0]!r}"
            ) from exc
        gold = obj.get("gold_table_id")
        answers = tuple(str(a) for a in obj.get("answers", []))
        out.append(QAExample(question=q, gold_table_id=gold, answers=answers))
    return out


def save_examples(examples: list[QAExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            obj = {
                "question_id": ex.question.question_id,
                "text": ex.question.text,
                "gold_table_id": ex.gold_table_id,
                "answers": list(ex.answers),
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_pairs(path: str | Path) -> list[TextTablePair]:
    out = []
    for lineno, obj in _iter_jsonl(path):
        try:
            out.append(TextTablePair(text=str(obj["text"]), table_id=str(obj["table_id"])))
        except KeyError as exc:
            raise DataFormatError(
                f"{path}, line {lineno}: missing field {exc.args[0]!r}"
            ) from exc
    return out


def save_pairs(pairs: list[TextTablePair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"text": p.text, "table_id": p.table_id}, ensure_ascii=False) + "\n")


def normalize_table(t: Table) -> Table:
    """Transpose an infobox table so its key column becomes the header.

    Non-infobox tables are returned unchanged.  For an infobox, the first
    column holds the field names; it is promoted to the header and each
    remaining original column becomes one data row.  The output has
    ``is_infobox=False`` so the operation is idempotent.
    """
    if not t.is_infobox:
        return t
    if not t.rows:
        raise DataFormatError(
            f"table {t.table_id!r}: infobox with no rows cannot be transposed"
        )
    new_header = tuple(row[0] for row in t.rows)
    new_rows = tuple(
        tuple(row[j] for row in t.rows) for j in range(1, len(t.header))
    )
    return replace(t, header=new_header, rows=new_rows, is_infobox=False)
