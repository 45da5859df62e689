"""Near-duplicate table merging across page versions.

Tables sharing a page title are flattened to unigram count vectors and
greedily merged single-link style, visiting pairs in decreasing cosine
similarity.  A pair is merge-eligible iff similarity exceeds the threshold,
the two tables come from different page versions, their row counts differ
by at most 2, and they have the same number of columns.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import Corpus, Table
from .text import SparseVector, Vocabulary, flatten_table, unigram_vector

DEFAULT_THRESHOLD = 0.91


@dataclass(frozen=True)
class DedupCluster:
    representative_id: str
    member_ids: frozenset[str]


@dataclass(frozen=True)
class MergeEdge:
    """A pair that was merged, recorded for auditing."""

    table_id_a: str
    table_id_b: str
    similarity: float


def table_content_tokens(t: Table) -> list[str]:
    """Tokens of the flattened table content (page title excluded).

    The page title is page metadata shared by every dedup candidate on the
    page, so it is left out of the similarity vectors.
    """
    return [st.token for st in flatten_table(t, "full") if st.segment != "title"]


def pairwise_cosine(u: SparseVector, v: SparseVector) -> float:
    """Cosine of two l2-normalized vectors; 0 when either is empty."""
    return u.dot(v)


def merge_eligible(a: Table, b: Table, sim: float, threshold: float = DEFAULT_THRESHOLD) -> bool:
    return (
        sim > threshold
        and a.page_version != b.page_version
        and abs(a.n_rows - b.n_rows) <= 2
        and a.n_cols == b.n_cols
    )


class _UnionFind:
    def __init__(self, items: list[str]) -> None:
        self.parent = {x: x for x in items}

    def find(self, x: str) -> str:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: str, b: str) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        # Keep the lexicographically smallest id as the root so the
        # representative falls out of the structure directly.
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return True


def cluster_page_with_log(
    tables: list[Table],
    threshold: float = DEFAULT_THRESHOLD,
    vocab: Vocabulary | None = None,
) -> tuple[list[DedupCluster], list[MergeEdge]]:
    """Single-link clustering of one page's tables, returning the merge log.

    Pairs are visited in strictly decreasing similarity; ties break on the
    lexicographic (table_id, table_id) pair so runs are deterministic.
    Eligibility is evaluated on the original pair similarity, never on
    recomputed cluster-to-cluster similarity.
    """
    pages = {t.page_title for t in tables}
    if len(pages) > 1:
        raise ValueError(f"cluster_page requires a single page, got {sorted(pages)}")
    if vocab is None:
        vocab = Vocabulary()
    by_id = {t.table_id: t for t in tables}
    if len(by_id) != len(tables):
        raise ValueError("duplicate table ids on page")
    vectors = {t.table_id: unigram_vector(table_content_tokens(t), vocab) for t in tables}

    ids = sorted(by_id)
    pairs = []
    for i, id_a in enumerate(ids):
        for id_b in ids[i + 1:]:
            sim = pairwise_cosine(vectors[id_a], vectors[id_b])
            pairs.append((sim, id_a, id_b))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))

    uf = _UnionFind(ids)
    log: list[MergeEdge] = []
    for sim, id_a, id_b in pairs:
        if merge_eligible(by_id[id_a], by_id[id_b], sim, threshold):
            if uf.union(id_a, id_b):
                log.append(MergeEdge(id_a, id_b, sim))

    members: dict[str, set[str]] = {}
    for tid in ids:
        members.setdefault(uf.find(tid), set()).add(tid)
    clusters = [
        DedupCluster(representative_id=root, member_ids=frozenset(ms))
        for root, ms in sorted(members.items())
    ]
    return clusters, log


def cluster_page(tables: list[Table], threshold: float = DEFAULT_THRESHOLD) -> list[DedupCluster]:
    return cluster_page_with_log(tables, threshold)[0]


def dedup_corpus(
    corpus: Corpus, threshold: float = DEFAULT_THRESHOLD
) -> tuple[Corpus, dict[str, str]]:
    """Merge near-duplicates page by page.

    Returns the reduced corpus (representatives only, in input order) and the
    old_id -> representative_id mapping covering every input table.  The
    unigram vocabulary is shared across the whole input set, built in
    first-seen order.
    """
    vocab = Vocabulary()
    by_page: dict[str, list[Table]] = {}
    for t in corpus:
        by_page.setdefault(t.page_title, []).append(t)

    mapping: dict[str, str] = {}
    for page_tables in by_page.values():
        clusters, _ = cluster_page_with_log(page_tables, threshold, vocab)
        for cluster in clusters:
            for member in cluster.member_ids:
                mapping[member] = cluster.representative_id

    out = Corpus(t for t in corpus if mapping[t.table_id] == t.table_id)
    return out, mapping


def remap_gold_ids(mapping: dict[str, str], gold_table_id: str | None) -> str | None:
    if gold_table_id is None:
        return None
    return mapping.get(gold_table_id, gold_table_id)


def save_idmap(mapping: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for old_id, rep_id in mapping.items():
            fh.write(f"{old_id}\t{rep_id}\n")


def load_idmap(path) -> dict[str, str]:
    mapping: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            old_id, rep_id = line.split("\t")
            mapping[old_id] = rep_id
    return mapping
