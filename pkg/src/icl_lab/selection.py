"""Demonstration selection: seeded random prefixes, Okapi BM25 retrieval, and a
token-recall selector.

Retrieval scoring runs over lowercased word tokens with punctuation and an
embedded stopword list removed. BM25 scores documents from an inverted
index using

    score(q, doc) = sum over query terms of idf(t) * tf * (k1 + 1) /
                    (tf + k1 * (1 - b + b * len / avglen))
    idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1)

Documents with no query overlap are never retrieved; short results are
filled up by seeded uniform sampling from the remaining pool. A
precomputed per-pair similarity matrix (for plugging in an external
embedding-based selector) uses the binary layout: two little-endian u32
counts (n_queries, n_docs) followed by row-major little-endian float32
scores.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import Dataset, Example
from .prompting import Tokenizer

# Embedded English function-word list (~120 entries), fixed so rankings are
# reproducible without external resources.
STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because
    been before being below between both but by can cannot could did do does
    doing down during each few for from further had has have having he her
    here hers herself him himself his how i if in into is it its itself just
    me mine more most my myself no nor not now of off on once only or other
    our ours ourselves out over own same she should so some such than that
    the their theirs them themselves then there these they this those through
    to too under until up very was we were what when where which while who
    whom why will with would you your yours yourself yourselves
    """.split()
)


def content_tokens(text: str) -> list[str]:
    """Alphanumeric tokens with stopwords removed; the retrieval vocabulary."""
    return [t for t in Tokenizer.split(text) if t not in STOPWORDS and t[0].isalnum()]


def _document_text(ex: Example, input_only: bool) -> str:
    return ex.input_text if input_only else f"{ex.input_text} {ex.label}"


def _fill_up(
    ranked: list[int], n_train: int, k: int, fill_seed: int
) -> list[int]:
    if len(ranked) >= k:
        return ranked[:k]
    taken = set(ranked)
    pool = [i for i in range(n_train) if i not in taken]
    rng = np.random.default_rng(fill_seed)
    extra = rng.choice(len(pool), size=k - len(ranked), replace=False)
    return ranked + [pool[i] for i in sorted(extra)]


def random_prefix(d: Dataset, k: int, shuffle_seed: int) -> list[Example]:
    """First ``k`` elements of the seed's training-set permutation.

    Prefix-consistent: for the same seed, the k1-demo result is a literal
    prefix of the k2-demo result whenever k1 <= k2, which is what makes the
    one-time encoding of a shared demonstration prefix possible.
    """
    if k > len(d.train):
        raise ValueError(f"k={k} exceeds training set size {len(d.train)}")
    perm = np.random.default_rng(shuffle_seed).permutation(len(d.train))
    return [d.train[i] for i in perm[:k]]


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.5
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k1 <= 0:
            raise ValueError(f"k1 must be > 0, got {self.k1}")
        if not 0 <= self.b <= 1:
            raise ValueError(f"b must be in [0, 1], got {self.b}")


class Bm25Index:
    """Okapi BM25 over an inverted index, built once and shared read-only."""

    def __init__(self, d: Dataset, params: Bm25Params = Bm25Params(), input_only: bool = False):
        self.params = params
        self.n_docs = len(d.train)
        self.doc_lengths = np.zeros(self.n_docs, dtype=np.float64)
        self.postings: dict[str, list[tuple[int, int]]] = {}
        for doc_id, ex in enumerate(d.train):
            tokens = content_tokens(_document_text(ex, input_only))
            self.doc_lengths[doc_id] = len(tokens)
            counts: dict[str, int] = {}
            for t in tokens:
                counts[t] = counts.get(t, 0) + 1
            for t, tf in counts.items():
                self.postings.setdefault(t, []).append((doc_id, tf))
        self.avg_length = float(self.doc_lengths.mean()) if self.n_docs else 0.0

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return float(np.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0))

    def scores(self, query: str) -> np.ndarray:
        """BM25 score of every document against ``query``."""
        out = np.zeros(self.n_docs, dtype=np.float64)
        k1, b = self.params.k1, self.params.b
        for term in content_tokens(query):
            posting = self.postings.get(term)
            if not posting:
                continue
            idf = self.idf(term)
            for doc_id, tf in posting:
                norm = k1 * (1.0 - b + b * self.doc_lengths[doc_id] / self.avg_length)
                out[doc_id] += idf * tf * (k1 + 1.0) / (tf + norm)
        return out


def _top_k_positive(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k best strictly positive scores, ties by original index."""
    positive = np.flatnonzero(scores > 0.0)
    order = sorted(positive, key=lambda i: (-scores[i], i))
    return [int(i) for i in order[:k]]


def bm25_select(
    d: Dataset,
    query: str,
    k: int,
    params: Bm25Params = Bm25Params(),
    fill_seed: int = 0,
    input_only: bool = False,
    index: Bm25Index | None = None,
) -> list[Example]:
    """Top-k demonstrations by BM25; zero-overlap documents only appear as fill.

    Pass a prebuilt ``index`` when selecting for many queries against the
    same training set.
    """
    if k > len(d.train):
        raise ValueError(f"k={k} exceeds training set size {len(d.train)}")
    if index is None:
        index = Bm25Index(d, params, input_only)
    ranked = _top_k_positive(index.scores(query), k)
    chosen = _fill_up(ranked, len(d.train), k, fill_seed)
    return [d.train[i] for i in chosen]


def recall_overlap_select(
    d: Dataset, query: str, k: int, fill_seed: int = 0
) -> list[Example]:
    """Token-recall selector: |query tokens covered by the demo input| / |query tokens|.

    Set semantics over stopword-stripped tokens of the demonstration input.
    Stands in for embedding-based recall selection behind the same
    interface; use a precomputed similarity matrix for a faithful version.
    """
    if k > len(d.train):
        raise ValueError(f"k={k} exceeds training set size {len(d.train)}")
    query_tokens = set(content_tokens(query))
    scores = np.zeros(len(d.train), dtype=np.float64)
    if query_tokens:
        for doc_id, ex in enumerate(d.train):
            overlap = query_tokens & set(content_tokens(ex.input_text))
            scores[doc_id] = len(overlap) / len(query_tokens)
    ranked = _top_k_positive(scores, k)
    chosen = _fill_up(ranked, len(d.train), k, fill_seed)
    return [d.train[i] for i in chosen]


def save_similarity_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Write a (n_queries, n_docs) score matrix in the plug-in binary layout."""
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2:
        raise ValueError(f"similarity matrix must be 2-D, got ndim={matrix.ndim}")
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.astype("<f4").tobytes(order="C"))


def load_similarity_matrix(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated similarity matrix header")
    n_queries, n_docs = struct.unpack("<II", raw[:8])
    expected = 8 + 4 * n_queries * n_docs
    if len(raw) != expected:
        raise ValueError(
            f"{path}: expected {expected} bytes for {n_queries}x{n_docs} scores, got {len(raw)}"
        )
    scores = np.frombuffer(raw, dtype="<f4", offset=8).reshape(n_queries, n_docs)
    return scores.astype(np.float64)


def precomputed_select(
    d: Dataset, matrix: np.ndarray, query_index: int, k: int
) -> list[Example]:
    """Select by a row of an externally computed similarity matrix."""
    if k > len(d.train):
        raise ValueError(f"k={k} exceeds training set size {len(d.train)}")
    if matrix.shape[1] != len(d.train):
        raise ValueError(
            f"similarity matrix has {matrix.shape[1]} document columns, dataset has {len(d.train)}"
        )
    row = matrix[query_index]
    order = sorted(range(len(row)), key=lambda i: (-row[i], i))
    return [d.train[i] for i in order[:k]]
