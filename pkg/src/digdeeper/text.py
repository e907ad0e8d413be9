"""Tokenization and the BM25 index/scorer.

BM25 serves two roles here: a relevance metric between a generated article
and its reference text, and a lexical oracle in tests. The scorer uses the
nonnegative IDF variant ``ln((N - n_t + 0.5) / (n_t + 0.5) + 1)`` so that
scores stay >= 0 even for terms present in more than half the corpus.
"""

from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass, field

from .errors import DocumentNotIndexedError, UnknownDocumentError

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on any non-alphanumeric character.

    No stemming, no stopword removal; empty tokens are dropped.
    """
    return _TOKEN_RE.findall(text.lower())


def _text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Bm25Params:
    """Free parameters of the scoring function."""

    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k1 < 0:
            raise ValueError("k1 must be >= 0")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must be in [0, 1]")


@dataclass
class Bm25Index:
    """Term statistics over a document collection.

    Immutable after :func:`build_bm25_index`; safe for concurrent scoring.
    """

    doc_count: int
    avg_doc_len: float
    doc_lengths: dict[str, int]
    doc_freq: dict[str, int]
    term_freq: dict[str, Counter] = field(repr=False)
    text_keys: dict[str, str] = field(repr=False, default_factory=dict)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.doc_lengths

    def doc_id_for_text(self, text: str) -> str:
        """Look up the id under which exactly this text was indexed."""
        key = _text_key(text)
        doc_id = self.text_keys.get(key)
        if doc_id is None:
            raise DocumentNotIndexedError("reference text was not registered in the index")
        return doc_id


def build_bm25_index(docs: dict[str, str]) -> Bm25Index:
    """Index a mapping of document id -> raw text.

    Single-threaded; cheap at corpus scale (a few thousand short texts).
    """
    if not docs:
        raise ValueError("cannot build a BM25 index over zero documents")
    doc_lengths: dict[str, int] = {}
    doc_freq: Counter = Counter()
    term_freq: dict[str, Counter] = {}
    text_keys: dict[str, str] = {}
    for doc_id, text in docs.items():
        tokens = tokenize(text)
        counts = Counter(tokens)
        doc_lengths[doc_id] = len(tokens)
        term_freq[doc_id] = counts
        for term in counts:
            doc_freq[term] += 1
        text_keys[_text_key(text)] = doc_id
    n = len(doc_lengths)
    avgdl = sum(doc_lengths.values()) / n
    return Bm25Index(
        doc_count=n,
        avg_doc_len=avgdl,
        doc_lengths=doc_lengths,
        doc_freq=dict(doc_freq),
        term_freq=term_freq,
        text_keys=text_keys,
    )


def idf(index: Bm25Index, term: str) -> float:
    n_t = index.doc_freq.get(term, 0)
    return math.log((index.doc_count - n_t + 0.5) / (n_t + 0.5) + 1.0)


def bm25_score(
    index: Bm25Index,
    params: Bm25Params,
    query: list[str],
    doc_id: str,
) -> float:
    """Score one document against a query over distinct query terms.

    Duplicated query tokens score identically to a single occurrence; terms
    absent from the document contribute 0, so the result is always >= 0.
    """
    if doc_id not in index.doc_lengths:
        raise UnknownDocumentError(doc_id)
    counts = index.term_freq[doc_id]
    doc_len = index.doc_lengths[doc_id]
    length_norm = 1.0 - params.b + params.b * doc_len / index.avg_doc_len
    score = 0.0
    for term in set(query):
        tf = counts.get(term, 0)
        if tf == 0:
            continue
        score += idf(index, term) * tf * (params.k1 + 1.0) / (tf + params.k1 * length_norm)
    return score


def bm25_relevance_metric(
    article: str,
    reference: str,
    index: Bm25Index,
    params: Bm25Params | None = None,
    normalize: bool = True,
) -> float:
    """BM25 of the article's distinct tokens against an indexed reference.

    ``reference`` must be a document registered in ``index`` (looked up by
    exact text). With ``normalize`` the raw sum is divided by the number of
    distinct query terms, giving a length-controlled value.
    """
    params = params or Bm25Params()
    doc_id = index.doc_id_for_text(reference)
    query = sorted(set(tokenize(article)))
    if not query:
        return 0.0
    raw = bm25_score(index, params, query, doc_id)
    if normalize:
        return raw / len(query)
    return raw
