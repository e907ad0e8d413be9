"""digdeeper: generate extended-reading articles for video lessons.

The package turns a corpus of lesson transcripts into "dig deeper" style
extended articles in three stages (draft generation, dense retrieval plus
LLM reranking of related lessons, keyword-anchored rewrite) and evaluates
the results with hit rate, BERTScore-style token matching, BM25, cosine
similarity, and an LLM coherence judge.
"""

__version__ = "0.1.0"
