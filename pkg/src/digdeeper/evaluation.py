"""Metric battery and evaluation-run reporting.

Per lesson: hit/recall of the recommended links against the gold links,
token-matching F1, BM25, and cosine similarity between the final article
and the lesson's reference text, plus an LLM coherence score. Aggregates
are plain means over the lessons where a metric is present. An optional
breakdown classifies and scores each lesson's existing extended article by
structural category.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, Lesson, classify_dig_deeper
from .embedding import EmbeddingProvider, cosine, embed, l2_normalize
from .errors import DigDeeperError, PreconditionError, UnparsableVerdictError
from .llm import IntValueSchema, RoleHandle
from .pipeline import PipelineResult
from .text import Bm25Index, Bm25Params, bm25_relevance_metric, build_bm25_index


def hit_rate(recommended: set[str], gold: set[str]) -> tuple[int, float]:
    """Binary hit plus recall of the gold links.

    Invariant under permutation and duplication of the recommended list;
    lessons with empty gold links must be excluded before calling.
    """
    gold = set(gold)
    if not gold:
        raise PreconditionError("hit_rate needs a nonempty gold set")
    overlap = set(recommended) & gold
    recall = len(overlap) / len(gold)
    return (1 if overlap else 0), recall


@dataclass(frozen=True)
class BertScore:
    precision: float
    recall: float
    f1: float


def bert_score(candidate: str, reference: str, token_provider) -> BertScore:
    """Greedy token-matching similarity: precision/recall/F1 in [0, 1].

    Precision is the mean, over candidate tokens, of each token's best
    cosine against any reference token (negative best-matches clamp to 0 to
    keep the score in range); recall is symmetric; F1 is their harmonic
    mean. No idf weighting, no baseline rescaling.
    """
    if not getattr(token_provider, "supports_token_vectors", False):
        raise PreconditionError("provider has no token-level embedding capability")
    cand_tokens, cand_vecs = token_provider.token_vectors(candidate)
    ref_tokens, ref_vecs = token_provider.token_vectors(reference)
    if not cand_tokens or not ref_tokens:
        raise PreconditionError("both texts must be nonempty after tokenization")
    cand = np.vstack([l2_normalize(row) for row in cand_vecs]).astype(np.float64)
    ref = np.vstack([l2_normalize(row) for row in ref_vecs]).astype(np.float64)
    sims = cand @ ref.T
    precision = float(np.mean(np.clip(sims.max(axis=1), 0.0, 1.0)))
    recall = float(np.mean(np.clip(sims.max(axis=0), 0.0, 1.0)))
    f1 = 0.0 if precision + recall == 0.0 else 2.0 * precision * recall / (precision + recall)
    return BertScore(precision=precision, recall=recall, f1=f1)


def coherence_score(
    article: str,
    judge: RoleHandle,
    samples: int = 1,
    max_reasks: int = 2,
) -> float:
    """LLM judge score of an article's structure, 1-10; mean over samples.

    Out-of-range or non-integer replies trigger structured re-asks; a still
    unusable judge raises, and callers record the score as absent.
    """
    if samples < 1:
        raise PreconditionError("samples must be >= 1")
    schema = IntValueSchema(1, 10)
    scores = []
    for _ in range(samples):
        verdict = judge.complete_structured({"article": article}, schema, max_reasks)
        scores.append(verdict.parsed)
    return sum(scores) / samples


# ---------------------------------------------------------------------------
# Evaluation runs
# ---------------------------------------------------------------------------

REFERENCE_FIELDS = ("summary", "transcript", "dig_deeper_text")


@dataclass(frozen=True)
class EvalOptions:
    reference_field: str = "summary"
    normalize_bm25: bool = True
    samples: int = 1
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    include_categories: bool = False
    min_prose_words: int = 50
    max_links_for_text: int = 2
    max_reasks: int = 2

    def __post_init__(self) -> None:
        if self.reference_field not in REFERENCE_FIELDS:
            raise PreconditionError(f"unknown reference_field {self.reference_field!r}")

    def snapshot(self) -> dict:
        return {
            "reference_field": self.reference_field,
            "normalize_bm25": self.normalize_bm25,
            "samples": self.samples,
            "bm25_k1": self.bm25_k1,
            "bm25_b": self.bm25_b,
            "include_categories": self.include_categories,
            "category_min_prose_words": self.min_prose_words,
            "category_max_links_for_text": self.max_links_for_text,
            "max_reasks": self.max_reasks,
        }


@dataclass
class LessonEval:
    lesson_id: str
    hit: int | None = None
    recall_at_k: float | None = None
    bert_f1: float | None = None
    bm25: float | None = None
    cosine: float | None = None
    coherence: float | None = None
    category: str | None = None
    failures: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "lesson_id": self.lesson_id,
            "hit": self.hit,
            "recall_at_k": self.recall_at_k,
            "bert_f1": self.bert_f1,
            "bm25": self.bm25,
            "cosine": self.cosine,
            "coherence": self.coherence,
            "category": self.category,
            "failures": list(self.failures),
        }


# Maps a LessonEval attribute to its aggregate name; the binary hit mean is
# what gets labelled "hit_rate".
AGGREGATE_KEYS = (
    ("hit", "hit_rate"),
    ("recall_at_k", "recall_at_k"),
    ("bert_f1", "bert_f1"),
    ("bm25", "bm25"),
    ("cosine", "cosine"),
    ("coherence", "coherence"),
)


@dataclass
class EvalReport:
    per_lesson: list[LessonEval]
    aggregates: dict[str, float]
    config_snapshot: dict
    category_breakdown: dict[str, dict] | None = None
    coherence_failures: int = 0

    def to_dict(self) -> dict:
        obj: dict = {
            "per_lesson": [ev.to_dict() for ev in self.per_lesson],
            "aggregates": self.aggregates,
            "config_snapshot": self.config_snapshot,
            "coherence_failures": self.coherence_failures,
        }
        if self.category_breakdown is not None:
            obj["category_breakdown"] = self.category_breakdown
        return obj


def compute_aggregates(per_lesson: list[LessonEval]) -> dict[str, float]:
    """Arithmetic means per metric over the lessons where it is present."""
    aggregates: dict[str, float] = {}
    for attr, name in AGGREGATE_KEYS:
        values = [getattr(ev, attr) for ev in per_lesson if getattr(ev, attr) is not None]
        if values:
            aggregates[name] = sum(values) / len(values)
    return aggregates


def _reference_text(lesson: Lesson, reference_field: str) -> str | None:
    value = getattr(lesson, reference_field)
    return value if value else None


def _score_text(
    ev: LessonEval,
    text: str,
    reference: str,
    provider: EmbeddingProvider,
    bm25_index: Bm25Index | None,
    params: Bm25Params,
    options: EvalOptions,
    failures: list[str],
) -> None:
    """Fill bert/bm25/cosine of ``text`` against ``reference`` into ``ev``."""
    try:
        ev.cosine = cosine(embed(provider, text), embed(provider, reference))
    except DigDeeperError as exc:
        failures.append(f"cosine: {exc}")
    if bm25_index is not None:
        try:
            ev.bm25 = bm25_relevance_metric(
                text, reference, bm25_index, params, normalize=options.normalize_bm25
            )
        except DigDeeperError as exc:
            failures.append(f"bm25: {exc}")
    if getattr(provider, "supports_token_vectors", False):
        try:
            ev.bert_f1 = bert_score(text, reference, provider).f1
        except DigDeeperError as exc:
            failures.append(f"bert: {exc}")


def evaluate_run(
    results: list[PipelineResult],
    corpus: Corpus,
    provider: EmbeddingProvider,
    judge: RoleHandle | None,
    options: EvalOptions | None = None,
) -> EvalReport:
    """Score a batch of pipeline results against the corpus.

    Per-lesson metric failures are recorded on the row and never abort the
    run. BM25 statistics are computed over the reference documents of this
    evaluation set, keeping the metric self-contained.
    """
    options = options or EvalOptions()
    for result in results:
        corpus.get(result.lesson_id)  # raises UnknownLessonError

    ordered = sorted(results, key=lambda r: r.lesson_id)
    params = Bm25Params(k1=options.bm25_k1, b=options.bm25_b)
    ref_docs = {}
    for result in ordered:
        reference = _reference_text(corpus.get(result.lesson_id), options.reference_field)
        if reference:
            ref_docs[result.lesson_id] = reference
    bm25_index = build_bm25_index(ref_docs) if ref_docs else None

    per_lesson: list[LessonEval] = []
    coherence_failures = 0
    for result in ordered:
        lesson = corpus.get(result.lesson_id)
        ev = LessonEval(lesson_id=result.lesson_id)
        failures: list[str] = []

        if lesson.gold_links:
            recommended = {rec.candidate_id for rec in result.recommendations}
            ev.hit, ev.recall_at_k = hit_rate(recommended, set(lesson.gold_links))

        reference = _reference_text(lesson, options.reference_field)
        article = result.final_article
        if reference is None:
            failures.append(f"reference: lesson has no {options.reference_field}")
        elif not article:
            failures.append("article: empty final article")
        else:
            _score_text(ev, article, reference, provider, bm25_index, params, options, failures)

        if judge is not None and article:
            try:
                ev.coherence = coherence_score(
                    article, judge, samples=options.samples, max_reasks=options.max_reasks
                )
            except UnparsableVerdictError:
                coherence_failures += 1
                failures.append("coherence: judge output unusable")

        if options.include_categories and lesson.dig_deeper_text:
            ev.category = classify_dig_deeper(
                lesson.dig_deeper_text,
                min_prose_words=options.min_prose_words,
                max_links_for_text=options.max_links_for_text,
            ).value

        ev.failures = tuple(failures)
        per_lesson.append(ev)

    category_breakdown = None
    if options.include_categories:
        category_breakdown = _category_breakdown(
            ordered, corpus, provider, judge, bm25_index, params, options
        )

    snapshot = options.snapshot()
    snapshot["provider_tag"] = provider.tag
    return EvalReport(
        per_lesson=per_lesson,
        aggregates=compute_aggregates(per_lesson),
        config_snapshot=snapshot,
        category_breakdown=category_breakdown,
        coherence_failures=coherence_failures,
    )


def _category_breakdown(
    results: list[PipelineResult],
    corpus: Corpus,
    provider: EmbeddingProvider,
    judge: RoleHandle | None,
    bm25_index: Bm25Index | None,
    params: Bm25Params,
    options: EvalOptions,
) -> dict[str, dict]:
    """Score each lesson's existing extended article, grouped by category."""
    rows: dict[str, list[LessonEval]] = {}
    for result in results:
        lesson = corpus.get(result.lesson_id)
        if not lesson.dig_deeper_text:
            continue
        reference = _reference_text(lesson, options.reference_field)
        if reference is None:
            continue
        category = classify_dig_deeper(
            lesson.dig_deeper_text,
            min_prose_words=options.min_prose_words,
            max_links_for_text=options.max_links_for_text,
        ).value
        ev = LessonEval(lesson_id=lesson.id, category=category)
        failures: list[str] = []
        _score_text(
            ev, lesson.dig_deeper_text, reference, provider, bm25_index, params, options, failures
        )
        if judge is not None:
            try:
                ev.coherence = coherence_score(
                    lesson.dig_deeper_text,
                    judge,
                    samples=options.samples,
                    max_reasks=options.max_reasks,
                )
            except UnparsableVerdictError:
                failures.append("coherence: judge output unusable")
        ev.failures = tuple(failures)
        rows.setdefault(category, []).append(ev)

    breakdown: dict[str, dict] = {}
    for category in sorted(rows):
        evs = rows[category]
        entry: dict = {"count": len(evs)}
        for attr, name in AGGREGATE_KEYS:
            if attr in ("hit", "recall_at_k"):
                continue
            values = [getattr(ev, attr) for ev in evs if getattr(ev, attr) is not None]
            if values:
                entry[name] = sum(values) / len(values)
        breakdown[category] = entry
    return breakdown


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

CSV_COLUMNS = (
    "lesson_id",
    "hit",
    "recall_at_k",
    "bert_f1",
    "bm25",
    "cosine",
    "coherence",
    "category",
)


def save_report_json(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )


def save_report_csv(report: EvalReport, path: str | Path) -> None:
    """One row per lesson, one column per metric; empty cell when absent."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for ev in report.per_lesson:
            row = []
            for column in CSV_COLUMNS:
                value = getattr(ev, column)
                row.append("" if value is None else str(value))
            writer.writerow(row)


def load_report_json(path: str | Path) -> EvalReport:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    per_lesson = [
        LessonEval(
            lesson_id=row["lesson_id"],
            hit=row.get("hit"),
            recall_at_k=row.get("recall_at_k"),
            bert_f1=row.get("bert_f1"),
            bm25=row.get("bm25"),
            cosine=row.get("cosine"),
            coherence=row.get("coherence"),
            category=row.get("category"),
            failures=tuple(row.get("failures", [])),
        )
        for row in obj["per_lesson"]
    ]
    return EvalReport(
        per_lesson=per_lesson,
        aggregates=obj["aggregates"],
        config_snapshot=obj.get("config_snapshot", {}),
        category_breakdown=obj.get("category_breakdown"),
        coherence_failures=obj.get("coherence_failures", 0),
    )
