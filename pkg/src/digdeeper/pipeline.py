"""Three-stage article pipeline: draft, retrieve-and-rerank, rewrite.

Stage 1 drafts an extended article from the transcript. Stage 2 embeds the
draft, pulls a candidate pool from the dense index, and has an LLM judge
each candidate on keyword presence, relevance, and keyword-context
alignment. Stage 3 anchors each selected lesson to a keyword position in
the article and rewrites the article with the recommendation links woven
in. Ablation modes skip stage 1 (the summary becomes the working draft) or
stage 3 (links are appended as a plain list).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum

from .corpus import Corpus, Lesson, word_count
from .embedding import CandidateRanking, DenseIndex, EmbeddingProvider, embed, top_k
from .errors import PreconditionError, UnparsableVerdictError
from .llm import FieldSpec, LlmSuite, RecordListSchema, RecordSchema, RoleHandle


class Stage(Enum):
    INITIAL = "Initial"
    FINAL = "Final"


class PipelineMode(Enum):
    FULL = "full"
    SKIP_STAGE1 = "skip-stage1"
    SKIP_STAGE3 = "skip-stage3"

    @classmethod
    def parse(cls, value: str) -> "PipelineMode":
        for mode in cls:
            if mode.value == value:
                return mode
        raise PreconditionError(f"unknown pipeline mode {value!r}")


@dataclass(frozen=True)
class PipelineOptions:
    """Knobs for one pipeline run; defaults match the documented contract."""

    pool_size: int = 100
    k: int = 4
    batch_size: int = 10
    max_reasks: int = 2
    article_min_words: int = 300
    article_max_words: int = 800
    article_attempts: int = 2

    def __post_init__(self) -> None:
        if self.pool_size < 1:
            raise PreconditionError("pool_size must be >= 1")
        if self.k < 1:
            raise PreconditionError("k must be >= 1")
        if self.batch_size < 1:
            raise PreconditionError("batch_size must be >= 1")
        if self.max_reasks < 0:
            raise PreconditionError("max_reasks must be >= 0")


@dataclass(frozen=True)
class KeywordAnchor:
    """Position of a justification keyword inside an article text.

    ``start``/``end`` are byte offsets into the UTF-8 encoding of the text;
    when ``matched`` they slice to the keyword, case-insensitively.
    """

    candidate_id: str
    keyword: str
    start: int
    end: int
    matched: bool


@dataclass(frozen=True)
class RerankJudgment:
    candidate_id: str
    related_keywords: tuple[str, ...]
    keyword_match: bool
    relevance: int
    context_alignment: bool
    overall: int
    failed: bool = False


@dataclass(frozen=True)
class SelectedCandidate:
    """A reranked candidate chosen for recommendation, with its anchor keyword."""

    candidate_id: str
    title: str
    url: str
    keyword: str
    cosine_score: float
    judgment: RerankJudgment

    @property
    def link(self) -> str:
        return f"[{self.title}]({self.url})"


@dataclass(frozen=True)
class Recommendation:
    candidate_id: str
    title: str
    url: str
    anchor: KeywordAnchor
    judgment: RerankJudgment


@dataclass(frozen=True)
class ArticleDraft:
    lesson_id: str
    stage: Stage
    text: str
    anchors: tuple[KeywordAnchor, ...] = ()
    model_tag: str = ""
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.text:
            raise PreconditionError("an article draft cannot be empty")


@dataclass
class PipelineResult:
    lesson_id: str
    mode: str
    initial_article: str
    final_article: str
    recommendations: list[Recommendation]
    flags: list[str]
    trace: list[dict]

    def to_dict(self) -> dict:
        return {
            "lesson_id": self.lesson_id,
            "mode": self.mode,
            "initial_article": self.initial_article,
            "final_article": self.final_article,
            "recommendations": [
                {
                    "candidate_id": rec.candidate_id,
                    "title": rec.title,
                    "url": rec.url,
                    "keyword": rec.anchor.keyword,
                    "span": [rec.anchor.start, rec.anchor.end] if rec.anchor.matched else None,
                    "overall": rec.judgment.overall,
                    "relevance": rec.judgment.relevance,
                }
                for rec in self.recommendations
            ],
            "flags": list(self.flags),
            "trace": list(self.trace),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineResult":
        recommendations = []
        for rec in obj.get("recommendations", []):
            span = rec.get("span")
            matched = span is not None
            anchor = KeywordAnchor(
                candidate_id=rec["candidate_id"],
                keyword=rec.get("keyword", ""),
                start=span[0] if matched else 0,
                end=span[1] if matched else 0,
                matched=matched,
            )
            judgment = RerankJudgment(
                candidate_id=rec["candidate_id"],
                related_keywords=(rec.get("keyword", ""),) if rec.get("keyword") else (),
                keyword_match=matched,
                relevance=int(rec.get("relevance", 0)),
                context_alignment=False,
                overall=int(rec.get("overall", 0)),
            )
            recommendations.append(
                Recommendation(
                    candidate_id=rec["candidate_id"],
                    title=rec.get("title", ""),
                    url=rec.get("url", ""),
                    anchor=anchor,
                    judgment=judgment,
                )
            )
        return cls(
            lesson_id=obj["lesson_id"],
            mode=obj.get("mode", "full"),
            initial_article=obj.get("initial_article", ""),
            final_article=obj.get("final_article", ""),
            recommendations=recommendations,
            flags=list(obj.get("flags", [])),
            trace=list(obj.get("trace", [])),
        )


# ---------------------------------------------------------------------------
# Stage 1: initial article
# ---------------------------------------------------------------------------


def generate_initial_article(
    lesson: Lesson,
    generator: RoleHandle,
    options: PipelineOptions | None = None,
    trace: list[dict] | None = None,
) -> ArticleDraft:
    """Draft an extended reading article centered on the transcript's topic.

    The word count is pushed into ``[article_min_words, article_max_words]``
    by re-prompting; after ``article_attempts`` tries the last draft is
    accepted and flagged.
    """
    options = options or PipelineOptions()
    if not lesson.transcript:
        raise PreconditionError(f"lesson {lesson.id!r} has an empty transcript")
    bindings = {
        "title": lesson.title,
        "transcript": lesson.transcript,
        "min_words": str(options.article_min_words),
        "max_words": str(options.article_max_words),
    }
    suffix = ""
    text = ""
    flags: tuple[str, ...] = ()
    for _ in range(options.article_attempts):
        text = generator.complete(bindings, user_suffix=suffix)
        if trace is not None:
            trace.append({"call": "stage1_generate", "model": generator.backend.tag, "attempts": 1})
        count = word_count(text)
        if options.article_min_words <= count <= options.article_max_words:
            flags = ()
            break
        suffix = (
            f"\n\nYour previous draft had {count} words; it must have between "
            f"{options.article_min_words} and {options.article_max_words} words."
        )
        side = "under" if count < options.article_min_words else "over"
        flags = (f"initial_draft_{side}_length",)
    return ArticleDraft(
        lesson_id=lesson.id,
        stage=Stage.INITIAL,
        text=text,
        model_tag=generator.backend.tag,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# Stage 2: retrieval and reranking
# ---------------------------------------------------------------------------


def retrieve_candidates(
    draft_text: str,
    index: DenseIndex,
    provider: EmbeddingProvider,
    pool_size: int,
    source_lesson: str,
    trace: list[dict] | None = None,
) -> CandidateRanking:
    """Embed the draft and take the top-``pool_size`` lessons, source excluded."""
    if pool_size < 1:
        raise PreconditionError("pool_size must be >= 1")
    query = embed(provider, draft_text)
    if trace is not None:
        trace.append({"call": "embed_query", "model": provider.tag, "attempts": 1})
    ranking = top_k(index, query, pool_size, source_lesson=source_lesson)
    if trace is not None:
        trace.append({"call": "retrieve_candidates", "pool": ranking.ids()})
    return ranking


def _judgment_record_schema() -> RecordSchema:
    def keywords_consistent(rec: dict) -> str | None:
        if rec["keyword_match"] and not rec["related_keywords"]:
            return "related_keywords must be nonempty when keyword_match is true"
        if any(not kw.strip() for kw in rec["related_keywords"]):
            return "related_keywords entries must be nonempty strings"
        return None

    return RecordSchema(
        fields=(
            FieldSpec("candidate_id", "str"),
            FieldSpec("related_keywords", "str_list"),
            FieldSpec("keyword_match", "bool"),
            FieldSpec("relevance", "int", minimum=0, maximum=10),
            FieldSpec("context_alignment", "bool"),
            FieldSpec("overall", "int", minimum=0, maximum=10),
        ),
        checks=(keywords_consistent,),
    )


def rerank_schema(batch_ids: list[str]) -> RecordListSchema:
    """Schema for one reranker reply: exactly one record per candidate."""
    return RecordListSchema(
        item=_judgment_record_schema(),
        wrapper_key="judgments",
        key_field="candidate_id",
        expected_keys=tuple(batch_ids),
    )


def _candidate_payload(corpus: Corpus, candidate_id: str) -> dict:
    lesson = corpus.get(candidate_id)
    summary = lesson.summary or " ".join(lesson.transcript.split()[:60])
    return {"candidate_id": candidate_id, "title": lesson.title, "summary": summary}


def _judgment_from(record: dict) -> RerankJudgment:
    return RerankJudgment(
        candidate_id=record["candidate_id"],
        related_keywords=tuple(record["related_keywords"]),
        keyword_match=record["keyword_match"],
        relevance=record["relevance"],
        context_alignment=record["context_alignment"],
        overall=record["overall"],
    )


def _failed_judgment(candidate_id: str) -> RerankJudgment:
    return RerankJudgment(
        candidate_id=candidate_id,
        related_keywords=(),
        keyword_match=False,
        relevance=0,
        context_alignment=False,
        overall=0,
        failed=True,
    )


def rerank(
    draft: ArticleDraft,
    candidates: CandidateRanking,
    corpus: Corpus,
    reranker: RoleHandle,
    *,
    batch_size: int = 10,
    max_reasks: int = 2,
    trace: list[dict] | None = None,
) -> list[RerankJudgment]:
    """Judge every candidate in batches; order follows the candidate order.

    A batch whose reply never validates is retried per-candidate once; a
    candidate that still fails gets a ``failed`` judgment, which excludes it
    from selection but never aborts the run.
    """
    if not candidates.entries:
        raise PreconditionError("candidates must be nonempty")
    judgments: list[RerankJudgment] = []
    ids = candidates.ids()
    for start in range(0, len(ids), batch_size):
        batch_ids = ids[start : start + batch_size]
        payload = json.dumps(
            [_candidate_payload(corpus, cid) for cid in batch_ids], ensure_ascii=False
        )
        bindings = {"article": draft.text, "candidates": payload}
        try:
            verdict = reranker.complete_structured(bindings, rerank_schema(batch_ids), max_reasks)
            if trace is not None:
                trace.append(
                    {
                        "call": "rerank_batch",
                        "model": reranker.backend.tag,
                        "attempts": verdict.parse_attempts,
                        "batch": batch_ids,
                    }
                )
            by_id = {rec["candidate_id"]: rec for rec in verdict.parsed}
            judgments.extend(_judgment_from(by_id[cid]) for cid in batch_ids)
        except UnparsableVerdictError:
            if trace is not None:
                trace.append(
                    {
                        "call": "rerank_batch_failed",
                        "model": reranker.backend.tag,
                        "attempts": max_reasks + 1,
                        "batch": batch_ids,
                    }
                )
            for cid in batch_ids:
                single = json.dumps([_candidate_payload(corpus, cid)], ensure_ascii=False)
                try:
                    verdict = reranker.complete_structured(
                        {"article": draft.text, "candidates": single},
                        rerank_schema([cid]),
                        max_reasks=0,
                    )
                    judgments.append(_judgment_from(verdict.parsed[0]))
                except UnparsableVerdictError:
                    judgments.append(_failed_judgment(cid))
                if trace is not None:
                    trace.append(
                        {
                            "call": "rerank_single",
                            "model": reranker.backend.tag,
                            "attempts": 1,
                            "batch": [cid],
                        }
                    )
    return judgments


def select_recommendations(
    judgments: list[RerankJudgment],
    ranking: CandidateRanking,
    corpus: Corpus,
    k: int = 4,
) -> list[SelectedCandidate]:
    """Pick the top-k non-failed judgments.

    Sort order: overall score descending, then cosine descending, then id
    ascending — a total order, so the selection is independent of the
    judgment input order. The anchor keyword is the judgment's first
    related keyword, falling back to the lesson title.
    """
    if k < 1:
        raise PreconditionError("k must be >= 1")
    cosines = dict(ranking.entries)
    alive = [j for j in judgments if not j.failed]
    ordered = sorted(
        alive,
        key=lambda j: (-j.overall, -cosines.get(j.candidate_id, -2.0), j.candidate_id),
    )
    selections = []
    for judgment in ordered[:k]:
        lesson = corpus.get(judgment.candidate_id)
        keyword = judgment.related_keywords[0] if judgment.related_keywords else lesson.title
        selections.append(
            SelectedCandidate(
                candidate_id=judgment.candidate_id,
                title=lesson.title,
                url=lesson.url,
                keyword=keyword,
                cosine_score=cosines.get(judgment.candidate_id, 0.0),
                judgment=judgment,
            )
        )
    return selections


# ---------------------------------------------------------------------------
# Stage 3: keyword anchoring and rewrite
# ---------------------------------------------------------------------------


def _byte_offset(text: str, char_index: int) -> int:
    return len(text[:char_index].encode("utf-8"))


def anchor_keywords(
    draft_text: str, selections: list[SelectedCandidate]
) -> list[KeywordAnchor]:
    """Locate each selection's keyword in the text, whole-word, first hit.

    Keywords that never occur yield ``matched=False`` anchors; the rewrite
    prompt is told to introduce them.
    """
    anchors = []
    for selection in selections:
        if not selection.keyword.strip():
            anchors.append(
                KeywordAnchor(selection.candidate_id, selection.keyword, 0, 0, matched=False)
            )
            continue
        pattern = re.compile(
            r"(?<!\w)" + re.escape(selection.keyword) + r"(?!\w)",
            re.IGNORECASE | re.UNICODE,
        )
        match = pattern.search(draft_text)
        if match is None:
            anchors.append(
                KeywordAnchor(selection.candidate_id, selection.keyword, 0, 0, matched=False)
            )
        else:
            anchors.append(
                KeywordAnchor(
                    selection.candidate_id,
                    selection.keyword,
                    _byte_offset(draft_text, match.start()),
                    _byte_offset(draft_text, match.end()),
                    matched=True,
                )
            )
    return anchors


def link_block(selections: list[SelectedCandidate], heading: str) -> str:
    lines = [heading, ""]
    lines.extend(f"- {selection.link}" for selection in selections)
    return "\n".join(lines)


def generate_final_article(
    draft: ArticleDraft,
    selections: list[SelectedCandidate],
    rewriter: RoleHandle,
    trace: list[dict] | None = None,
) -> ArticleDraft:
    """Rewrite the draft so every recommendation is linked inline.

    The rewrite is validated mechanically (each ``[title](url)`` present
    exactly once) with one corrective re-prompt; links still missing after
    that are appended in a trailing "Further viewing" list and flagged.
    """
    recs_payload = json.dumps(
        [
            {"keyword": sel.keyword, "title": sel.title, "url": sel.url}
            for sel in selections
        ],
        ensure_ascii=False,
    )
    bindings = {"article": draft.text, "recommendations": recs_payload}
    flags: list[str] = []

    text = rewriter.complete(bindings)
    if trace is not None:
        trace.append({"call": "stage3_rewrite", "model": rewriter.backend.tag, "attempts": 1})

    def link_problems(candidate_text: str) -> list[SelectedCandidate]:
        return [sel for sel in selections if candidate_text.count(sel.link) != 1]

    problems = link_problems(text)
    if problems:
        listing = ", ".join(sel.link for sel in problems)
        text = rewriter.complete(
            bindings,
            user_suffix=(
                "\n\nYour previous rewrite did not include each of these links exactly "
                f"once: {listing}. Rewrite the article again with every link present "
                "exactly once."
            ),
        )
        if trace is not None:
            trace.append({"call": "stage3_rewrite", "model": rewriter.backend.tag, "attempts": 1})
        problems = link_problems(text)

    missing = [sel for sel in problems if text.count(sel.link) == 0]
    duplicated = [sel for sel in problems if text.count(sel.link) > 1]
    if missing:
        text = text + "\n\n" + link_block(missing, "Further viewing:")
        flags.append("missing_links_appended")
    for sel in duplicated:
        flags.append(f"duplicate_link:{sel.candidate_id}")

    return ArticleDraft(
        lesson_id=draft.lesson_id,
        stage=Stage.FINAL,
        text=text,
        anchors=tuple(anchor_keywords(text, selections)),
        model_tag=rewriter.backend.tag,
        flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def _recommendations_for(
    final_text: str, selections: list[SelectedCandidate]
) -> list[Recommendation]:
    anchors = anchor_keywords(final_text, selections)
    return [
        Recommendation(
            candidate_id=sel.candidate_id,
            title=sel.title,
            url=sel.url,
            anchor=anchor,
            judgment=sel.judgment,
        )
        for sel, anchor in zip(selections, anchors)
    ]


def run_pipeline(
    lesson: Lesson,
    corpus: Corpus,
    index: DenseIndex,
    suite: LlmSuite,
    provider: EmbeddingProvider,
    options: PipelineOptions | None = None,
    mode: PipelineMode = PipelineMode.FULL,
) -> PipelineResult:
    """Run one lesson through the selected pipeline mode end to end."""
    options = options or PipelineOptions()
    trace: list[dict] = []
    flags: list[str] = []

    if mode is PipelineMode.SKIP_STAGE1:
        if not lesson.summary:
            raise PreconditionError(
                f"mode {mode.value} needs a summary for lesson {lesson.id!r}"
            )
        initial = ArticleDraft(
            lesson_id=lesson.id,
            stage=Stage.INITIAL,
            text=lesson.summary,
            model_tag="none",
            flags=("stage1_skipped",),
        )
    else:
        initial = generate_initial_article(lesson, suite.generator, options, trace)
    flags.extend(initial.flags)

    ranking = retrieve_candidates(
        initial.text, index, provider, options.pool_size, lesson.id, trace
    )

    if ranking.entries:
        judgments = rerank(
            initial,
            ranking,
            corpus,
            suite.reranker,
            batch_size=options.batch_size,
            max_reasks=options.max_reasks,
            trace=trace,
        )
        if all(j.failed for j in judgments):
            flags.append("all_candidates_failed")
    else:
        judgments = []
        flags.append("no_candidates")

    selections = select_recommendations(judgments, ranking, corpus, options.k)

    if mode is PipelineMode.SKIP_STAGE3:
        if selections:
            final_text = initial.text + "\n\n" + link_block(selections, "Related lessons:")
        else:
            final_text = initial.text
        final = ArticleDraft(
            lesson_id=lesson.id,
            stage=Stage.FINAL,
            text=final_text,
            anchors=tuple(anchor_keywords(final_text, selections)),
            model_tag="none",
            flags=("stage3_skipped",),
        )
    else:
        final = generate_final_article(initial, selections, suite.rewriter, trace)
    flags.extend(final.flags)

    return PipelineResult(
        lesson_id=lesson.id,
        mode=mode.value,
        initial_article=initial.text,
        final_article=final.text,
        recommendations=_recommendations_for(final.text, selections),
        flags=flags,
        trace=trace,
    )
