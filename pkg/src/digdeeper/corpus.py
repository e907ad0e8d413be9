"""Lesson corpus: data model, JSONL persistence, summarization, classifier.

Corpus files are JSONL: one UTF-8 object per line with keys ``id``,
``title``, ``url``, ``transcript``, optional ``summary``, optional
``dig_deeper_text``, and ``gold_links`` (array of lesson ids). Unknown keys
are preserved on rewrite. The writer emits keys in that order, one record
per line, newline terminated, so rewriting an unchanged corpus is
byte-stable.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from .errors import (
    BackendError,
    CorpusIOError,
    DuplicateIdError,
    MalformedRecordError,
    PreconditionError,
    UnknownLessonError,
)
from .llm import RoleHandle

_REQUIRED_KEYS = ("id", "title", "url", "transcript")
_KNOWN_KEYS = _REQUIRED_KEYS + ("summary", "dig_deeper_text", "gold_links")


@dataclass(frozen=True)
class Lesson:
    """One corpus record: transcript plus optional derived/site material."""

    id: str
    title: str
    url: str
    transcript: str
    summary: str | None = None
    dig_deeper_text: str | None = None
    gold_links: frozenset[str] = frozenset()
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class IngestReport:
    """Accounting for one ingest: valid/skipped records and dropped links."""

    valid: int = 0
    skipped: tuple[tuple[int, str], ...] = ()
    dropped_links: tuple[tuple[str, str], ...] = ()


class Corpus:
    """Ordered, id-indexed lesson collection; immutable after ingest."""

    def __init__(self, lessons: list[Lesson], report: IngestReport | None = None):
        self.lessons: tuple[Lesson, ...] = tuple(lessons)
        self._by_id: dict[str, Lesson] = {}
        for lesson in self.lessons:
            if lesson.id in self._by_id:
                raise DuplicateIdError(lesson.id)
            self._by_id[lesson.id] = lesson
        self.report = report or IngestReport(valid=len(self.lessons))

    @property
    def lesson_count(self) -> int:
        return len(self.lessons)

    def __len__(self) -> int:
        return len(self.lessons)

    def __iter__(self):
        return iter(self.lessons)

    def __contains__(self, lesson_id: str) -> bool:
        return lesson_id in self._by_id

    def get(self, lesson_id: str) -> Lesson:
        try:
            return self._by_id[lesson_id]
        except KeyError:
            raise UnknownLessonError(lesson_id) from None

    def ids(self) -> list[str]:
        return [lesson.id for lesson in self.lessons]

    def with_lessons(self, lessons: list[Lesson]) -> "Corpus":
        return Corpus(lessons, report=self.report)


def _parse_record(obj: object, line_no: int) -> Lesson:
    if not isinstance(obj, dict):
        raise MalformedRecordError(line_no, "record is not a JSON object")
    for key in _REQUIRED_KEYS:
        if key not in obj:
            raise MalformedRecordError(line_no, f"missing required key {key!r}")
        if not isinstance(obj[key], str) or not obj[key]:
            raise MalformedRecordError(line_no, f"key {key!r} must be a nonempty string")
    summary = obj.get("summary")
    if summary is not None and not isinstance(summary, str):
        raise MalformedRecordError(line_no, "key 'summary' must be a string")
    dig_deeper = obj.get("dig_deeper_text")
    if dig_deeper is not None and not isinstance(dig_deeper, str):
        raise MalformedRecordError(line_no, "key 'dig_deeper_text' must be a string")
    gold_raw = obj.get("gold_links", [])
    if not isinstance(gold_raw, list) or not all(isinstance(g, str) for g in gold_raw):
        raise MalformedRecordError(line_no, "key 'gold_links' must be an array of strings")
    extra = {k: v for k, v in obj.items() if k not in _KNOWN_KEYS}
    return Lesson(
        id=obj["id"],
        title=obj["title"],
        url=obj["url"],
        transcript=obj["transcript"],
        summary=summary,
        dig_deeper_text=dig_deeper,
        gold_links=frozenset(gold_raw),
        extra=extra,
    )


def ingest_corpus(path: str | Path, strict: bool = False) -> Corpus:
    """Read and validate a corpus JSONL file.

    In non-strict mode records with missing required fields are skipped and
    counted; strict mode aborts on the first malformed line. Duplicate ids
    are always fatal. ``gold_links`` entries naming unknown lessons or the
    lesson itself are dropped and reported.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise CorpusIOError(f"cannot read corpus file {path}: {exc}") from exc

    lessons: list[Lesson] = []
    seen: set[str] = set()
    skipped: list[tuple[int, str]] = []
    for line_no, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except ValueError as exc:
            err = MalformedRecordError(line_no, f"invalid JSON: {exc}")
            if strict:
                raise err from exc
            skipped.append((line_no, str(err)))
            continue
        try:
            lesson = _parse_record(obj, line_no)
        except MalformedRecordError as err:
            if strict:
                raise
            skipped.append((line_no, str(err)))
            continue
        if lesson.id in seen:
            raise DuplicateIdError(lesson.id)
        seen.add(lesson.id)
        lessons.append(lesson)

    dropped: list[tuple[str, str]] = []
    resolved: list[Lesson] = []
    for lesson in lessons:
        kept = set()
        for link in lesson.gold_links:
            if link == lesson.id or link not in seen:
                dropped.append((lesson.id, link))
            else:
                kept.add(link)
        resolved.append(replace(lesson, gold_links=frozenset(kept)))

    report = IngestReport(
        valid=len(resolved),
        skipped=tuple(skipped),
        dropped_links=tuple(sorted(dropped)),
    )
    return Corpus(resolved, report=report)


def lesson_to_dict(lesson: Lesson) -> dict:
    """Serialize one lesson with stable key order; None fields are omitted."""
    obj: dict = {
        "id": lesson.id,
        "title": lesson.title,
        "url": lesson.url,
        "transcript": lesson.transcript,
    }
    if lesson.summary is not None:
        obj["summary"] = lesson.summary
    if lesson.dig_deeper_text is not None:
        obj["dig_deeper_text"] = lesson.dig_deeper_text
    obj["gold_links"] = sorted(lesson.gold_links)
    obj.update(lesson.extra)
    return obj


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write the corpus back out as JSONL, one record per line."""
    path = Path(path)
    lines = [json.dumps(lesson_to_dict(lesson), ensure_ascii=False) for lesson in corpus]
    try:
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as exc:
        raise CorpusIOError(f"cannot write corpus file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Dig Deeper categories
# ---------------------------------------------------------------------------


class DigDeeperCategory(Enum):
    ONLY_LINKS = "OnlyLinks"
    MAINLY_TEXT = "MainlyText"
    PARAGRAPHS_WITH_LINKS = "ParagraphsWithLinks"


_INLINE_LINK_RE = re.compile(r"\[([^\]]*)\]\(([^)\s]*)\)")
_BARE_URL_RE = re.compile(r"https?://\S+")


@dataclass(frozen=True)
class LinkStats:
    prose_words: int
    link_count: int
    paragraph_count: int


def link_stats(text: str) -> LinkStats:
    """Count links, prose words, and paragraphs of an extended article.

    A link is either inline markup ``[text](url)`` or a bare http(s) token.
    Anchor text counts as prose; URLs do not.
    """
    links = len(_INLINE_LINK_RE.findall(text))
    prose = _INLINE_LINK_RE.sub(r"\1", text)
    bare = len(_BARE_URL_RE.findall(prose))
    prose = _BARE_URL_RE.sub(" ", prose)
    paragraphs = [p for p in re.split(r"\n\s*\n", text) if p.strip()]
    return LinkStats(
        prose_words=len(prose.split()),
        link_count=links + bare,
        paragraph_count=len(paragraphs),
    )


def classify_dig_deeper(
    text: str,
    *,
    min_prose_words: int = 50,
    max_links_for_text: int = 2,
) -> DigDeeperCategory:
    """Deterministically bucket an extended article into one of three shapes.

    Articles with fewer than ``min_prose_words`` words of non-link prose are
    link collections; above that, the link count separates mainly-text
    articles from paragraph discussions with provided links.
    """
    if not text:
        raise PreconditionError("cannot classify an empty text")
    stats = link_stats(text)
    if stats.prose_words < min_prose_words:
        return DigDeeperCategory.ONLY_LINKS
    if stats.link_count <= max_links_for_text:
        return DigDeeperCategory.MAINLY_TEXT
    return DigDeeperCategory.PARAGRAPHS_WITH_LINKS


# ---------------------------------------------------------------------------
# Uniform-length summarization
# ---------------------------------------------------------------------------


def word_count(text: str) -> int:
    return len(text.split())


@dataclass
class SummarizeReport:
    """Outcome of a summarization run over a corpus."""

    corpus: Corpus
    summarized: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    out_of_band: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed


def _summarize_one(
    lesson: Lesson,
    summarizer: RoleHandle,
    target_words: int,
    max_attempts: int,
) -> tuple[str, bool]:
    """Return (summary, in_band) for one lesson; may raise BackendError."""
    lo = int(round(target_words * 0.8))
    hi = int(round(target_words * 1.2))
    # Summarizing upward would fabricate content: short transcripts pass
    # through verbatim and are flagged out-of-band.
    if word_count(lesson.transcript) < target_words:
        return lesson.transcript, False
    bindings = {
        "title": lesson.title,
        "transcript": lesson.transcript,
        "target_words": str(target_words),
        "min_words": str(lo),
        "max_words": str(hi),
    }
    suffix = ""
    summary = ""
    for _ in range(max_attempts):
        summary = summarizer.complete(bindings, user_suffix=suffix)
        count = word_count(summary)
        if lo <= count <= hi:
            return summary, True
        suffix = (
            f"\n\nYour previous reply had {count} words, outside the required "
            f"{lo}-{hi} word range. Rewrite it inside that range."
        )
    return summary, False


def summarize_corpus(
    corpus: Corpus,
    summarizer: RoleHandle,
    target_words: int = 150,
    *,
    force: bool = False,
    max_attempts: int = 3,
    parallelism: int = 1,
) -> SummarizeReport:
    """Populate every lesson's summary at a uniform target length.

    Summaries must land within +/-20% of ``target_words``; after
    ``max_attempts`` prompts the last reply is accepted and flagged
    out-of-band. Backend failures flag the lesson as failed and the run
    continues. Lessons already summarized are skipped unless ``force``.
    Transcripts, existing articles, and gold links are never touched.
    """
    if target_words < 30:
        raise PreconditionError("target_words must be >= 30")

    def work(lesson: Lesson):
        if lesson.summary is not None and not force:
            return ("skipped", lesson)
        try:
            summary, in_band = _summarize_one(lesson, summarizer, target_words, max_attempts)
        except BackendError:
            return ("failed", lesson)
        status = "summarized" if in_band else "out_of_band"
        return (status, replace(lesson, summary=summary))

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(work, corpus.lessons))
    else:
        outcomes = [work(lesson) for lesson in corpus.lessons]

    report = SummarizeReport(corpus=corpus)
    lessons: list[Lesson] = []
    for status, lesson in outcomes:  # committed in lesson order
        lessons.append(lesson)
        getattr(report, status).append(lesson.id)
    report.corpus = corpus.with_lessons(lessons)
    return report
