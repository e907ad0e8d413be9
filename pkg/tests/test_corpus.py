import json

import pytest

from digdeeper.corpus import (
    DigDeeperCategory,
    classify_dig_deeper,
    ingest_corpus,
    link_stats,
    summarize_corpus,
    word_count,
    write_corpus,
)
from digdeeper.errors import (
    CorpusIOError,
    DuplicateIdError,
    MalformedRecordError,
    PreconditionError,
)

from conftest import FailingChatBackend
from digdeeper.llm import RoleHandle


def record(lesson_id, transcript="some transcript text", **overrides):
    obj = {
        "id": lesson_id,
        "title": f"Lesson {lesson_id}",
        "url": f"https://lessons.example.org/{lesson_id}",
        "transcript": transcript,
        "gold_links": [],
    }
    obj.update(overrides)
    return obj


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


class TestIngest:
    def test_counts_valid_records(self, tmp_path):
        path = write_jsonl(tmp_path / "c.jsonl", [record("a"), record("b"), record("c")])
        corpus = ingest_corpus(path)
        assert corpus.lesson_count == 3
        assert corpus.ids() == ["a", "b", "c"]

    def test_skips_and_reports_missing_field(self, tmp_path):
        bad = record("b")
        del bad["transcript"]
        path = write_jsonl(tmp_path / "c.jsonl", [record("a"), bad, record("c")])
        corpus = ingest_corpus(path, strict=False)
        assert corpus.lesson_count == 2
        assert len(corpus.report.skipped) == 1
        assert "transcript" in corpus.report.skipped[0][1]

    def test_strict_mode_aborts(self, tmp_path):
        bad = record("b")
        del bad["transcript"]
        path = write_jsonl(tmp_path / "c.jsonl", [record("a"), bad])
        with pytest.raises(MalformedRecordError):
            ingest_corpus(path, strict=True)

    def test_duplicate_id_always_fatal(self, tmp_path):
        path = write_jsonl(tmp_path / "c.jsonl", [record("L1"), record("L1")])
        with pytest.raises(DuplicateIdError) as excinfo:
            ingest_corpus(path)
        assert excinfo.value.lesson_id == "L1"

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(CorpusIOError):
            ingest_corpus(tmp_path / "missing.jsonl")

    def test_invalid_json_line(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps(record("a")) + "\n{not json\n", encoding="utf-8")
        corpus = ingest_corpus(path)
        assert corpus.lesson_count == 1
        assert len(corpus.report.skipped) == 1

    def test_unknown_gold_links_dropped_with_report(self, tmp_path):
        path = write_jsonl(
            tmp_path / "c.jsonl",
            [record("a", gold_links=["b", "ghost"]), record("b", gold_links=["b"])],
        )
        corpus = ingest_corpus(path)
        assert corpus.get("a").gold_links == frozenset({"b"})
        assert corpus.get("b").gold_links == frozenset()  # self-link dropped
        assert ("a", "ghost") in corpus.report.dropped_links
        assert ("b", "b") in corpus.report.dropped_links

    def test_counts_partition_input_records(self, tmp_path):
        bad = record("x")
        del bad["title"]
        records = [record("a"), bad, record("b")]
        path = write_jsonl(tmp_path / "c.jsonl", records)
        corpus = ingest_corpus(path)
        assert corpus.report.valid + len(corpus.report.skipped) == len(records)


class TestRoundtrip:
    def test_ingest_write_ingest_is_identity(self, tmp_path):
        path = write_jsonl(
            tmp_path / "c.jsonl",
            [
                record("a", summary="short summary", gold_links=["b"]),
                record("b", dig_deeper_text="read [x](https://e.org/x)", custom_key=42),
            ],
        )
        first = ingest_corpus(path)
        out = tmp_path / "out.jsonl"
        write_corpus(first, out)
        second = ingest_corpus(out)
        assert first.lessons == second.lessons

    def test_unknown_keys_preserved(self, tmp_path):
        path = write_jsonl(tmp_path / "c.jsonl", [record("a", custom_key={"nested": 1})])
        out = tmp_path / "out.jsonl"
        write_corpus(ingest_corpus(path), out)
        reparsed = json.loads(out.read_text().splitlines()[0])
        assert reparsed["custom_key"] == {"nested": 1}

    def test_writer_emits_documented_key_order(self, tmp_path):
        path = write_jsonl(
            tmp_path / "c.jsonl", [record("a", summary="s", dig_deeper_text="d")]
        )
        out = tmp_path / "out.jsonl"
        write_corpus(ingest_corpus(path), out)
        keys = list(json.loads(out.read_text().splitlines()[0]))
        assert keys == ["id", "title", "url", "transcript", "summary", "dig_deeper_text", "gold_links"]

    def test_rewrite_is_byte_stable(self, tmp_path):
        path = write_jsonl(tmp_path / "c.jsonl", [record("a", gold_links=[]), record("b")])
        out1, out2 = tmp_path / "o1.jsonl", tmp_path / "o2.jsonl"
        write_corpus(ingest_corpus(path), out1)
        write_corpus(ingest_corpus(out1), out2)
        assert out1.read_bytes() == out2.read_bytes()


class TestClassifier:
    def test_only_links(self):
        text = "Watch these: [A](https://e.org/a) [B](https://e.org/b)"
        assert classify_dig_deeper(text) is DigDeeperCategory.ONLY_LINKS

    def test_mainly_text(self):
        essay = " ".join(["word"] * 300) + " see [one](https://e.org/one)"
        assert classify_dig_deeper(essay) is DigDeeperCategory.MAINLY_TEXT

    def test_paragraphs_with_links(self):
        paragraph = " ".join(["prose"] * 70)
        links = " ".join(f"[l{i}](https://e.org/{i})" for i in range(5))
        text = f"{paragraph}\n\n{paragraph}\n\n{paragraph} {links}"
        assert classify_dig_deeper(text) is DigDeeperCategory.PARAGRAPHS_WITH_LINKS

    def test_pure(self):
        text = "Watch these: [A](https://e.org/a) [B](https://e.org/b)"
        assert classify_dig_deeper(text) is classify_dig_deeper(text)

    def test_empty_text_rejected(self):
        with pytest.raises(PreconditionError):
            classify_dig_deeper("")

    def test_bare_urls_count_as_links(self):
        stats = link_stats("go to https://e.org/a and https://e.org/b now")
        assert stats.link_count == 2
        assert stats.prose_words == 4

    def test_anchor_text_counts_as_prose(self):
        stats = link_stats("[five whole words of prose](https://e.org/x)")
        assert stats.link_count == 1
        assert stats.prose_words == 5

    def test_paragraph_count(self):
        assert link_stats("a\n\nb\n\n\nc").paragraph_count == 3

    def test_thresholds_configurable(self):
        text = " ".join(["w"] * 40)
        assert classify_dig_deeper(text, min_prose_words=30) is DigDeeperCategory.MAINLY_TEXT


def make_corpus(tmp_path, transcripts, summaries=None):
    records = []
    for i, transcript in enumerate(transcripts):
        overrides = {}
        if summaries and summaries[i] is not None:
            overrides["summary"] = summaries[i]
        records.append(record(f"L{i}", transcript=transcript, **overrides))
    return ingest_corpus(write_jsonl(tmp_path / "c.jsonl", records))


def long_transcript(n=130):
    return " ".join(f"word{i % 13} topic{i % 7}" for i in range(n // 2 + 1))


class TestSummarize:
    def test_mock_summaries_land_in_band(self, tmp_path, mock_suite):
        corpus = make_corpus(tmp_path, [long_transcript(), long_transcript()])
        report = summarize_corpus(corpus, mock_suite.summarizer, target_words=100)
        assert report.failed == []
        assert report.out_of_band == []
        for lesson in report.corpus:
            assert 80 <= word_count(lesson.summary) <= 120

    def test_short_transcript_passes_through_flagged(self, tmp_path, mock_suite):
        corpus = make_corpus(tmp_path, ["only ten words live in this very short transcript here"])
        report = summarize_corpus(corpus, mock_suite.summarizer, target_words=100)
        assert report.out_of_band == ["L0"]
        assert report.failed == []
        assert report.corpus.get("L0").summary == corpus.get("L0").transcript

    def test_backend_failure_flags_lesson_and_continues(self, tmp_path, mock_suite):
        corpus = make_corpus(tmp_path, [long_transcript(), long_transcript()])
        summarizer = RoleHandle(
            role="summarizer",
            backend=FailingChatBackend(),
            template=mock_suite.summarizer.template,
            settings=mock_suite.summarizer.settings,
        )
        report = summarize_corpus(corpus, summarizer, target_words=100)
        assert report.failed == ["L0", "L1"]
        assert all(lesson.summary is None for lesson in report.corpus)

    def test_already_summarized_skipped_unless_forced(self, tmp_path, mock_suite):
        corpus = make_corpus(tmp_path, [long_transcript()], summaries=["existing words here"])
        report = summarize_corpus(corpus, mock_suite.summarizer, target_words=100)
        assert report.skipped == ["L0"]
        assert report.corpus.get("L0").summary == "existing words here"
        forced = summarize_corpus(corpus, mock_suite.summarizer, target_words=100, force=True)
        assert forced.skipped == []
        assert forced.corpus.get("L0").summary != "existing words here"

    def test_never_mutates_other_fields(self, tmp_path, mock_suite):
        records = [
            record(
                "L0",
                transcript=long_transcript(),
                dig_deeper_text="keep me [x](https://e.org/x)",
                gold_links=["L1"],
            ),
            record("L1", transcript=long_transcript()),
        ]
        corpus = ingest_corpus(write_jsonl(tmp_path / "c.jsonl", records))
        report = summarize_corpus(corpus, mock_suite.summarizer, target_words=100)
        after = report.corpus.get("L0")
        before = corpus.get("L0")
        assert after.transcript == before.transcript
        assert after.dig_deeper_text == before.dig_deeper_text
        assert after.gold_links == before.gold_links

    def test_statuses_partition_the_corpus(self, tmp_path, mock_suite):
        corpus = make_corpus(
            tmp_path,
            [long_transcript(), "too short", long_transcript()],
            summaries=[None, None, "already here"],
        )
        report = summarize_corpus(corpus, mock_suite.summarizer, target_words=100)
        total = (
            len(report.summarized)
            + len(report.skipped)
            + len(report.out_of_band)
            + len(report.failed)
        )
        assert total == corpus.lesson_count

    def test_target_words_precondition(self, tmp_path, mock_suite):
        corpus = make_corpus(tmp_path, [long_transcript()])
        with pytest.raises(PreconditionError):
            summarize_corpus(corpus, mock_suite.summarizer, target_words=10)

    def test_parallel_run_matches_serial(self, tmp_path, mock_suite):
        corpus = make_corpus(tmp_path, [long_transcript(60 + 80 * i) for i in range(4)])
        serial = summarize_corpus(corpus, mock_suite.summarizer, target_words=100)
        parallel = summarize_corpus(
            corpus, mock_suite.summarizer, target_words=100, parallelism=4
        )
        assert serial.corpus.lessons == parallel.corpus.lessons
