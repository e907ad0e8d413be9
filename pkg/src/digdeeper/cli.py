"""Command-line entry point: ingest, summarize, index, run, eval, classify.

Exit codes are a stable scripting contract: 0 success, 1 domain error
(bad data, unknown ids, empty inputs), 2 I/O/config/backend error. Each
failure is also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

from .config import (
    Config,
    eval_options,
    load_config,
    make_embedding_provider,
    make_llm_suite,
    pipeline_options,
)
from .corpus import classify_dig_deeper, ingest_corpus, summarize_corpus, write_corpus
from .data import fixture_corpus_path
from .embedding import build_index, load_index, save_index
from .errors import ConfigError, DigDeeperError, DomainError, SetupError, UnknownLessonError
from .evaluation import evaluate_run, save_report_csv, save_report_json
from .pipeline import PipelineMode, PipelineResult, run_pipeline

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_SETUP = 2


def _error_json(exc: Exception) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc)})


def _report_failure(exc: Exception) -> int:
    print(_error_json(exc), file=sys.stderr)
    if isinstance(exc, SetupError) or isinstance(exc, OSError):
        return EXIT_SETUP
    return EXIT_DOMAIN


def _resolve_corpus_path(args, config: Config) -> Path:
    value = args.corpus or config.corpus_path
    if not value:
        raise ConfigError("no corpus path given (use --corpus or set corpus_path)")
    if value == "fixture":
        return fixture_corpus_path()
    return Path(value)


def _load_setup(args) -> Config:
    config = load_config(args.config)
    if getattr(args, "mock", False):
        config = config.force_mock()
    if getattr(args, "output_dir", None):
        config.output_dir = args.output_dir
    return config


def _index_path(args, config: Config) -> Path:
    value = getattr(args, "index", None) or config.index_path
    if value:
        return Path(value)
    return Path(config.output_dir) / "index.ddix"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    config = _load_setup(args)
    corpus = ingest_corpus(_resolve_corpus_path(args, config), strict=args.strict)
    out = Path(args.out) if args.out else Path(config.output_dir) / "corpus.normalized.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, out)
    print(
        json.dumps(
            {
                "lessons": corpus.lesson_count,
                "skipped": len(corpus.report.skipped),
                "dropped_links": len(corpus.report.dropped_links),
                "out": str(out),
            }
        )
    )
    for line_no, reason in corpus.report.skipped:
        print(_error_json(DomainError(f"skipped record at line {line_no}: {reason}")), file=sys.stderr)
    return EXIT_OK


def cmd_summarize(args) -> int:
    config = _load_setup(args)
    corpus = ingest_corpus(_resolve_corpus_path(args, config))
    suite = make_llm_suite(config)
    target = args.target_words or config.target_words
    report = summarize_corpus(
        corpus,
        suite.summarizer,
        target_words=target,
        force=args.force,
        parallelism=config.parallelism,
    )
    out = Path(args.out) if args.out else Path(config.output_dir) / "corpus.summarized.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(report.corpus, out)
    print(
        json.dumps(
            {
                "summarized": len(report.summarized),
                "skipped": len(report.skipped),
                "out_of_band": report.out_of_band,
                "failed": report.failed,
                "out": str(out),
            }
        )
    )
    if report.failed:
        print(_error_json(DomainError(f"summarization failed for {report.failed}")), file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_index(args) -> int:
    config = _load_setup(args)
    corpus = ingest_corpus(_resolve_corpus_path(args, config))
    provider = make_embedding_provider(config)
    index, failed = build_index(corpus, provider, args.source_field or config.source_field)
    path = _index_path(args, config)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_index(index, path)
    print(json.dumps({"entries": len(index), "failed": failed, "out": str(path)}))
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load_setup(args)
    corpus = ingest_corpus(_resolve_corpus_path(args, config))
    provider = make_embedding_provider(config)
    mode = PipelineMode.parse(args.mode)

    index_path = _index_path(args, config)
    if args.build_index:
        index, _ = build_index(corpus, provider, config.source_field)
        index_path.parent.mkdir(parents=True, exist_ok=True)
        save_index(index, index_path)
    else:
        index = load_index(index_path)

    if args.lessons:
        lesson_ids = [lid.strip() for lid in args.lessons.split(",") if lid.strip()]
        for lesson_id in lesson_ids:
            if lesson_id not in corpus:
                raise UnknownLessonError(lesson_id)
    else:
        lesson_ids = corpus.ids()

    suite = make_llm_suite(config)
    options = pipeline_options(config)
    results_dir = Path(config.output_dir) / "results"
    articles_dir = Path(config.output_dir) / "articles"
    results_dir.mkdir(parents=True, exist_ok=True)
    articles_dir.mkdir(parents=True, exist_ok=True)

    succeeded = 0
    failed: list[str] = []
    for lesson_id in lesson_ids:
        lesson = corpus.get(lesson_id)
        try:
            result = run_pipeline(lesson, corpus, index, suite, provider, options, mode)
        except DigDeeperError as exc:
            failed.append(lesson_id)
            # Persist a failure marker so the run stays auditable.
            marker = {"lesson_id": lesson_id, "mode": mode.value, "error": str(exc)}
            (results_dir / f"{lesson_id}.json").write_text(
                json.dumps(marker, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
            )
            print(_error_json(exc), file=sys.stderr)
            continue
        (results_dir / f"{lesson_id}.json").write_text(
            json.dumps(result.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )
        (articles_dir / f"{lesson_id}.md").write_text(
            f"# {lesson.title}\n\n{result.final_article}\n", encoding="utf-8"
        )
        succeeded += 1

    print(json.dumps({"mode": mode.value, "succeeded": succeeded, "failed": failed}))
    return EXIT_OK if succeeded >= 1 else EXIT_DOMAIN


def cmd_eval(args) -> int:
    config = _load_setup(args)
    corpus = ingest_corpus(_resolve_corpus_path(args, config))
    results_dir = Path(args.results_dir) if args.results_dir else Path(config.output_dir) / "results"
    if not results_dir.is_dir():
        raise DomainError(f"results directory {results_dir} does not exist")
    results: list[PipelineResult] = []
    for path in sorted(results_dir.glob("*.json")):
        obj = json.loads(path.read_text(encoding="utf-8"))
        if "error" in obj:
            continue  # failure marker from cmd_run
        results.append(PipelineResult.from_dict(obj))
    if not results:
        raise DomainError(f"no pipeline results found in {results_dir}")

    provider = make_embedding_provider(config)
    suite = make_llm_suite(config)
    judge = suite.judge if config.samples >= 1 else None
    options = eval_options(config, include_categories=args.table3)
    report = evaluate_run(results, corpus, provider, judge, options)

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_report_json(report, out_dir / "eval_report.json")
    save_report_csv(report, out_dir / "eval_report.csv")
    print(json.dumps({"lessons": len(report.per_lesson), "aggregates": report.aggregates}))
    return EXIT_OK


def cmd_classify(args) -> int:
    config = _load_setup(args)
    corpus = ingest_corpus(_resolve_corpus_path(args, config))
    counts: Counter = Counter()
    lessons: dict[str, str] = {}
    for lesson in corpus:
        if not lesson.dig_deeper_text:
            continue
        category = classify_dig_deeper(lesson.dig_deeper_text).value
        counts[category] += 1
        lessons[lesson.id] = category
    print(json.dumps({"counts": dict(sorted(counts.items())), "lessons": lessons}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a JSON config file")
    parser.add_argument("--corpus", help="corpus JSONL path, or 'fixture' for the bundled corpus")
    parser.add_argument("--output-dir", help="directory for generated files")
    parser.add_argument("--mock", action="store_true", help="force deterministic mock backends")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="digdeeper",
        description="Generate extended-reading articles with lesson recommendations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a corpus file and write it back normalized")
    _add_common(p)
    p.add_argument("--strict", action="store_true", help="abort on the first malformed record")
    p.add_argument("--out", help="where to write the normalized corpus")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("summarize", help="populate uniform-length lesson summaries")
    _add_common(p)
    p.add_argument("--target-words", type=int, help="summary length target")
    p.add_argument("--force", action="store_true", help="re-summarize lessons that have summaries")
    p.add_argument("--out", help="where to write the summarized corpus")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("index", help="build and save the dense lesson index")
    _add_common(p)
    p.add_argument("--index", help="index file path")
    p.add_argument("--source-field", choices=("summary", "transcript"))
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("run", help="run the article pipeline over lessons")
    _add_common(p)
    p.add_argument(
        "--mode",
        choices=[mode.value for mode in PipelineMode],
        default=PipelineMode.FULL.value,
        help="pipeline mode (ablations: skip-stage1, skip-stage3)",
    )
    p.add_argument("--lessons", help="comma-separated lesson ids (default: all)")
    p.add_argument("--index", help="index file path")
    p.add_argument("--build-index", action="store_true", help="build the index before running")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score pipeline results and write the report")
    _add_common(p)
    p.add_argument("--results-dir", help="directory of per-lesson result JSON files")
    p.add_argument("--table3", action="store_true", help="add the per-category breakdown")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("classify", help="bucket lessons' existing extended articles")
    _add_common(p)
    p.set_defaults(func=cmd_classify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DigDeeperError as exc:
        return _report_failure(exc)
    except OSError as exc:
        return _report_failure(exc)


if __name__ == "__main__":
    sys.exit(main())
