"""Bundled data files: the synthetic 20-lesson fixture corpus."""

from importlib import resources
from pathlib import Path


def fixture_corpus_path() -> Path:
    """Path of the bundled fixture corpus (planted gold links, category exemplars)."""
    return Path(str(resources.files("digdeeper") / "data" / "fixture_corpus.jsonl"))
