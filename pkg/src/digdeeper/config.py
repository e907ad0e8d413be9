"""Run configuration: JSON file, environment overrides, backend wiring.

A config file is a single JSON object; unknown keys are rejected with an
error naming the key. Any scalar knob can be overridden through an
environment variable named ``DD_<KEY>`` (upper-cased key), e.g.
``DD_TARGET_WORDS=120``.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

from .embedding import HashEmbeddingProvider, HttpEmbeddingProvider
from .errors import ConfigError
from .evaluation import REFERENCE_FIELDS, EvalOptions
from .llm import HttpChatBackend, LlmSuite, RetryPolicy, TemplateSet
from .pipeline import PipelineOptions

ENV_PREFIX = "DD_"

_MOCK_CHAT = {"kind": "mock"}
_MOCK_EMBEDDING = {"kind": "mock", "dim": 64}


@dataclass
class Config:
    corpus_path: str | None = None
    index_path: str | None = None
    output_dir: str = "out"
    chat_backend: dict = field(default_factory=lambda: dict(_MOCK_CHAT))
    embedding_backend: dict = field(default_factory=lambda: dict(_MOCK_EMBEDDING))
    target_words: int = 150
    pool_size: int = 100
    k: int = 4
    batch_size: int = 10
    max_reasks: int = 2
    parallelism: int = 4
    reference_field: str = "summary"
    normalize_bm25: bool = True
    samples: int = 1
    source_field: str = "summary"
    templates_dir: str | None = None
    mock_seed: int = 0

    def validate(self) -> None:
        checks = (
            (self.target_words >= 30, "target_words must be >= 30"),
            (self.pool_size >= 1, "pool_size must be >= 1"),
            (self.k >= 1, "k must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.max_reasks >= 0, "max_reasks must be >= 0"),
            (self.parallelism >= 1, "parallelism must be >= 1"),
            (self.samples >= 0, "samples must be >= 0 (0 disables the judge)"),
            (
                self.reference_field in REFERENCE_FIELDS,
                f"reference_field must be one of {REFERENCE_FIELDS}",
            ),
            (
                self.source_field in ("summary", "transcript"),
                "source_field must be 'summary' or 'transcript'",
            ),
        )
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        for name, backend in (("chat_backend", self.chat_backend),
                              ("embedding_backend", self.embedding_backend)):
            kind = backend.get("kind")
            if kind not in ("mock", "http"):
                raise ConfigError(f"{name}.kind must be 'mock' or 'http'")
            if kind == "http":
                for required in ("base_url", "model"):
                    if not backend.get(required):
                        raise ConfigError(f"{name}.{required} is required for http backends")
            if name == "embedding_backend" and kind == "http" and not backend.get("dim"):
                raise ConfigError("embedding_backend.dim is required for http backends")

    def force_mock(self) -> "Config":
        if self.embedding_backend.get("kind") == "mock":
            dim = int(self.embedding_backend.get("dim", 64))
        else:
            dim = 64
        return replace(
            self,
            chat_backend=dict(_MOCK_CHAT),
            embedding_backend={"kind": "mock", "dim": dim},
        )


_INT_KEYS = (
    "target_words", "pool_size", "k", "batch_size", "max_reasks", "parallelism",
    "samples", "mock_seed",
)
_BOOL_KEYS = ("normalize_bm25",)
_STR_KEYS = (
    "corpus_path", "index_path", "output_dir", "reference_field", "source_field",
    "templates_dir",
)
_DICT_KEYS = ("chat_backend", "embedding_backend")
_ALL_KEYS = _INT_KEYS + _BOOL_KEYS + _STR_KEYS + _DICT_KEYS


def _coerce(key: str, raw: str):
    if key in _INT_KEYS:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{ENV_PREFIX}{key.upper()} must be an integer") from None
    if key in _BOOL_KEYS:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes"):
            return True
        if lowered in ("0", "false", "no"):
            return False
        raise ConfigError(f"{ENV_PREFIX}{key.upper()} must be a boolean")
    return raw


def load_config(path: str | Path | None = None, env: dict | None = None) -> Config:
    """Build a Config from defaults, an optional JSON file, and DD_* env vars."""
    env = os.environ if env is None else env
    values: dict = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise ConfigError("config root must be a JSON object")
        for key in obj:
            if key not in _ALL_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
        values.update(obj)

    for key in _ALL_KEYS:
        if key in _DICT_KEYS:
            continue
        raw = env.get(ENV_PREFIX + key.upper())
        if raw is not None:
            values[key] = _coerce(key, raw)

    config = Config(**values)
    config.validate()
    return config


# ---------------------------------------------------------------------------
# Backend wiring
# ---------------------------------------------------------------------------


def make_llm_suite(config: Config) -> LlmSuite:
    templates = TemplateSet.load(Path(config.templates_dir) if config.templates_dir else None)
    if config.chat_backend["kind"] == "mock":
        return LlmSuite.mock(templates=templates, seed=config.mock_seed)
    backend = HttpChatBackend(
        base_url=config.chat_backend["base_url"],
        api_key_env=config.chat_backend.get("api_key_env", "DD_API_KEY"),
        timeout=float(config.chat_backend.get("timeout", 60.0)),
        retry=RetryPolicy(max_retries=int(config.chat_backend.get("max_retries", 3))),
        limiter=threading.BoundedSemaphore(config.parallelism),
    )
    return LlmSuite.with_backend(backend, model=config.chat_backend["model"], templates=templates)


def make_embedding_provider(config: Config):
    backend = config.embedding_backend
    if backend["kind"] == "mock":
        return HashEmbeddingProvider(dim=int(backend.get("dim", 64)), seed=config.mock_seed)
    return HttpEmbeddingProvider(
        base_url=backend["base_url"],
        model=backend["model"],
        dim=int(backend["dim"]),
        api_key_env=backend.get("api_key_env", "DD_EMBED_API_KEY"),
        timeout=float(backend.get("timeout", 60.0)),
        retry=RetryPolicy(max_retries=int(backend.get("max_retries", 3))),
        limiter=threading.BoundedSemaphore(config.parallelism),
    )


def pipeline_options(config: Config) -> PipelineOptions:
    return PipelineOptions(
        pool_size=config.pool_size,
        k=config.k,
        batch_size=config.batch_size,
        max_reasks=config.max_reasks,
    )


def eval_options(config: Config, include_categories: bool = False) -> EvalOptions:
    return EvalOptions(
        reference_field=config.reference_field,
        normalize_bm25=config.normalize_bm25,
        samples=max(1, config.samples),
        include_categories=include_categories,
        max_reasks=config.max_reasks,
    )
