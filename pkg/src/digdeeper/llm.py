"""Chat-completion gateway.

Holds prompt templating, the HTTP chat backend with bounded retry, the
deterministic offline mock backend, and structured-output parsing with
validation and bounded re-asks. Prompts live as external template files
(one per pipeline role) so they can be edited without touching code.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol

import requests

from .errors import (
    AuthenticationError,
    BackendError,
    EmptyCompletionError,
    MissingPlaceholderError,
    RetryExhaustedError,
    SchemaError,
    UnparsableVerdictError,
)

ROLES = ("summarizer", "generator", "reranker", "rewriter", "judge")

TEMPLATE_FILES = {
    "summarizer": "summarizer.txt",
    "generator": "stage1_generator.txt",
    "reranker": "reranker.txt",
    "rewriter": "stage3_rewriter.txt",
    "judge": "coherence_judge.txt",
}

_PLACEHOLDER_RE = re.compile(r"\{\{([A-Za-z0-9_]+)\}\}")


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------


def _substitute(text: str, bindings: dict[str, str]) -> str:
    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in bindings:
            raise MissingPlaceholderError(name)
        return bindings[name]

    return _PLACEHOLDER_RE.sub(repl, text)


@dataclass(frozen=True)
class PromptTemplate:
    """A named template with ``{{placeholder}}`` slots in body and system."""

    name: str
    body: str
    system: str = ""

    @property
    def required_placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.body) + _PLACEHOLDER_RE.findall(self.system))

    def render(self, bindings: dict[str, str]) -> str:
        """Substitute every placeholder in the body verbatim."""
        return _substitute(self.body, bindings)

    def render_system(self, bindings: dict[str, str]) -> str:
        return _substitute(self.system, bindings)

    @classmethod
    def from_text(cls, name: str, text: str) -> "PromptTemplate":
        """Parse a template file with optional ``[system]`` / ``[user]`` sections."""
        system_lines: list[str] = []
        body_lines: list[str] = []
        target = body_lines
        seen_section = False
        for line in text.splitlines():
            stripped = line.strip()
            if stripped == "[system]":
                target = system_lines
                seen_section = True
                continue
            if stripped == "[user]":
                target = body_lines
                seen_section = True
                continue
            target.append(line)
        if not seen_section:
            body_lines = text.splitlines()
            system_lines = []
        return cls(
            name=name,
            body="\n".join(body_lines).strip("\n"),
            system="\n".join(system_lines).strip("\n"),
        )


def render(template: PromptTemplate, bindings: dict[str, str]) -> str:
    """Render a template body; errors name the first missing placeholder."""
    return template.render(bindings)


class TemplateSet:
    """The five pipeline role templates, loaded from a directory."""

    def __init__(self, templates: dict[str, PromptTemplate]):
        missing = [role for role in ROLES if role not in templates]
        if missing:
            raise ValueError(f"missing templates for roles: {missing}")
        self._templates = templates

    def get(self, role: str) -> PromptTemplate:
        return self._templates[role]

    @classmethod
    def load(cls, directory: Path | None = None) -> "TemplateSet":
        """Load from ``directory``, falling back to the packaged defaults."""
        templates: dict[str, PromptTemplate] = {}
        for role, filename in TEMPLATE_FILES.items():
            if directory is not None:
                text = (Path(directory) / filename).read_text(encoding="utf-8")
            else:
                text = (resources.files("digdeeper") / "prompts" / filename).read_text(
                    encoding="utf-8"
                )
            templates[role] = PromptTemplate.from_text(role, text)
        return cls(templates)


# ---------------------------------------------------------------------------
# Requests and backends
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChatRequest:
    model: str
    system: str
    user: str
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.user:
            raise ValueError("ChatRequest.user must be nonempty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")


class ChatBackend(Protocol):
    tag: str

    def complete(self, request: ChatRequest) -> str:
        """Return the assistant text for one request."""
        ...


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded retry with exponential backoff for transient failures."""

    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_cap: float = 8.0

    def delay(self, attempt: int) -> float:
        return min(self.backoff_base * (2.0 ** attempt), self.backoff_cap)


class TransientNetworkError(BackendError):
    """Connection/timeout failure from the transport; retried."""


Transport = Callable[[str, dict[str, str], dict], "tuple[int, str]"]


def requests_transport(timeout: float) -> Transport:
    """Default transport: POST JSON via requests with a fixed timeout."""

    def post(url: str, headers: dict[str, str], payload: dict) -> tuple[int, str]:
        try:
            response = requests.post(url, headers=headers, json=payload, timeout=timeout)
        except requests.RequestException as exc:
            raise TransientNetworkError(str(exc)) from exc
        return response.status_code, response.text

    return post


class HttpChatBackend:
    """Chat-completions client for an OpenAI-style endpoint.

    Retries 429/5xx and network timeouts with exponential backoff up to the
    configured cap; authentication failures are never retried. ``transport``
    is injectable so tests can run offline.
    """

    def __init__(
        self,
        base_url: str,
        *,
        api_key_env: str = "DD_API_KEY",
        timeout: float = 60.0,
        retry: RetryPolicy | None = None,
        transport: Transport | None = None,
        limiter: threading.BoundedSemaphore | None = None,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.retry = retry or RetryPolicy()
        self.transport = transport or requests_transport(timeout)
        self.limiter = limiter
        self.sleeper = sleeper
        self.tag = f"http:{self.base_url}"
        self.last_attempts = 0

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise AuthenticationError(
                f"environment variable {self.api_key_env} is unset or empty"
            )
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def complete(self, request: ChatRequest) -> str:
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        messages.append({"role": "user", "content": request.user})
        payload: dict = {
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        headers = self._headers()
        url = f"{self.base_url}/chat/completions"

        last_error = ""
        attempts = 0
        for attempt in range(self.retry.max_retries + 1):
            attempts = attempt + 1
            try:
                if self.limiter is not None:
                    with self.limiter:
                        status, body = self.transport(url, headers, payload)
                else:
                    status, body = self.transport(url, headers, payload)
            except TransientNetworkError as exc:
                last_error = str(exc)
                if attempt < self.retry.max_retries:
                    self.sleeper(self.retry.delay(attempt))
                continue
            if status in (401, 403):
                raise AuthenticationError(f"HTTP {status} from chat backend")
            if status == 429 or 500 <= status < 600:
                last_error = f"HTTP {status}"
                if attempt < self.retry.max_retries:
                    self.sleeper(self.retry.delay(attempt))
                continue
            if status != 200:
                raise BackendError(f"HTTP {status} from chat backend: {body[:200]}")
            self.last_attempts = attempts
            return self._extract_content(body)
        raise RetryExhaustedError(attempts, last_error)

    @staticmethod
    def _extract_content(body: str) -> str:
        try:
            data = json.loads(body)
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat response: {exc}") from exc
        if not isinstance(content, str) or not content.strip():
            raise EmptyCompletionError("backend returned an empty completion")
        return content


# ---------------------------------------------------------------------------
# Deterministic mock backend
# ---------------------------------------------------------------------------


def _stable_hash(*parts: str) -> int:
    joined = "\x1f".join(parts)
    return int.from_bytes(hashlib.sha256(joined.encode("utf-8")).digest()[:8], "big")


def _tagged_block(text: str, tag: str) -> str:
    match = re.search(rf"<{tag}>\n?(.*?)\n?</{tag}>", text, re.DOTALL)
    return match.group(1) if match else ""


_WORDY_RE = re.compile(r"[^\W\d_]{4,}", re.UNICODE)


def _content_words(text: str) -> list[str]:
    """Alphabetic words of length >= 4, lowercased, deduplicated in order."""
    seen: dict[str, None] = {}
    for word in _WORDY_RE.findall(text.lower()):
        seen.setdefault(word, None)
    return list(seen)


class MockChatBackend:
    """Pure, role-keyed stand-in for a chat model.

    Every output is a deterministic function of (role, seed, request text),
    which makes full pipeline runs reproducible byte-for-byte offline.
    """

    def __init__(self, role: str, seed: int = 0):
        if role not in ROLES:
            raise ValueError(f"unknown mock role {role!r}")
        self.role = role
        self.seed = seed
        self.tag = f"mock:{role}"

    def complete(self, request: ChatRequest) -> str:
        handler = getattr(self, f"_{self.role}")
        return handler(request.user)

    # -- role behaviours ----------------------------------------------------

    def _summarizer(self, prompt: str) -> str:
        source = _tagged_block(prompt, "source") or prompt
        match = re.search(r"about (\d+) words", prompt)
        target = int(match.group(1)) if match else 150
        return " ".join(source.split()[:target])

    def _generator(self, prompt: str) -> str:
        source = _tagged_block(prompt, "source") or prompt
        title_match = re.search(r"^Title: (.+)$", prompt, re.MULTILINE)
        title = title_match.group(1) if title_match else "the lesson"
        words = _content_words(source)
        if not words:
            words = ["learning"]
        h = _stable_hash(str(self.seed), "generator", source)
        target_words = 320 + h % 60

        sentences = [
            f"{title} opens a wider story than a single lesson can hold.",
            "This extended reading follows the historical facts, dates, events, "
            "terminology, and cultural practices behind the topic, with concrete "
            "examples, case studies, and anecdotes along the way.",
        ]
        patterns = (
            "Scholars who studied {a} kept returning to {b}, treating it as a case study in {c}.",
            "One well documented episode connects {a} with {b}, and records of {c} preserve the details.",
            "The terminology around {a} grew out of practical work with {b} and {c}.",
            "An often retold anecdote about {a} shows how {b} changed the way people understood {c}.",
            "Comparing {a} with {b} makes the role of {c} much easier to see.",
        )
        i = 0
        while sum(len(s.split()) for s in sentences) < target_words:
            a = words[i % len(words)]
            b = words[(i + 1) % len(words)]
            c = words[(i + 2) % len(words)]
            template = patterns[(h + i) % len(patterns)]
            sentences.append(template.format(a=a, b=b, c=c))
            i += 1
        paragraphs = [
            " ".join(sentences[j : j + 4]) for j in range(0, len(sentences), 4)
        ]
        return "\n\n".join(paragraphs)

    def _reranker(self, prompt: str) -> str:
        article = _tagged_block(prompt, "article")
        candidates_json = _tagged_block(prompt, "candidates")
        try:
            candidates = json.loads(candidates_json)
        except ValueError:
            candidates = []
        article_words = set(_content_words(article))
        judgments = []
        for candidate in candidates:
            cid = str(candidate.get("candidate_id", ""))
            summary = str(candidate.get("summary", ""))
            cand_words = set(_content_words(summary))
            shared = sorted(article_words & cand_words, key=lambda w: (-len(w), w))
            denom = max(1, min(len(article_words), len(cand_words)))
            ratio = len(shared) / denom
            score = min(10, int(round(ratio * 20)))
            judgments.append(
                {
                    "candidate_id": cid,
                    "related_keywords": shared[:2],
                    "keyword_match": bool(shared),
                    "relevance": score,
                    "context_alignment": ratio > 0.25,
                    "overall": score,
                }
            )
        return json.dumps({"judgments": judgments})

    def _rewriter(self, prompt: str) -> str:
        article = _tagged_block(prompt, "article")
        recs_json = _tagged_block(prompt, "recommendations")
        try:
            recs = json.loads(recs_json)
        except ValueError:
            recs = []
        if not recs:
            return article
        paragraphs = article.split("\n\n")
        leftovers = []
        for rec in recs:
            keyword = str(rec.get("keyword", ""))
            link = f"[{rec.get('title', '')}]({rec.get('url', '')})"
            pattern = re.compile(re.escape(keyword), re.IGNORECASE)
            for idx, paragraph in enumerate(paragraphs):
                if keyword and pattern.search(paragraph):
                    paragraphs[idx] = (
                        paragraph + f" Learners can dig deeper into {keyword} with {link}."
                    )
                    break
            else:
                leftovers.append(
                    f"The theme of {keyword} also runs through {link}, which extends this article."
                )
        if leftovers:
            paragraphs.append(" ".join(leftovers))
        return "\n\n".join(paragraphs)

    def _judge(self, prompt: str) -> str:
        article = _tagged_block(prompt, "article") or prompt
        h = _stable_hash(str(self.seed), "judge", article)
        return str(1 + h % 10)


class ScriptedChatBackend:
    """Replays a fixed sequence of completions; for tests and demos."""

    def __init__(self, outputs: list[str], *, cycle: bool = False, tag: str = "scripted"):
        if not outputs:
            raise ValueError("ScriptedChatBackend needs at least one output")
        self.outputs = list(outputs)
        self.cycle = cycle
        self.tag = tag
        self.calls = 0

    def complete(self, request: ChatRequest) -> str:
        index = self.calls if not self.cycle else self.calls % len(self.outputs)
        if index >= len(self.outputs):
            raise BackendError("scripted backend exhausted")
        self.calls += 1
        return self.outputs[index]


# ---------------------------------------------------------------------------
# Structured output
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StructuredVerdict:
    raw: str
    parsed: object
    parse_attempts: int


_JSON_START_RE = re.compile(r"[\[{]")


def extract_first_json(text: str) -> object:
    """Return the first balanced JSON object or array in ``text``.

    Models often wrap JSON in prose or code fences; scanning for the first
    decodable value handles both.
    """
    decoder = json.JSONDecoder()
    for match in _JSON_START_RE.finditer(text):
        try:
            value, _ = decoder.raw_decode(text, match.start())
        except ValueError:
            continue
        return value
    raise SchemaError("no JSON value found in completion")


@dataclass(frozen=True)
class FieldSpec:
    """One field of a record schema: name, kind, and an optional int range."""

    name: str
    kind: str  # "int" | "str" | "bool" | "str_list"
    minimum: int | None = None
    maximum: int | None = None

    def validate(self, value: object) -> object:
        if self.kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise SchemaError(f"field {self.name!r} must be an integer")
            if self.minimum is not None and value < self.minimum:
                raise SchemaError(f"field {self.name!r} must be >= {self.minimum}")
            if self.maximum is not None and value > self.maximum:
                raise SchemaError(f"field {self.name!r} must be <= {self.maximum}")
            return value
        if self.kind == "str":
            if not isinstance(value, str):
                raise SchemaError(f"field {self.name!r} must be a string")
            return value
        if self.kind == "bool":
            if not isinstance(value, bool):
                raise SchemaError(f"field {self.name!r} must be a boolean")
            return value
        if self.kind == "str_list":
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise SchemaError(f"field {self.name!r} must be a list of strings")
            return value
        raise SchemaError(f"unknown field kind {self.kind!r}")


@dataclass(frozen=True)
class RecordSchema:
    """Shape of one record: required fields plus record-level checks."""

    fields: tuple[FieldSpec, ...]
    checks: tuple[Callable[[dict], str | None], ...] = ()

    def extract(self, text: str) -> object:
        return extract_first_json(text)

    def validate(self, value: object) -> dict:
        if not isinstance(value, dict):
            raise SchemaError("expected a JSON object")
        cleaned: dict = {}
        for spec in self.fields:
            if spec.name not in value:
                raise SchemaError(f"missing field {spec.name!r}")
            cleaned[spec.name] = spec.validate(value[spec.name])
        for check in self.checks:
            problem = check(cleaned)
            if problem:
                raise SchemaError(problem)
        return cleaned


@dataclass(frozen=True)
class RecordListSchema:
    """A list of records, optionally wrapped in an object and keyed by id."""

    item: RecordSchema
    wrapper_key: str | None = None
    key_field: str | None = None
    expected_keys: tuple[str, ...] | None = None

    def extract(self, text: str) -> object:
        return extract_first_json(text)

    def validate(self, value: object) -> list[dict]:
        if isinstance(value, dict) and self.wrapper_key is not None:
            if self.wrapper_key not in value:
                raise SchemaError(f"missing key {self.wrapper_key!r}")
            value = value[self.wrapper_key]
        if not isinstance(value, list):
            raise SchemaError("expected a JSON array of records")
        records = [self.item.validate(entry) for entry in value]
        if self.key_field is not None and self.expected_keys is not None:
            got = [str(rec[self.key_field]) for rec in records]
            expected = list(self.expected_keys)
            if sorted(got) != sorted(expected):
                missing = sorted(set(expected) - set(got))
                extra = sorted(set(got) - set(expected))
                dupes = sorted({k for k in got if got.count(k) > 1})
                raise SchemaError(
                    f"record keys do not match the candidates: missing={missing} "
                    f"extra={extra} duplicated={dupes}"
                )
        return records


@dataclass(frozen=True)
class IntValueSchema:
    """A bare integer in a closed range (e.g. a 1-10 judge score)."""

    minimum: int
    maximum: int

    def extract(self, text: str) -> object:
        match = re.search(r"-?\d+", text)
        if match is None:
            raise SchemaError("no integer found in completion")
        return int(match.group(0))

    def validate(self, value: object) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError("expected an integer")
        if not self.minimum <= value <= self.maximum:
            raise SchemaError(f"integer must be between {self.minimum} and {self.maximum}")
        return value


def complete_structured(
    backend: ChatBackend,
    request: ChatRequest,
    schema,
    max_reasks: int = 2,
) -> StructuredVerdict:
    """Complete and parse against ``schema``, re-asking on validation failure.

    Each re-ask appends the validation error to the original user message.
    After ``max_reasks`` failed repairs the raw text is surfaced in an
    :class:`UnparsableVerdictError`.
    """
    if max_reasks < 0:
        raise ValueError("max_reasks must be >= 0")
    attempts = 0
    current = request
    last_raw = ""
    last_error = ""
    while attempts <= max_reasks:
        attempts += 1
        raw = backend.complete(current)
        last_raw = raw
        try:
            parsed = schema.validate(schema.extract(raw))
        except SchemaError as exc:
            last_error = str(exc)
            current = replace(
                request,
                user=(
                    request.user
                    + f"\n\nYour previous reply was invalid: {last_error}\n"
                    + "Reply again, with only a valid response."
                ),
            )
            continue
        return StructuredVerdict(raw=raw, parsed=parsed, parse_attempts=attempts)
    raise UnparsableVerdictError(last_raw, attempts, last_error)


# ---------------------------------------------------------------------------
# Role plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoleSettings:
    model: str
    temperature: float
    max_tokens: int


# Generation stages explore; reranking and judging need stability.
DEFAULT_ROLE_SETTINGS: dict[str, RoleSettings] = {
    "summarizer": RoleSettings(model="mock", temperature=0.7, max_tokens=1024),
    "generator": RoleSettings(model="mock", temperature=0.7, max_tokens=2048),
    "reranker": RoleSettings(model="mock", temperature=0.0, max_tokens=2048),
    "rewriter": RoleSettings(model="mock", temperature=0.7, max_tokens=2048),
    "judge": RoleSettings(model="mock", temperature=0.0, max_tokens=16),
}


@dataclass
class RoleHandle:
    """Backend + template + request settings for one pipeline role."""

    role: str
    backend: ChatBackend
    template: PromptTemplate
    settings: RoleSettings

    def request(self, bindings: dict[str, str], user_suffix: str = "") -> ChatRequest:
        return ChatRequest(
            model=self.settings.model,
            system=self.template.render_system(bindings),
            user=self.template.render(bindings) + user_suffix,
            temperature=self.settings.temperature,
            max_tokens=self.settings.max_tokens,
        )

    def complete(self, bindings: dict[str, str], user_suffix: str = "") -> str:
        return self.backend.complete(self.request(bindings, user_suffix))

    def complete_structured(
        self,
        bindings: dict[str, str],
        schema,
        max_reasks: int = 2,
        user_suffix: str = "",
    ) -> StructuredVerdict:
        return complete_structured(
            self.backend, self.request(bindings, user_suffix), schema, max_reasks
        )


@dataclass
class LlmSuite:
    """The five role handles used across the pipeline and evaluation."""

    summarizer: RoleHandle
    generator: RoleHandle
    reranker: RoleHandle
    rewriter: RoleHandle
    judge: RoleHandle

    def handle(self, role: str) -> RoleHandle:
        return getattr(self, role)

    @classmethod
    def mock(
        cls,
        templates: TemplateSet | None = None,
        seed: int = 0,
        settings: dict[str, RoleSettings] | None = None,
    ) -> "LlmSuite":
        templates = templates or TemplateSet.load()
        settings = settings or DEFAULT_ROLE_SETTINGS
        handles = {
            role: RoleHandle(
                role=role,
                backend=MockChatBackend(role, seed=seed),
                template=templates.get(role),
                settings=settings[role],
            )
            for role in ROLES
        }
        return cls(**handles)

    @classmethod
    def with_backend(
        cls,
        backend: ChatBackend,
        model: str,
        templates: TemplateSet | None = None,
        settings: dict[str, RoleSettings] | None = None,
    ) -> "LlmSuite":
        """Share one backend (typically HTTP) across all five roles."""
        templates = templates or TemplateSet.load()
        settings = settings or DEFAULT_ROLE_SETTINGS
        handles = {
            role: RoleHandle(
                role=role,
                backend=backend,
                template=templates.get(role),
                settings=replace(settings[role], model=model),
            )
            for role in ROLES
        }
        return cls(**handles)
