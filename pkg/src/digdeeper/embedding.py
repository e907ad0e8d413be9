"""Text-embedding providers, vector math, and the persistent dense index.

Two providers ship: an HTTP client for a hosted embedding service, and a
deterministic hash provider (token hashes folded into signed dimension
buckets) for offline runs and CI. Retrieval is an exact full scan; at a few
thousand lessons nothing approximate is worth its complexity.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .corpus import Corpus
from .errors import (
    AuthenticationError,
    BackendError,
    DimensionMismatchError,
    IndexFormatError,
    PreconditionError,
    RetryExhaustedError,
    ZeroVectorError,
)
from .llm import RetryPolicy, TransientNetworkError, Transport, requests_transport
from .text import tokenize

MAGIC = b"DDIX"
FORMAT_VERSION = 1


def l2_normalize(values: np.ndarray) -> np.ndarray:
    """Return a unit-norm float32 copy; zero vectors are rejected."""
    arr = np.asarray(values, dtype=np.float32)
    norm = float(np.linalg.norm(arr.astype(np.float64)))
    if norm == 0.0:
        raise ZeroVectorError("cannot normalize a zero vector")
    return (arr / np.float32(norm)).astype(np.float32)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise DimensionMismatchError(a.shape[0], b.shape[0])
    na = float(np.linalg.norm(a.astype(np.float64)))
    nb = float(np.linalg.norm(b.astype(np.float64)))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine of a zero vector is undefined")
    value = float(np.dot(a.astype(np.float64), b.astype(np.float64)) / (na * nb))
    return max(-1.0, min(1.0, value))


class EmbeddingProvider(Protocol):
    dim: int
    tag: str
    supports_token_vectors: bool

    def embed_raw(self, texts: list[str]) -> list[np.ndarray]:
        """Return one raw (not yet normalized) vector per input text."""
        ...


def embed(provider: EmbeddingProvider, text: str) -> np.ndarray:
    """Embed one nonempty text into an L2-normalized vector."""
    if not text:
        raise PreconditionError("cannot embed empty text")
    vec = provider.embed_raw([text])[0]
    if vec.shape != (provider.dim,):
        raise DimensionMismatchError(provider.dim, int(vec.shape[0]))
    return l2_normalize(vec)


class HashEmbeddingProvider:
    """Deterministic offline embeddings: token hashes into signed buckets.

    Texts sharing vocabulary land near each other, which is all the
    retrieval stage needs from a test double. Also exposes per-token
    vectors, so token-level greedy-matching metrics work offline.
    """

    supports_token_vectors = True

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim
        self.seed = seed
        self.tag = f"hash-v1:d{dim}:s{seed}"

    def _token_bucket(self, token: str) -> tuple[int, float]:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:4], "big") % self.dim
        sign = 1.0 if digest[4] % 2 == 0 else -1.0
        return bucket, sign

    def embed_raw(self, texts: list[str]) -> list[np.ndarray]:
        out = []
        for text in texts:
            vec = np.zeros(self.dim, dtype=np.float32)
            for token in tokenize(text):
                bucket, sign = self._token_bucket(token)
                vec[bucket] += sign
            out.append(vec)
        return out

    def token_vectors(self, text: str) -> tuple[list[str], np.ndarray]:
        """One normalized vector per token, in token order."""
        tokens = tokenize(text)
        matrix = np.zeros((len(tokens), self.dim), dtype=np.float32)
        for row, token in enumerate(tokens):
            bucket, sign = self._token_bucket(token)
            matrix[row, bucket] = sign
        return tokens, matrix


class HttpEmbeddingProvider:
    """Client for a hosted embedding endpoint.

    Wire format: POST ``{"model": ..., "input": [...]}``; response
    ``{"data": [{"embedding": [...]}]}``. Sentence-level only, so
    token-matching metrics report absent under this provider.
    """

    supports_token_vectors = False

    def __init__(
        self,
        base_url: str,
        model: str,
        dim: int,
        *,
        api_key_env: str = "DD_EMBED_API_KEY",
        timeout: float = 60.0,
        retry: RetryPolicy | None = None,
        transport: Transport | None = None,
        limiter: threading.BoundedSemaphore | None = None,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dim = dim
        self.api_key_env = api_key_env
        self.retry = retry or RetryPolicy()
        self.transport = transport or requests_transport(timeout)
        self.limiter = limiter
        self.sleeper = sleeper
        self.tag = f"http:{model}"

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise AuthenticationError(
                f"environment variable {self.api_key_env} is unset or empty"
            )
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def embed_raw(self, texts: list[str]) -> list[np.ndarray]:
        payload = {"model": self.model, "input": list(texts)}
        headers = self._headers()
        url = f"{self.base_url}/embeddings"
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
                raise AuthenticationError(f"HTTP {status} from embedding backend")
            if status == 429 or 500 <= status < 600:
                last_error = f"HTTP {status}"
                if attempt < self.retry.max_retries:
                    self.sleeper(self.retry.delay(attempt))
                continue
            if status != 200:
                raise BackendError(f"HTTP {status} from embedding backend: {body[:200]}")
            return self._parse_vectors(body, len(texts))
        raise RetryExhaustedError(attempts, last_error)

    def _parse_vectors(self, body: str, expected: int) -> list[np.ndarray]:
        try:
            data = json.loads(body)["data"]
            vectors = [np.asarray(item["embedding"], dtype=np.float32) for item in data]
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendError(f"malformed embedding response: {exc}") from exc
        if len(vectors) != expected:
            raise BackendError(f"expected {expected} embeddings, got {len(vectors)}")
        for vec in vectors:
            if vec.shape != (self.dim,):
                raise DimensionMismatchError(self.dim, int(vec.shape[0]))
        return vectors


# ---------------------------------------------------------------------------
# Dense index
# ---------------------------------------------------------------------------


@dataclass
class DenseIndex:
    """All lesson vectors for one provider; immutable after build."""

    dim: int
    provider_tag: str
    ids: list[str]
    vectors: np.ndarray  # shape (len(ids), dim), float32, rows L2-normalized

    def __post_init__(self) -> None:
        if len(self.ids) != len(set(self.ids)):
            raise ValueError("index ids must be unique")
        if self.vectors.shape != (len(self.ids), self.dim):
            raise ValueError("vector block shape does not match ids/dim")
        if not self.provider_tag:
            raise ValueError("provider_tag must be nonempty")

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, lesson_id: str) -> bool:
        return lesson_id in self._positions()

    def _positions(self) -> dict[str, int]:
        cached = getattr(self, "_pos_cache", None)
        if cached is None:
            cached = {lesson_id: i for i, lesson_id in enumerate(self.ids)}
            self._pos_cache = cached
        return cached

    def vector_for(self, lesson_id: str) -> np.ndarray:
        return self.vectors[self._positions()[lesson_id]]


@dataclass(frozen=True)
class CandidateRanking:
    """Dense-retrieval output: candidates ordered by cosine, best first."""

    source_lesson: str
    entries: tuple[tuple[str, float], ...]

    def ids(self) -> list[str]:
        return [cid for cid, _ in self.entries]


def build_index(
    corpus: Corpus,
    provider: EmbeddingProvider,
    source_field: str = "summary",
    *,
    batch_size: int = 16,
) -> tuple[DenseIndex, list[str]]:
    """Embed every lesson's chosen text field into a DenseIndex.

    Returns the index plus ids of lessons whose embedding failed (they are
    omitted with a warning rather than aborting the build). A lesson with
    the source field missing is a precondition error naming the lesson.
    """
    if source_field not in ("summary", "transcript"):
        raise PreconditionError(f"unknown source_field {source_field!r}")
    texts: list[str] = []
    for lesson in corpus:
        value = lesson.summary if source_field == "summary" else lesson.transcript
        if not value:
            raise PreconditionError(
                f"lesson {lesson.id!r} has no {source_field}; run summarization first"
            )
        texts.append(value)

    ids: list[str] = []
    rows: list[np.ndarray] = []
    failed: list[str] = []
    all_ids = corpus.ids()
    for start in range(0, len(texts), batch_size):
        batch_ids = all_ids[start : start + batch_size]
        batch_texts = texts[start : start + batch_size]
        try:
            raw = provider.embed_raw(batch_texts)
        except BackendError:
            # Retry one-by-one so a single bad lesson doesn't sink the batch.
            raw = []
            for lesson_id, text_value in zip(batch_ids, batch_texts):
                try:
                    raw.append(provider.embed_raw([text_value])[0])
                except BackendError:
                    raw.append(None)
        for lesson_id, vec in zip(batch_ids, raw):
            if vec is None:
                failed.append(lesson_id)
                continue
            try:
                rows.append(l2_normalize(vec))
            except ZeroVectorError:
                failed.append(lesson_id)
                continue
            ids.append(lesson_id)

    if not rows:
        raise BackendError("embedding failed for every lesson; no index built")
    matrix = np.vstack(rows).astype(np.float32)
    if matrix.shape[1] != provider.dim:
        raise DimensionMismatchError(provider.dim, matrix.shape[1])
    return DenseIndex(dim=provider.dim, provider_tag=provider.tag, ids=ids, vectors=matrix), failed


def top_k(
    index: DenseIndex,
    query: np.ndarray,
    k: int,
    exclude: frozenset[str] | set[str] = frozenset(),
    *,
    source_lesson: str = "",
) -> CandidateRanking:
    """Exact top-k by cosine, descending, ties broken by id ascending."""
    if k < 1:
        raise PreconditionError("k must be >= 1")
    query = np.asarray(query, dtype=np.float32)
    if query.shape != (index.dim,):
        raise DimensionMismatchError(index.dim, int(query.shape[0]))
    scores = [cosine(row, query) for row in index.vectors]
    banned = set(exclude)
    if source_lesson:
        banned.add(source_lesson)
    order = sorted(
        (i for i, lesson_id in enumerate(index.ids) if lesson_id not in banned),
        key=lambda i: (-scores[i], index.ids[i]),
    )
    entries = tuple((index.ids[i], scores[i]) for i in order[:k])
    return CandidateRanking(source_lesson=source_lesson, entries=entries)


# ---------------------------------------------------------------------------
# Binary persistence
# ---------------------------------------------------------------------------


def save_index(index: DenseIndex, path: str | Path) -> None:
    """Write the index in the DDIX v1 little-endian binary layout."""
    parts = [MAGIC, struct.pack("<III", FORMAT_VERSION, index.dim, len(index.ids))]
    tag_bytes = index.provider_tag.encode("utf-8")
    parts.append(struct.pack("<H", len(tag_bytes)))
    parts.append(tag_bytes)
    for lesson_id, row in zip(index.ids, index.vectors):
        id_bytes = lesson_id.encode("utf-8")
        parts.append(struct.pack("<H", len(id_bytes)))
        parts.append(id_bytes)
        parts.append(row.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_index(path: str | Path) -> DenseIndex:
    """Read a DDIX file; unknown magic or version is rejected."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IndexFormatError(f"cannot read index file {path}: {exc}") from exc
    view = memoryview(blob)
    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise IndexFormatError(f"not a dense-index file: bad magic in {path}")
    offset = 4
    try:
        version, dim, count = struct.unpack_from("<III", view, offset)
        offset += 12
        if version != FORMAT_VERSION:
            raise IndexFormatError(f"unsupported index version {version}")
        (tag_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        provider_tag = bytes(view[offset : offset + tag_len]).decode("utf-8")
        offset += tag_len
        ids: list[str] = []
        matrix = np.empty((count, dim), dtype=np.float32)
        row_bytes = dim * 4
        for row in range(count):
            (id_len,) = struct.unpack_from("<H", view, offset)
            offset += 2
            ids.append(bytes(view[offset : offset + id_len]).decode("utf-8"))
            offset += id_len
            if offset + row_bytes > len(view):
                raise IndexFormatError("truncated vector payload")
            matrix[row] = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset)
            offset += row_bytes
    except struct.error as exc:
        raise IndexFormatError(f"truncated index file {path}: {exc}") from exc
    if offset != len(view):
        raise IndexFormatError("trailing bytes after vector payload")
    return DenseIndex(dim=dim, provider_tag=provider_tag, ids=ids, vectors=matrix)
