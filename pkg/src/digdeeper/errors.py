"""Exception hierarchy shared across the package.

Two branches matter for the CLI exit-code contract: ``DomainError`` maps to
exit code 1 (bad data, violated preconditions), ``SetupError`` maps to exit
code 2 (I/O, configuration, backend transport).
"""

from __future__ import annotations


class DigDeeperError(Exception):
    """Base class for all package errors."""


class DomainError(DigDeeperError):
    """Invalid data or a violated operation precondition (CLI exit 1)."""


class SetupError(DigDeeperError):
    """I/O, configuration, or backend transport failure (CLI exit 2)."""


class PreconditionError(DomainError):
    """An operation was called with inputs that violate its contract."""


class DuplicateIdError(DomainError):
    def __init__(self, lesson_id: str):
        super().__init__(f"duplicate lesson id {lesson_id!r}")
        self.lesson_id = lesson_id


class MalformedRecordError(DomainError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class UnknownLessonError(DomainError):
    def __init__(self, lesson_id: str):
        super().__init__(f"unknown lesson id {lesson_id!r}")
        self.lesson_id = lesson_id


class UnknownDocumentError(DomainError):
    def __init__(self, doc_id: str):
        super().__init__(f"document {doc_id!r} is not in the index")
        self.doc_id = doc_id


class DocumentNotIndexedError(DomainError):
    """Raised when a reference text was never registered in the BM25 index."""


class DimensionMismatchError(DomainError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"vector dimension mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class ZeroVectorError(DomainError):
    """Raised when a zero vector reaches L2 normalization."""


class MissingPlaceholderError(DomainError):
    def __init__(self, name: str):
        super().__init__(f"missing placeholder {name!r}")
        self.name = name


class SchemaError(DomainError):
    """A parsed value does not satisfy its record-shape schema."""


class UnparsableVerdictError(DomainError):
    """Structured output stayed invalid after all re-asks."""

    def __init__(self, raw: str, attempts: int, reason: str):
        super().__init__(f"unparsable after {attempts} attempts: {reason}")
        self.raw = raw
        self.attempts = attempts
        self.reason = reason


class BackendError(SetupError):
    """A chat or embedding backend failed."""


class AuthenticationError(BackendError):
    """The backend rejected the request's credentials; never retried."""


class RetryExhaustedError(BackendError):
    def __init__(self, attempts: int, last_error: str):
        super().__init__(f"backend failed after {attempts} attempts: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


class EmptyCompletionError(BackendError):
    """The backend returned an empty assistant message."""


class CorpusIOError(SetupError):
    """The corpus file could not be read or written."""


class IndexFormatError(SetupError):
    """A dense-index file has an unknown magic or version, or is truncated."""


class ConfigError(SetupError):
    """Invalid configuration file, value, or unknown key."""
