import pytest

from digdeeper.corpus import Corpus, ingest_corpus
from digdeeper.data import fixture_corpus_path
from digdeeper.embedding import HashEmbeddingProvider, build_index
from digdeeper.errors import RetryExhaustedError
from digdeeper.llm import ChatRequest, LlmSuite


class CountingBackend:
    """Delegating chat backend that counts complete() calls."""

    def __init__(self, delegate):
        self.delegate = delegate
        self.calls = 0
        self.tag = f"counting:{delegate.tag}"

    def complete(self, request: ChatRequest) -> str:
        self.calls += 1
        return self.delegate.complete(request)


class FailingChatBackend:
    """Chat backend whose every call fails like an exhausted retry loop."""

    tag = "failing"

    def complete(self, request: ChatRequest) -> str:
        raise RetryExhaustedError(3, "HTTP 503")


@pytest.fixture(scope="session")
def fixture_corpus() -> Corpus:
    return ingest_corpus(fixture_corpus_path())


@pytest.fixture(scope="session")
def provider() -> HashEmbeddingProvider:
    return HashEmbeddingProvider(dim=64, seed=0)


@pytest.fixture(scope="session")
def dense_index(fixture_corpus, provider):
    index, failed = build_index(fixture_corpus, provider, "summary")
    assert not failed
    return index


@pytest.fixture(scope="session")
def mock_suite() -> LlmSuite:
    return LlmSuite.mock(seed=0)
