import numpy as np
import pytest

from digdeeper.embedding import (
    DenseIndex,
    HashEmbeddingProvider,
    HttpEmbeddingProvider,
    build_index,
    cosine,
    embed,
    l2_normalize,
    load_index,
    save_index,
    top_k,
)
from digdeeper.errors import (
    AuthenticationError,
    BackendError,
    DimensionMismatchError,
    IndexFormatError,
    PreconditionError,
    ZeroVectorError,
)
from digdeeper.llm import RetryPolicy


class TestVectorMath:
    def test_normalize_returns_unit_norm(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            vec = rng.normal(size=8).astype(np.float32)
            assert np.linalg.norm(l2_normalize(vec)) == pytest.approx(1.0, abs=1e-4)

    def test_normalize_rejects_zero(self):
        with pytest.raises(ZeroVectorError):
            l2_normalize(np.zeros(4, dtype=np.float32))

    def test_cosine_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            vec = l2_normalize(rng.normal(size=16))
            assert cosine(vec, vec) == pytest.approx(1.0, abs=1e-6)

    def test_cosine_orthogonal_and_antipodal(self):
        e1 = np.array([1.0, 0.0], dtype=np.float32)
        e2 = np.array([0.0, 1.0], dtype=np.float32)
        assert cosine(e1, e2) == 0.0
        assert cosine(e1, -e1) == -1.0

    def test_cosine_symmetry_exact(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = rng.normal(size=8).astype(np.float32)
            b = rng.normal(size=8).astype(np.float32)
            assert cosine(a, b) == cosine(b, a)

    def test_cosine_equals_dot_after_normalization(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a = l2_normalize(rng.normal(size=8))
            b = l2_normalize(rng.normal(size=8))
            dot = float(np.dot(a.astype(np.float64), b.astype(np.float64)))
            assert cosine(a, b) == pytest.approx(dot, abs=1e-6)

    def test_cosine_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            cosine(np.ones(3, dtype=np.float32), np.ones(4, dtype=np.float32))

    def test_cosine_clamped(self):
        a = l2_normalize(np.array([1.0, 1.0, 1.0]))
        assert -1.0 <= cosine(a, a) <= 1.0


class TestHashProvider:
    def test_deterministic(self, provider):
        first = embed(provider, "the silk road shaped trade")
        second = embed(provider, "the silk road shaped trade")
        assert np.array_equal(first, second)

    def test_fresh_instance_matches(self, provider):
        other = HashEmbeddingProvider(dim=provider.dim, seed=provider.seed)
        assert np.array_equal(embed(provider, "same text"), embed(other, "same text"))

    def test_embed_returns_unit_norm(self, provider):
        assert np.linalg.norm(embed(provider, "any text at all")) == pytest.approx(1.0, abs=1e-4)

    def test_empty_text_rejected(self, provider):
        with pytest.raises(PreconditionError):
            embed(provider, "")

    def test_tokenless_text_is_zero_vector(self, provider):
        with pytest.raises(ZeroVectorError):
            embed(provider, "!!! ???")

    def test_shared_vocabulary_raises_similarity(self, provider):
        base = embed(provider, "stars planets telescopes astronomy galaxies")
        near = embed(provider, "telescopes watch stars and planets across astronomy")
        far = embed(provider, "sourdough hydration bakers crumb fermentation")
        assert cosine(base, near) > cosine(base, far)

    def test_token_vectors_shapes(self, provider):
        tokens, matrix = provider.token_vectors("the cat sat")
        assert tokens == ["the", "cat", "sat"]
        assert matrix.shape == (3, provider.dim)


class TestBuildIndex:
    def test_fixture_corpus_counts(self, fixture_corpus, provider, dense_index):
        assert len(dense_index) == fixture_corpus.lesson_count
        assert dense_index.dim == provider.dim
        assert dense_index.provider_tag == provider.tag

    def test_missing_summary_names_lesson(self, fixture_corpus, provider, tmp_path):
        from digdeeper.corpus import Lesson, Corpus

        lessons = list(fixture_corpus.lessons[:2]) + [
            Lesson(id="Lx", title="No summary", url="https://e.org/x", transcript="words here")
        ]
        with pytest.raises(PreconditionError, match="Lx"):
            build_index(Corpus(lessons), provider, "summary")

    def test_rebuild_is_value_identical(self, fixture_corpus, provider, dense_index):
        again, failed = build_index(fixture_corpus, provider, "summary")
        assert not failed
        assert again.ids == dense_index.ids
        assert np.array_equal(again.vectors, dense_index.vectors)

    def test_transcript_source_field(self, fixture_corpus, provider):
        index, failed = build_index(fixture_corpus, provider, "transcript")
        assert not failed
        assert len(index) == fixture_corpus.lesson_count

    def test_partial_failures_omitted(self, fixture_corpus, provider):
        class FlakyProvider:
            dim = provider.dim
            tag = "flaky"
            supports_token_vectors = False

            def embed_raw(self, texts):
                if any("exoplanets" in t for t in texts):
                    raise BackendError("boom")
                return provider.embed_raw(texts)

        index, failed = build_index(fixture_corpus, FlakyProvider(), "summary", batch_size=1)
        assert failed == ["L01"]
        assert len(index) == fixture_corpus.lesson_count - 1
        assert "L01" not in index

    def test_unknown_source_field(self, fixture_corpus, provider):
        with pytest.raises(PreconditionError):
            build_index(fixture_corpus, provider, "dig_deeper_text")


def brute_force_ranking(index, query, exclude=frozenset(), source=""):
    banned = set(exclude)
    if source:
        banned.add(source)
    scored = [
        (cosine(index.vector_for(lesson_id), query), lesson_id)
        for lesson_id in index.ids
        if lesson_id not in banned
    ]
    return [(lesson_id, score) for score, lesson_id in sorted(scored, key=lambda t: (-t[0], t[1]))]


class TestTopK:
    def test_full_k_is_permutation(self, dense_index, provider):
        query = embed(provider, "music and oceans")
        ranking = top_k(dense_index, query, k=len(dense_index))
        assert sorted(ranking.ids()) == sorted(dense_index.ids)

    def test_identity_query_ranks_first(self, dense_index):
        stored = dense_index.vector_for("L07")
        ranking = top_k(dense_index, stored, k=3)
        assert ranking.entries[0][0] == "L07"
        assert ranking.entries[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_source_lesson_always_excluded(self, dense_index):
        stored = dense_index.vector_for("L07")
        ranking = top_k(dense_index, stored, k=len(dense_index), source_lesson="L07")
        assert "L07" not in ranking.ids()
        assert len(ranking.entries) == len(dense_index) - 1

    def test_exclude_set_respected(self, dense_index, provider):
        query = embed(provider, "roman engineering")
        ranking = top_k(dense_index, query, k=5, exclude={"L11", "L12"})
        assert not {"L11", "L12"} & set(ranking.ids())

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(9)
        for trial in range(30):
            n = int(rng.integers(2, 16))
            dim = 8
            rows = [l2_normalize(rng.normal(size=dim)) for _ in range(n)]
            # Plant exact duplicates to force score ties.
            for dup in range(0, n, 3):
                rows[dup] = rows[0]
            index = DenseIndex(
                dim=dim,
                provider_tag="test",
                ids=[f"id{i:02d}" for i in range(n)],
                vectors=np.vstack(rows),
            )
            query = l2_normalize(rng.normal(size=dim))
            k = int(rng.integers(1, n + 1))
            expected = brute_force_ranking(index, query)[:k]
            got = list(top_k(index, query, k=k).entries)
            assert got == expected

    def test_k_must_be_positive(self, dense_index, provider):
        with pytest.raises(PreconditionError):
            top_k(dense_index, embed(provider, "x y"), k=0)

    def test_query_dim_checked(self, dense_index):
        with pytest.raises(DimensionMismatchError):
            top_k(dense_index, np.ones(3, dtype=np.float32), k=1)


class TestIndexPersistence:
    def test_roundtrip_bit_exact(self, dense_index, tmp_path):
        path = tmp_path / "index.ddix"
        save_index(dense_index, path)
        loaded = load_index(path)
        assert loaded.ids == dense_index.ids
        assert loaded.dim == dense_index.dim
        assert loaded.provider_tag == dense_index.provider_tag
        assert loaded.vectors.tobytes() == dense_index.vectors.tobytes()

    def test_save_is_deterministic(self, dense_index, tmp_path):
        p1, p2 = tmp_path / "a.ddix", tmp_path / "b.ddix"
        save_index(dense_index, p1)
        save_index(dense_index, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, dense_index, tmp_path):
        path = tmp_path / "index.ddix"
        save_index(dense_index, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(IndexFormatError):
            load_index(path)

    def test_unknown_version_rejected(self, dense_index, tmp_path):
        path = tmp_path / "index.ddix"
        save_index(dense_index, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(IndexFormatError):
            load_index(path)

    def test_truncated_rejected(self, dense_index, tmp_path):
        path = tmp_path / "index.ddix"
        save_index(dense_index, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(IndexFormatError):
            load_index(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IndexFormatError):
            load_index(tmp_path / "missing.ddix")


def embedding_body(vectors):
    import json

    return json.dumps({"data": [{"embedding": list(map(float, vec))} for vec in vectors]})


class TestHttpProvider:
    def make(self, transcript_responses, monkeypatch, **kwargs):
        monkeypatch.setenv("DD_EMBED_API_KEY", "secret")
        calls = []
        responses = list(transcript_responses)

        def transport(url, headers, payload):
            calls.append((url, payload))
            return responses.pop(0)

        provider = HttpEmbeddingProvider(
            "https://embed.example.org/v1",
            model="embedder-1",
            dim=3,
            transport=transport,
            sleeper=lambda s: None,
            retry=RetryPolicy(max_retries=2),
            **kwargs,
        )
        return provider, calls

    def test_success(self, monkeypatch):
        provider, calls = self.make([(200, embedding_body([[1, 2, 3], [4, 5, 6]]))], monkeypatch)
        vectors = provider.embed_raw(["a", "b"])
        assert len(vectors) == 2
        assert calls[0][1]["input"] == ["a", "b"]
        assert calls[0][0].endswith("/embeddings")

    def test_retries_on_429_then_succeeds(self, monkeypatch):
        provider, calls = self.make(
            [(429, ""), (429, ""), (200, embedding_body([[1, 0, 0]]))], monkeypatch
        )
        provider.embed_raw(["a"])
        assert len(calls) == 3

    def test_auth_error_no_retry(self, monkeypatch):
        provider, calls = self.make([(401, "")], monkeypatch)
        with pytest.raises(AuthenticationError):
            provider.embed_raw(["a"])
        assert len(calls) == 1

    def test_missing_api_key(self, monkeypatch):
        monkeypatch.delenv("DD_EMBED_API_KEY", raising=False)
        provider = HttpEmbeddingProvider(
            "https://embed.example.org/v1", model="m", dim=3, transport=lambda *a: (200, "")
        )
        with pytest.raises(AuthenticationError):
            provider.embed_raw(["a"])

    def test_wrong_dim_rejected(self, monkeypatch):
        provider, _ = self.make([(200, embedding_body([[1, 2]]))], monkeypatch)
        with pytest.raises(DimensionMismatchError):
            provider.embed_raw(["a"])
