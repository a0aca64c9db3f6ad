import numpy as np
import pytest

from conftest import EMB_FIXTURE_TEXT
from tdlm.data import VOCAB_SIZE, ByteTokenizer
from tdlm.embeddings import (EmbeddingFormatError, cooccurrence_counts, load_embeddings,
                             ppmi_embeddings, ppmi_matrix, save_embeddings, _fix_signs)

GOLDEN = "tests/data/golden_ppmi_emb.txt"


class TestPpmiStatistics:
    def test_alternating_corpus_distinct_rows(self):
        corpus = np.array([0, 1] * 200)
        emb = ppmi_embeddings(corpus, 2, d_e=2, window=1, seed=0)
        assert np.abs(emb[0] - emb[1]).max() > 1e-8
        cos = emb[0] @ emb[0] / (np.linalg.norm(emb[0]) ** 2)
        assert cos == pytest.approx(1.0)

    def test_identical_context_tokens_identical_rows(self):
        # tokens 2 and 3 always appear between the same neighbors
        corpus = np.array([0, 2, 1, 0, 3, 1] * 100)
        emb = ppmi_embeddings(corpus, 4, d_e=4, window=1, seed=0)
        np.testing.assert_allclose(emb[2], emb[3], atol=1e-10)

    def test_absent_token_zero_row(self):
        corpus = np.array([0, 1] * 50)
        emb = ppmi_embeddings(corpus, 5, d_e=3, window=1, seed=0)
        np.testing.assert_allclose(emb[4], 0.0, atol=1e-12)

    def test_counts_symmetric(self):
        corpus = np.random.default_rng(0).integers(0, 7, size=500)
        C = cooccurrence_counts(corpus, 7, window=3)
        np.testing.assert_array_equal(C, C.T)

    def test_ppmi_nonnegative_finite(self):
        corpus = np.random.default_rng(1).integers(0, 9, size=400)
        P = ppmi_matrix(cooccurrence_counts(corpus, 9, window=2))
        assert np.isfinite(P).all()
        assert (P >= 0).all()

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            ppmi_embeddings(np.array([], dtype=np.int64), 4, d_e=2)

    def test_rank_larger_than_vocab_rejected(self):
        with pytest.raises(ValueError):
            ppmi_embeddings(np.array([0, 1]), 2, d_e=3)


class TestGoldenFactorization:
    def test_matches_dense_eigendecomposition_oracle(self):
        ids = ByteTokenizer().encode(EMB_FIXTURE_TEXT)
        impl = ppmi_embeddings(ids, VOCAB_SIZE, d_e=8, window=2, seed=0)
        A = ppmi_matrix(cooccurrence_counts(ids, VOCAB_SIZE, 2))
        vals, vecs = np.linalg.eigh(A)
        order = np.argsort(-np.abs(vals), kind="stable")[:8]
        oracle = _fix_signs(vecs[:, order]) * np.sqrt(np.abs(vals[order]))[None, :]
        assert np.abs(impl - oracle).max() <= 1e-6

    def test_matches_stored_golden_file(self):
        ids = ByteTokenizer().encode(EMB_FIXTURE_TEXT)
        impl = ppmi_embeddings(ids, VOCAB_SIZE, d_e=8, window=2, seed=0)
        golden = load_embeddings(GOLDEN)
        assert golden.shape == (VOCAB_SIZE, 8)
        assert np.abs(impl - golden).max() <= 1e-6

    def test_deterministic_given_seed(self):
        ids = ByteTokenizer().encode(EMB_FIXTURE_TEXT[:400])
        a = ppmi_embeddings(ids, VOCAB_SIZE, d_e=4, window=2, seed=9)
        b = ppmi_embeddings(ids, VOCAB_SIZE, d_e=4, window=2, seed=9)
        np.testing.assert_array_equal(a, b)


class TestEmbeddingFile:
    def test_round_trip(self, tmp_path):
        emb = np.random.default_rng(0).standard_normal((5, 3))
        path = tmp_path / "e.emb"
        save_embeddings(emb, path)
        np.testing.assert_array_equal(load_embeddings(path), emb)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.emb"
        path.write_text("EMB ???\n")
        with pytest.raises(EmbeddingFormatError):
            load_embeddings(path)

    def test_row_count_mismatch(self, tmp_path):
        path = tmp_path / "short.emb"
        path.write_text("TDLM-EMB v1 V=3 D=2\n0.0 1.0\n")
        with pytest.raises(EmbeddingFormatError, match="rows"):
            load_embeddings(path)
