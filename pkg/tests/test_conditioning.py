"""Vocabulary, embedding matrix, K-shot averaging, class registration, export."""

import numpy as np
import pytest

from soundext.conditioning import (
    ClassVocabulary,
    EmbeddingMatrix,
    average_embeddings,
    encode_enrollment,
    encode_one_hot,
    export_embedding_matrix,
    import_embedding_matrix,
    init_embedding_matrix,
    register_class,
)
from soundext.model import build_model, micro_config
from soundext.signal import Waveform

SR = 8000


def wf(seed, n=800):
    return Waveform(np.random.default_rng(seed).standard_normal(n).astype(np.float32), SR)


class TestVocabulary:
    def test_stable_indices(self):
        vocab = ClassVocabulary(["b", "a", "c"])
        assert vocab.index("b") == 0
        assert vocab.index("c") == 2
        assert vocab.label(1) == "a"

    def test_rejects_duplicates(self):
        with pytest.raises(ValueError, match="unique"):
            ClassVocabulary(["a", "a"])

    def test_unknown_label(self):
        with pytest.raises(KeyError):
            ClassVocabulary(["a"]).index("b")

    def test_with_label_appends(self):
        vocab = ClassVocabulary(["a", "b"]).with_label("c")
        assert vocab.labels == ["a", "b", "c"]
        with pytest.raises(ValueError, match="already"):
            vocab.with_label("a")


class TestEncodeOneHot:
    def test_identity_matrix_columns(self):
        matrix = EmbeddingMatrix(np.eye(2, dtype=np.float32))
        assert np.array_equal(encode_one_hot(0, matrix), [1.0, 0.0])
        assert np.array_equal(encode_one_hot(1, matrix), [0.0, 1.0])

    def test_random_matrix_column_oracle(self):
        values = np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32)
        matrix = EmbeddingMatrix(values)
        column = np.array([values[row][2] for row in range(4)], dtype=np.float32)
        assert np.array_equal(encode_one_hot(2, matrix), column)

    def test_exhaustive_column_reproduction(self):
        matrix = init_embedding_matrix(8, 5, seed=3)
        for n in range(5):
            assert np.array_equal(encode_one_hot(n, matrix), matrix.values[:, n])

    def test_out_of_range_rejected(self):
        matrix = init_embedding_matrix(4, 2)
        with pytest.raises(IndexError):
            encode_one_hot(2, matrix)
        with pytest.raises(IndexError):
            encode_one_hot(-1, matrix)


class TestEncodeEnrollment:
    def test_dimension_contract_across_lengths(self):
        model = build_model(micro_config(), 2, seed=0)
        for n in (SR, 4 * SR):
            emb = encode_enrollment(wf(n, n=n), model.enrollment)
            assert emb.shape == (8,)

    def test_deterministic(self):
        model = build_model(micro_config(), 2, seed=0)
        a = encode_enrollment(wf(1), model.enrollment)
        b = encode_enrollment(wf(1), model.enrollment)
        assert np.array_equal(a, b)


class TestAverageEmbeddings:
    def test_single_sample_is_identity(self):
        model = build_model(micro_config(), 2, seed=0)
        embed = lambda w: encode_enrollment(w, model.enrollment)
        single = embed(wf(5))
        np.testing.assert_allclose(average_embeddings([wf(5)], embed), single, rtol=1e-6)

    def test_mean_of_copies_is_idempotent(self):
        model = build_model(micro_config(), 2, seed=0)
        embed = lambda w: encode_enrollment(w, model.enrollment)
        single = embed(wf(6))
        avg = average_embeddings([wf(6)] * 4, embed)
        np.testing.assert_allclose(avg, single, rtol=1e-6, atol=1e-7)

    def test_stubbed_encoder_arithmetic_mean(self):
        table = {800: np.array([1.0, 0.0]), 801: np.array([0.0, 1.0])}
        stub = lambda w: table[len(w)]
        avg = average_embeddings([wf(0, n=800), wf(0, n=801)], stub)
        assert np.array_equal(avg, [0.5, 0.5])

    def test_permutation_invariant(self):
        model = build_model(micro_config(), 2, seed=0)
        embed = lambda w: encode_enrollment(w, model.enrollment)
        samples = [wf(i) for i in range(4)]
        a = average_embeddings(samples, embed)
        b = average_embeddings(samples[::-1], embed)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-7)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            average_embeddings([], lambda w: np.zeros(2))


class TestRegisterClass:
    def test_appends_without_perturbing(self):
        matrix = init_embedding_matrix(4, 3, seed=1)
        vocab = ClassVocabulary(["a", "b", "c"])
        before = matrix.values.copy()
        new_col = np.arange(4, dtype=np.float32)
        bigger, vocab2 = register_class(matrix, vocab, "d", new_col)
        assert bigger.values.shape == (4, 4)
        assert np.array_equal(bigger.values[:, :3], before)
        assert np.array_equal(bigger.values[:, 3], new_col)
        assert vocab2.index("d") == 3
        assert bigger.trainable[3]

    def test_duplicate_label_rejected(self):
        matrix = init_embedding_matrix(4, 1, seed=1)
        vocab = ClassVocabulary(["a"])
        bigger, vocab2 = register_class(matrix, vocab, "b", np.zeros(4))
        with pytest.raises(ValueError, match="already"):
            register_class(bigger, vocab2, "b", np.zeros(4))

    def test_dimension_mismatch_rejected(self):
        matrix = init_embedding_matrix(4, 1)
        with pytest.raises(ValueError, match="dimension"):
            register_class(matrix, ClassVocabulary(["a"]), "b", np.zeros(5))


class TestExportImport:
    def test_binary_roundtrip(self, tmp_path):
        matrix = init_embedding_matrix(16, 5, seed=9)
        vocab = ClassVocabulary([f"c{i}" for i in range(5)])
        path = tmp_path / "emb.bin"
        export_embedding_matrix(matrix, vocab, path)
        loaded, vocab2 = import_embedding_matrix(path)
        assert np.array_equal(loaded.values, matrix.values)
        assert vocab2.labels == vocab.labels

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            import_embedding_matrix(path)

    def test_truncated_payload_rejected(self, tmp_path):
        matrix = init_embedding_matrix(8, 2, seed=0)
        vocab = ClassVocabulary(["a", "b"])
        path = tmp_path / "emb.bin"
        export_embedding_matrix(matrix, vocab, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValueError, match="payload"):
            import_embedding_matrix(path)
