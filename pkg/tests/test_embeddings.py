"""Dataset model, file formats, synthetic generation and splitting."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyshield.embeddings import (
    Dataset, Embedding, EmbeddingFormatError, SyntheticSpec, format_embeddings, generate_synthetic,
    load_embeddings, save_embeddings, split,
)


def _write(tmp_path, text):
    path = tmp_path / "emb.txt"
    path.write_text(text)
    return path


class TestLoadEmbeddings:
    def test_three_rows_dim_four(self, tmp_path):
        text = "dim=4\n" + "".join(f"s{i}\t0\t1 2 3 {i}\n" for i in range(3))
        ds = load_embeddings(_write(tmp_path, text))
        assert len(ds) == 3
        assert ds.dim == 4
        assert ds.embeddings[2].values.tolist() == [1.0, 2.0, 3.0, 2.0]

    def test_short_second_row_names_row_2(self, tmp_path):
        text = "dim=4\na\t0\t1 2 3 4\nb\t0\t1 2 3\nc\t0\t1 2 3 4\n"
        with pytest.raises(EmbeddingFormatError, match="row 2"):
            load_embeddings(_write(tmp_path, text))

    def test_malformed_header(self, tmp_path):
        with pytest.raises(EmbeddingFormatError, match="header"):
            load_embeddings(_write(tmp_path, "n=4\na\t0\t1 2 3 4\n"))

    def test_non_finite_value_names_row(self, tmp_path):
        with pytest.raises(EmbeddingFormatError, match="row 1: non-finite"):
            load_embeddings(_write(tmp_path, "dim=2\na\t0\tnan 1\n"))

    def test_duplicate_pair_rejected(self, tmp_path):
        with pytest.raises(EmbeddingFormatError, match="duplicate"):
            load_embeddings(_write(tmp_path, "dim=1\na\t0\t1\na\t0\t2\n"))

    def test_text_round_trip_is_bit_exact(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(n_subjects=7, dim=9, intra_class_noise=0.3, seed=11))
        path = tmp_path / "rt.txt"
        save_embeddings(ds, path)
        back = load_embeddings(path)
        assert back == ds
        # serialized forms agree as well
        assert format_embeddings(back) == path.read_text()

    def test_binary_round_trip(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(n_subjects=5, dim=6, intra_class_noise=0.1, seed=2))
        path = tmp_path / "rt.npz"
        save_embeddings(ds, path, "binary")
        assert load_embeddings(path, "binary") == ds

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=3, max_size=3))
    def test_round_trip_any_finite_double(self, values):
        ds = Dataset([Embedding("a", "0", np.array(values))])
        text = format_embeddings(ds)
        line = text.splitlines()[1].split("\t")[2]
        assert [float(t) for t in line.split()] == values


class TestDataset:
    def test_rejects_inconsistent_dim(self):
        with pytest.raises(ValueError, match="shape"):
            Dataset([Embedding("a", "0", np.zeros(3)), Embedding("b", "0", np.zeros(4))])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            Dataset([Embedding("a", "0", np.array([np.inf]))])

    def test_reference_query_needs_two_samples(self):
        ds = Dataset([Embedding("a", "0", np.ones(2))])
        with pytest.raises(ValueError, match="exactly one reference and one query"):
            ds.reference_query()


class TestGenerateSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(n_subjects=10, dim=16, intra_class_noise=0.2, seed=7)
        assert generate_synthetic(spec) == generate_synthetic(spec)

    def test_zero_noise_samples_identical(self):
        ds = generate_synthetic(SyntheticSpec(n_subjects=10, dim=16, intra_class_noise=0.0, seed=7))
        _, refs, queries = ds.reference_query()
        assert np.array_equal(refs, queries)
        cos = np.sum(refs * queries, axis=1) / (np.linalg.norm(refs, axis=1) * np.linalg.norm(queries, axis=1))
        np.testing.assert_allclose(cos, 1.0, rtol=0, atol=1e-15)

    def test_mated_beats_non_mated_brute_force(self):
        ds = generate_synthetic(SyntheticSpec(n_subjects=100, dim=512, intra_class_noise=0.15, seed=1))
        mated, non = [], []
        for a, b in itertools.combinations(ds.embeddings, 2):
            s = float(a.values @ b.values / (np.linalg.norm(a.values) * np.linalg.norm(b.values)))
            (mated if a.subject_id == b.subject_id else non).append(s)
        assert len(mated) == 100
        assert len(non) == 200 * 199 // 2 - 100
        assert np.mean(mated) > np.mean(non)

    def test_unit_norm_samples(self):
        ds = generate_synthetic(SyntheticSpec(n_subjects=4, dim=8, intra_class_noise=0.5, seed=0))
        np.testing.assert_allclose(np.linalg.norm(ds.matrix(), axis=1), 1.0, rtol=1e-14)

    @pytest.mark.parametrize("kwargs", [dict(dim=0), dict(n_subjects=1), dict(intra_class_noise=-0.1)])
    def test_invalid_spec(self, kwargs):
        base = dict(n_subjects=4, dim=8, intra_class_noise=0.1, seed=0)
        base.update(kwargs)
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticSpec(**base))


class TestSplit:
    def test_ten_subjects_half(self):
        ds = generate_synthetic(SyntheticSpec(n_subjects=10, dim=8, seed=0))
        dev, ev = split(ds, 0.5, seed=3)
        assert len(dev.subjects()) == 5 and len(ev.subjects()) == 5
        assert not set(dev.subjects()) & set(ev.subjects())
        assert dev.split_tag == "dev" and ev.split_tag == "eval"

    def test_942_subjects(self):
        ds = generate_synthetic(SyntheticSpec(n_subjects=942, dim=8, seed=0))
        dev, ev = split(ds, 0.5, seed=0)
        assert (len(dev.subjects()), len(ev.subjects())) == (471, 471)

    def test_deterministic(self):
        ds = generate_synthetic(SyntheticSpec(n_subjects=30, dim=8, seed=0))
        assert split(ds, 0.3, 9) == split(ds, 0.3, 9)

    def test_empty_side_rejected(self):
        ds = generate_synthetic(SyntheticSpec(n_subjects=3, dim=8, seed=0))
        with pytest.raises(ValueError, match="empty"):
            split(ds, 0.1, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 2**31))
    def test_subject_disjoint(self, n, fraction, seed):
        ds = generate_synthetic(SyntheticSpec(n_subjects=n, dim=2, seed=0))
        try:
            dev, ev = split(ds, fraction, seed)
        except ValueError:
            return
        assert not set(dev.subjects()) & set(ev.subjects())
        assert sorted(dev.subjects() + ev.subjects()) == sorted(ds.subjects())
        assert len(dev) + len(ev) == len(ds)
