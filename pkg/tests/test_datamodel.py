import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ukd.datamodel import (
    BadMagicError,
    DimensionMismatchError,
    LabelSet,
    NonFiniteValueError,
    PairedDataset,
    SplitSpec,
    TruncatedPayloadError,
    generate_synthetic,
    load_features,
    load_labels,
    make_split,
    oracle_relevant,
    save_features,
    save_labels,
)


def _header(n, d_i, d_t, magic=b"UKDF", version=1):
    return struct.pack("<4sIIII", magic, version, n, d_i, d_t)


class TestFeatureFile:
    def test_header_echo(self, tmp_path):
        p = tmp_path / "a.ukdf"
        p.write_bytes(_header(3, 4, 2) + np.arange(3 * 4 + 3 * 2, dtype="<f4").tobytes())
        ds = load_features(p)
        assert (ds.n, ds.d_image, ds.d_text) == (3, 4, 2)
        np.testing.assert_array_equal(ds.image_features.ravel(), np.arange(12))
        np.testing.assert_array_equal(ds.text_features.ravel(), np.arange(12, 18))

    def test_byte_identical_resave(self, tmp_path):
        p, q = tmp_path / "a.ukdf", tmp_path / "b.ukdf"
        rng = np.random.default_rng(3)
        p.write_bytes(_header(5, 3, 7) + rng.standard_normal(5 * 10).astype("<f4").tobytes())
        save_features(load_features(p), q)
        assert p.read_bytes() == q.read_bytes()

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "a.ukdf"
        p.write_bytes(_header(3, 4, 2) + np.zeros(2 * 4 + 2 * 2, dtype="<f4").tobytes())
        with pytest.raises(TruncatedPayloadError) as e:
            load_features(p)
        assert e.value.code == "truncated"

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "a.ukdf"
        p.write_bytes(_header(1, 1, 1, magic=b"NOPE") + b"\0" * 8)
        with pytest.raises(BadMagicError):
            load_features(p)

    def test_trailing_bytes_are_a_dimension_mismatch(self, tmp_path):
        p = tmp_path / "a.ukdf"
        p.write_bytes(_header(1, 1, 1) + b"\0" * 12)
        with pytest.raises(DimensionMismatchError):
            load_features(p)

    def test_non_finite(self, tmp_path):
        p = tmp_path / "a.ukdf"
        p.write_bytes(_header(1, 1, 1) + np.array([0.5, np.nan], dtype="<f4").tobytes())
        with pytest.raises(NonFiniteValueError):
            load_features(p)

    def test_error_codes_distinct(self):
        codes = {c.code for c in (BadMagicError, TruncatedPayloadError, DimensionMismatchError, NonFiniteValueError)}
        assert len(codes) == 4

    def test_tiny_file_size(self, tmp_path):
        p = tmp_path / "a.ukdf"
        save_features(PairedDataset([[0.5]], [[0.5]]), p)
        assert p.stat().st_size == 20 + 2 * 4

    def test_empty_path(self):
        with pytest.raises(OSError):
            save_features(PairedDataset([[0.5]], [[0.5]]), "")

    def test_random_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        ds = PairedDataset(rng.standard_normal((100, 8)), rng.standard_normal((100, 6)))
        save_features(ds, tmp_path / "r.ukdf")
        assert load_features(tmp_path / "r.ukdf") == ds

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(1, 6),
        st.integers(1, 5),
        st.integers(1, 5),
        st.integers(0, 2**32 - 1),
    )
    def test_round_trip_property(self, tmp_path_factory, n, d_i, d_t, seed):
        rng = np.random.default_rng(seed)
        ds = PairedDataset(rng.standard_normal((n, d_i)) * 1e3, rng.standard_normal((n, d_t)))
        p = tmp_path_factory.mktemp("rt") / "x.ukdf"
        save_features(ds, p)
        assert load_features(p) == ds


class TestPairedDataset:
    def test_row_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            PairedDataset(np.zeros((3, 2)), np.zeros((2, 2)))

    def test_rejects_nan(self):
        with pytest.raises(NonFiniteValueError):
            PairedDataset([[np.inf]], [[0.0]])


class TestLabels:
    def test_round_trip(self, tmp_path):
        _, labels = generate_synthetic(37, 11, 4, 4, 0.1, seed=2)
        save_labels(labels, tmp_path / "l.ukdl")
        raw = (tmp_path / "l.ukdl").read_bytes()
        assert raw[:4] == b"UKDL" and len(raw) == 12 + 37 * 2
        assert load_labels(tmp_path / "l.ukdl") == labels

    def test_lsb_first(self, tmp_path):
        lab = np.zeros((1, 10), dtype=bool)
        lab[0, [0, 9]] = True
        save_labels(LabelSet(lab), tmp_path / "l.ukdl")
        assert (tmp_path / "l.ukdl").read_bytes()[12:] == bytes([0b00000001, 0b00000010])

    def test_every_instance_labelled(self):
        with pytest.raises(ValueError):
            LabelSet(np.array([[True, False], [False, False]]))

    def test_oracle(self):
        lab = np.zeros((3, 4), dtype=bool)
        lab[0, [1, 3]] = True
        lab[1, 3] = True
        lab[2, 2] = True
        labels = LabelSet(lab)
        assert oracle_relevant(labels, 0, 1)
        assert not oracle_relevant(labels, 0, 2)
        assert all(oracle_relevant(labels, i, i) for i in range(3))
        with pytest.raises(IndexError):
            oracle_relevant(labels, 0, 3)

    def test_relevance_matrix_symmetric(self):
        _, labels = generate_synthetic(50, 5, 3, 3, 0.0, seed=1)
        rel = labels.relevance()
        assert np.array_equal(rel, rel.T) and rel.diagonal().all()


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(40, 4, 6, 5, 0.2, seed=9)
        b = generate_synthetic(40, 4, 6, 5, 0.2, seed=9)
        assert a[0] == b[0] and a[1] == b[1]

    def test_noise_free_single_label_classes_collapse(self):
        ds, labels = generate_synthetic(60, 4, 8, 5, 0.0, seed=0, max_labels=1)
        rel = labels.relevance()
        same = (ds.image_features[:, None, :] == ds.image_features[None, :, :]).all(axis=2)
        assert np.array_equal(same, rel)

    def test_one_or_two_labels(self):
        _, labels = generate_synthetic(500, 6, 4, 4, 0.1, seed=0)
        counts = labels.labels.sum(axis=1)
        assert set(np.unique(counts)) == {1, 2}

    @pytest.mark.parametrize(
        "kwargs",
        [dict(n_classes=1), dict(d_image=1), dict(noise=-0.1), dict(n_pairs=0)],
    )
    def test_invalid(self, kwargs):
        args = dict(n_pairs=10, n_classes=3, d_image=4, d_text=4, noise=0.1, seed=0) | kwargs
        with pytest.raises(ValueError):
            generate_synthetic(**args)

    def test_raw_nearest_neighbour_shares_a_label(self):
        # brute-force 1-NN over normalized image features
        ds, labels = generate_synthetic(200, 4, 64, 32, 0.1, seed=0)
        x = ds.image_features / np.linalg.norm(ds.image_features, axis=1, keepdims=True)
        hits = 0
        for i in range(ds.n):
            d = [np.linalg.norm(x[i] - x[j]) if j != i else np.inf for j in range(ds.n)]
            hits += oracle_relevant(labels, i, int(np.argmin(d)))
        assert hits / ds.n > 0.9


class TestSplit:
    def test_disjoint_and_complete(self):
        sp = make_split(100, 20, seed=4)
        assert len(sp.query_indices) == 20
        assert np.array_equal(np.sort(np.concatenate([sp.query_indices, sp.retrieval_indices])), np.arange(100))
        assert make_split(100, 20, seed=4).to_dict() == sp.to_dict()

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            SplitSpec([1, 2], [2, 3])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            SplitSpec([0], [5]).validate(5)
