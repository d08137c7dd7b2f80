import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ukd.datamodel import SplitSpec, generate_synthetic, make_split
from ukd.embednet import init_model
from ukd import kernels
from ukd.retrieval import (
    EvalReport,
    HashCodeMatrix,
    average_precision,
    evaluate_codes,
    evaluate_cross_modal,
    hamming_distance,
    hamming_matrix,
    mean_average_precision,
    pack,
    quantize,
    rank_by_hamming,
    score_codes,
)


def brute_ap(rel):
    """Textbook definition, written independently of the library code."""
    r_total = sum(rel)
    if r_total == 0:
        return 0.0
    total, seen = 0.0, 0
    for r, hit in enumerate(rel, start=1):
        if hit:
            seen += 1
            total += seen / r
    return total / r_total


def naive_hamming(a, b):
    return sum(1 for x, y in zip(a, b) if x != y)


class TestQuantize:
    def test_tie_rule(self):
        np.testing.assert_array_equal(quantize([[0.3, -0.1, 0.0]]).unpack(), [[1, -1, 1]])

    def test_deterministic(self):
        f = np.random.default_rng(0).standard_normal((20, 70))
        assert quantize(f) == quantize(f)

    def test_sign_flip_flips_every_bit(self):
        f = np.random.default_rng(1).standard_normal((10, 33))
        assert (quantize(f).unpack() == -quantize(-f).unpack()).all()

    def test_non_finite(self):
        with pytest.raises(ValueError):
            quantize([[np.nan, 1.0]])


class TestPacking:
    @pytest.mark.parametrize("k", [1, 8, 63, 64, 65, 128, 130])
    def test_round_trip(self, k):
        codes = np.where(np.random.default_rng(k).random((12, k)) < 0.5, -1, 1)
        hc = pack(codes)
        assert hc.words.shape == (12, -(-k // 64))
        np.testing.assert_array_equal(hc.unpack(), codes)

    def test_lsb_first(self):
        codes = -np.ones((1, 70), dtype=int)
        codes[0, [0, 65]] = 1
        hc = pack(codes)
        assert hc.words[0, 0] == 1 and hc.words[0, 1] == 2

    def test_high_bits_must_be_zero(self):
        with pytest.raises(ValueError):
            HashCodeMatrix(np.array([[1 << 5]], dtype=np.uint64), k=4)


class TestHamming:
    def test_examples(self):
        a, b = pack([[1, 1, -1, 1]]), pack([[1, -1, -1, -1]])
        assert hamming_distance(a[0], a[0]) == 0
        assert hamming_distance(a[0], b[0]) == 2

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            hamming_distance(pack(np.ones((1, 70)))[0], pack(np.ones((1, 10)))[0])

    def test_matches_per_bit_loop(self):
        rng = np.random.default_rng(4)
        for k in (16, 100):
            a = np.where(rng.random((10_000 // 2, k)) < 0.5, -1, 1)
            b = np.where(rng.random((10_000 // 2, k)) < 0.5, -1, 1)
            pa, pb = pack(a), pack(b)
            for r in range(len(a)):
                assert hamming_distance(pa[r], pb[r]) == naive_hamming(a[r], b[r])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 130), st.integers(0, 2**32 - 1))
    def test_metric(self, k, seed):
        rng = np.random.default_rng(seed)
        x, y, z = pack(np.where(rng.random((3, k)) < 0.5, -1, 1))
        d = hamming_distance
        assert d(x, y) == d(y, x)
        assert d(x, x) == 0
        assert d(x, z) <= d(x, y) + d(y, z)

    def test_matrix_agrees(self):
        rng = np.random.default_rng(2)
        q = pack(np.where(rng.random((7, 90)) < 0.5, -1, 1))
        db = pack(np.where(rng.random((11, 90)) < 0.5, -1, 1))
        m = hamming_matrix(q, db)
        assert m.shape == (7, 11)
        assert all(m[i, j] == hamming_distance(q[i], db[j]) for i in range(7) for j in range(11))


class TestRanking:
    def test_query_in_db_first(self):
        rng = np.random.default_rng(0)
        db = pack(np.where(rng.random((30, 16)) < 0.5, -1, 1))
        assert rank_by_hamming(db[17], db)[0] == min(np.flatnonzero([hamming_distance(db[17], db[j]) == 0 for j in range(30)]))

    def test_ties_identity(self):
        db = pack(np.ones((9, 12)))
        np.testing.assert_array_equal(rank_by_hamming(db[0], db), np.arange(9))

    def test_full_sort_oracle(self):
        rng = np.random.default_rng(8)
        for trial in range(50):
            k = int(rng.integers(1, 80))
            db = pack(np.where(rng.random((200, k)) < 0.5, -1, 1))
            q = pack(np.where(rng.random((1, k)) < 0.5, -1, 1))[0]
            d = [hamming_distance(q, db[j]) for j in range(200)]
            expected = sorted(range(200), key=lambda j: (d[j], j))
            np.testing.assert_array_equal(rank_by_hamming(q, db), expected)


class TestAveragePrecision:
    def test_hand_value(self):
        assert average_precision([True, False, True]) == pytest.approx(5 / 6)

    def test_edges(self):
        assert average_precision([True] * 5) == 1.0
        assert average_precision([False] * 5) == 0.0
        assert average_precision([True]) == 1.0
        with pytest.raises(ValueError):
            average_precision([])

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(12)
        for case in range(1000):
            m = int(rng.integers(1, 60))
            if case % 10 == 0:
                rel = [False] * m
            elif case % 10 == 1:
                rel = [True] * m
            else:
                rel = (rng.random(m) < rng.random()).tolist()
            assert abs(average_precision(rel) - brute_ap(rel)) <= 1e-12

    def test_zero_relevant_excluded_from_map(self):
        assert mean_average_precision([0.5, 0.0, 1.0], [2, 0, 1]) == 0.75


class TestScoring:
    def test_precision_at_full_list_is_relevance_fraction(self):
        rng = np.random.default_rng(3)
        q = pack(np.where(rng.random((5, 16)) < 0.5, -1, 1))
        db = pack(np.where(rng.random((40, 16)) < 0.5, -1, 1))
        rel = rng.random((5, 40)) < 0.3
        _, prec, curve, ap, n_rel = score_codes(q, db, rel, k_list=(1, 10, 40))
        assert prec[40] == pytest.approx(rel.mean(), abs=1e-15)
        assert all(0 <= v <= 1 for v in prec.values())
        assert curve[-1][0] == 40
        # per query the full-list precision is exact
        _, _, p_at, _ = kernels.rank_scores(
            hamming_matrix(q, db), rel.astype(np.uint8), 16, np.array([40]), np.array([40])
        )
        np.testing.assert_array_equal(p_at[:, 0], rel.sum(axis=1) / 40)

    def test_matches_brute_force_ap(self):
        rng = np.random.default_rng(6)
        q = pack(np.where(rng.random((6, 12)) < 0.5, -1, 1))
        db = pack(np.where(rng.random((50, 12)) < 0.5, -1, 1))
        rel = rng.random((6, 50)) < 0.4
        _, _, _, ap, _ = score_codes(q, db, rel)
        for i in range(6):
            order = rank_by_hamming(q[i], db)
            assert abs(ap[i] - brute_ap(rel[i, order].tolist())) <= 1e-12


class TestEvaluate:
    def test_perfect_codes(self):
        # sigma = 0, single label: every instance of a class shares its code
        ds, labels = generate_synthetic(120, 4, 8, 8, 0.0, seed=0, max_labels=1)
        split = make_split(120, 30, seed=0)
        cls = labels.labels.argmax(axis=1)
        codes = np.where(np.eye(4, 8, dtype=bool)[cls], 1, -1)
        q = pack(codes[split.query_indices])
        db = pack(codes[split.retrieval_indices])
        rep = evaluate_codes(q, db, labels.relevance(split.query_indices, split.retrieval_indices), "i2t")
        assert rep.map == 1.0

    def test_perfect_prototype_model(self):
        # with sigma = 0 every row is its class prototype, so a model can send each
        # prototype exactly onto a class code: hidden = tanh(P P^T), W2 solves hidden @ W2 = codes
        ds, labels = generate_synthetic(160, 4, 12, 10, 0.0, seed=3, max_labels=1)
        split = make_split(160, 40, seed=3)
        cls = labels.labels.argmax(axis=1)
        codes = np.where(np.eye(4, 8, dtype=bool), 1.0, -1.0)
        model = init_model(12, 10, 4, 8, seed=0)
        for m in ("image", "text"):
            x = ds.features(m)
            protos = np.stack([x[cls == c][0] for c in range(4)])
            protos /= np.linalg.norm(protos, axis=1, keepdims=True)
            model.params[f"{m}.W1"] = protos.T.copy()
            model.params[f"{m}.W2"] = np.linalg.solve(np.tanh(protos @ protos.T), codes)
        for d in ("i2t", "t2i"):
            assert evaluate_cross_modal(model, ds, labels, split, d).map == 1.0

    def test_random_model_near_prior(self):
        maps, priors = [], []
        for seed in range(5):
            ds, labels = generate_synthetic(400, 2, 16, 16, 0.3, seed=seed, max_labels=1)
            split = make_split(400, 80, seed=seed)
            rep = evaluate_cross_modal(init_model(16, 16, 32, 16, seed=seed + 100), ds, labels, split, "i2t")
            maps.append(rep.map)
            priors.append(labels.relevance(split.query_indices, split.retrieval_indices).mean())
        assert abs(np.mean(maps) - np.mean(priors)) <= 0.1

    def test_deterministic_and_json(self, tmp_path):
        ds, labels = generate_synthetic(200, 4, 16, 8, 0.2, seed=1)
        split = make_split(200, 40, seed=1)
        m = init_model(16, 8, 32, 8, seed=0)
        a = evaluate_cross_modal(m, ds, labels, split, "t2i")
        b = evaluate_cross_modal(m, ds, labels, split, "t2i")
        a.write(tmp_path / "a.json", tmp_path / "a.csv")
        b.write(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        d = json.loads((tmp_path / "a.json").read_text())
        assert d["map_cutoff"] == "all" and d["k_bits"] == 8
        assert EvalReport.from_dict(d).to_dict() == d
        assert (tmp_path / "a.csv").read_text().startswith("rank,precision\n")

    def test_bad_direction_and_empty_split(self):
        ds, labels = generate_synthetic(50, 3, 4, 4, 0.2, seed=1)
        m = init_model(4, 4, 8, 4, seed=0)
        with pytest.raises(ValueError):
            evaluate_cross_modal(m, ds, labels, make_split(50, 10, 0), "image")
        with pytest.raises(ValueError):
            evaluate_cross_modal(m, ds, labels, SplitSpec([], [1, 2]), "i2t")
        with pytest.raises(ValueError):
            evaluate_cross_modal(m, ds, None, make_split(50, 10, 0), "i2t")
