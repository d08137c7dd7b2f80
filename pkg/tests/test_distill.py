import numpy as np
import pytest

from ukd.datamodel import LabelSet, PairedDataset, generate_synthetic
from ukd.distill import (
    SIMILARITY_KINDS,
    RelevantPairSet,
    build_relevant_pairs,
    embed_all,
    merge_pair_lists,
    pair_precision,
    rank_neighbors,
    select_pairs,
    similarity,
    similarity_matrix,
)
from ukd.embednet import EmbeddingBatch, init_model

E = np.eye(4)


def emb(rows):
    return EmbeddingBatch(np.asarray(rows, dtype=float), "image")


class TestSimilarity:
    def test_hand_values(self):
        x = emb([E[0], E[0], E[1], -E[0]])
        assert similarity("teacher_image", 0, 1, emb_img=x) == 1.0
        assert similarity("teacher_image", 0, 2, emb_img=x) == pytest.approx((2 - np.sqrt(2)) / 2)
        assert similarity("teacher_image", 0, 2, emb_img=x) == pytest.approx(0.29289, abs=1e-5)
        assert similarity("teacher_image", 0, 3, emb_img=x) == 0.0

    def test_combined(self):
        x = emb([E[0], E[1]])
        y = emb([E[2], E[3]])
        assert similarity("teacher_combined", 0, 1, emb_img=x, emb_txt=y) == pytest.approx((4 - 2 * np.sqrt(2)) / 4)

    def test_raw_normalizes_on_the_fly(self):
        ds = PairedDataset([[3.0, 4.0], [6.0, 8.0], [0.0, 5.0]], [[1.0], [2.0], [3.0]])
        assert similarity("raw_image", 0, 1, raw=ds) == 1.0
        assert similarity("raw_text", 0, 2, raw=ds) == 1.0

    def test_missing_embeddings(self):
        with pytest.raises(ValueError):
            similarity("teacher_text", 0, 1, emb_img=emb([E[0], E[1]]))
        with pytest.raises(ValueError):
            similarity("bogus", 0, 1)

    @pytest.mark.parametrize("kind", SIMILARITY_KINDS)
    def test_symmetric_bounded_reflexive(self, kind):
        ds, _ = generate_synthetic(40, 3, 6, 5, 0.3, seed=0)
        m = init_model(6, 5, 12, 4, seed=0)
        ei, et = embed_all(m, ds)
        s = similarity_matrix(kind, ds, ei, et)
        np.testing.assert_allclose(s, s.T, atol=1e-12)
        assert s.min() >= 0 and s.max() <= 1
        np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-7)
        assert similarity(kind, 3, 7, ds, ei, et) == pytest.approx(s[3, 7], abs=1e-12)


class TestRankNeighbors:
    def test_full_ranking_is_permutation(self):
        x = emb(np.random.default_rng(0).standard_normal((10, 4)))
        x.rows /= np.linalg.norm(x.rows, axis=1, keepdims=True)
        out = rank_neighbors("teacher_image", 0, range(1, 10), 9, emb_img=x)
        assert sorted(out.tolist()) == list(range(1, 10))

    def test_identical_first(self):
        x = emb([E[0], -E[0], E[0], -E[0]])
        assert rank_neighbors("teacher_image", 0, [1, 2, 3], 1, emb_img=x)[0] == 2

    def test_tie_to_smaller_index(self):
        rows = [E[0]] + [E[3]] * 6
        rows[5] = rows[2] = E[1]
        assert rank_neighbors("teacher_image", 0, [5, 2], 2, emb_img=emb(rows)).tolist() == [2, 5]

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            rank_neighbors("teacher_image", 0, [1], 2, emb_img=emb([E[0], E[1]]))


class TestPairSet:
    def test_invariants(self):
        with pytest.raises(ValueError):
            RelevantPairSet([0], [0], [0.5], "x")
        with pytest.raises(ValueError):
            RelevantPairSet([0, 0], [1, 1], [0.5, 0.4], "x")
        with pytest.raises(ValueError):
            RelevantPairSet([0], [1], [1.5], "x")

    def test_csv_round_trip_and_order(self, tmp_path):
        p = RelevantPairSet([3, 0, 1, 2], [1, 2, 0, 0], [0.5, 0.9, 0.5, 0.1], "teacher_image")
        p.to_csv(tmp_path / "p.csv")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "i,j,score,source"
        assert [tuple(map(int, l.split(",")[:2])) for l in lines[1:]] == [(0, 2), (1, 0), (3, 1), (2, 0)]
        assert RelevantPairSet.from_csv(tmp_path / "p.csv") == p

    def test_bad_header(self, tmp_path):
        (tmp_path / "p.csv").write_text("a,b\n")
        with pytest.raises(ValueError):
            RelevantPairSet.from_csv(tmp_path / "p.csv")


def _list(i, j, s, src):
    return RelevantPairSet(i, j, s, src)


class TestMerge:
    def test_identical_lists(self):
        a = _list([0, 1, 2], [1, 2, 0], [0.9, 0.8, 0.7], "a")
        merged = merge_pair_lists([a, _list(a.i, a.j, a.score, "b")], 3)
        assert merged.as_set() == a.as_set()
        np.testing.assert_array_equal(merged.sorted().score, a.sorted().score)

    def test_max_score_and_union(self):
        a = _list([0, 1], [1, 2], [0.9, 0.2], "a")
        b = _list([1, 2], [2, 0], [0.6, 0.4], "b")
        merged = merge_pair_lists([a, b], 3)
        assert merged.as_set() == {(0, 1), (1, 2), (2, 0)}
        assert dict(zip(zip(merged.i.tolist(), merged.j.tolist()), merged.score.tolist()))[(1, 2)] == 0.6

    def test_budget_exact_and_rejected(self):
        a = _list([0, 1, 2], [1, 2, 0], [0.9, 0.8, 0.7], "a")
        assert len(merge_pair_lists([a], 3, budget=2)) == 2
        assert len(merge_pair_lists([a], 3, budget=6)) == 3
        with pytest.raises(ValueError):
            merge_pair_lists([a], 3, budget=7)

    def test_per_instance(self):
        a = _list([0, 0, 0, 1], [1, 2, 3, 0], [0.5, 0.9, 0.7, 0.1], "a")
        merged = merge_pair_lists([a], 4, per_instance_k=2)
        assert merged.as_set() == {(0, 2), (0, 3), (1, 0)}


class TestBuild:
    def setup_method(self):
        self.ds, self.labels = generate_synthetic(120, 4, 8, 6, 0.2, seed=5)
        self.model = init_model(8, 6, 16, 8, seed=1)

    def test_disjoint_lists_sum(self):
        pairs = build_relevant_pairs(self.model, self.ds, 3, 3)
        img = select_pairs("teacher_image", self.ds, 3, *embed_all(self.model, self.ds))
        txt = select_pairs("teacher_text", self.ds, 3, *embed_all(self.model, self.ds))
        assert pairs.as_set() == img.as_set() | txt.as_set()
        assert len(pairs) == len(img.as_set() | txt.as_set())

    def test_containment_and_budget(self):
        union = build_relevant_pairs(self.model, self.ds, 4, 2)
        cut = build_relevant_pairs(self.model, self.ds, 4, 2, total_budget=50)
        assert len(cut) == 50 and cut.as_set() <= union.as_set()
        assert cut.score.min() >= np.sort(union.score)[-50]

    def test_deterministic(self):
        a = build_relevant_pairs(self.model, self.ds, 5, 5, per_instance_k=5)
        b = build_relevant_pairs(self.model, self.ds, 5, 5, per_instance_k=5)
        assert a == b
        assert np.bincount(a.i, minlength=self.ds.n).max() == 5

    def test_no_self_pairs(self):
        p = build_relevant_pairs(self.model, self.ds, 10, 10)
        assert not (p.i == p.j).any()


class TestPairPrecision:
    def test_all_and_none(self):
        labels = LabelSet(np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=bool))
        good = RelevantPairSet([0, 2], [1, 3], [0.9, 0.8], "x")
        bad = RelevantPairSet([0, 1], [2, 3], [0.9, 0.8], "x")
        assert pair_precision(good, labels, 2) == 1.0
        assert pair_precision(bad, labels, 2) == 0.0

    def test_uses_top_k(self):
        labels = LabelSet(np.array([[1, 0], [1, 0], [0, 1]], dtype=bool))
        p = RelevantPairSet([0, 0], [1, 2], [0.9, 0.1], "x")
        assert pair_precision(p, labels, 1) == 1.0 and pair_precision(p, labels, 2) == 0.5

    def test_errors(self):
        p = RelevantPairSet([0], [1], [0.5], "x")
        with pytest.raises(ValueError):
            pair_precision(p, None, 1)
        with pytest.raises(ValueError):
            pair_precision(p, LabelSet(np.ones((2, 1), bool)), 2)

    def test_perfect_teacher_on_clean_data(self):
        # embeddings = class prototypes: every top pair shares a class
        ds, labels = generate_synthetic(200, 4, 8, 8, 0.0, seed=2, max_labels=1)
        e = EmbeddingBatch(ds.image_features / np.linalg.norm(ds.image_features, axis=1, keepdims=True), "image")
        pairs = select_pairs("teacher_image", ds, 10, e, e)
        cap = min(np.bincount(labels.labels.argmax(1))) - 1
        assert pair_precision(pairs, labels, len(pairs)) == 1.0 and cap >= 10
