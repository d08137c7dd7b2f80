"""Similarity estimates from raw features or teacher embeddings, relevant-pair selection
and the label-oracle precision diagnostic."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .datamodel import LabelSet, PairedDataset
from .embednet import TwoPathwayModel, forward, l2_normalize

SIMILARITY_KINDS = ("raw_image", "raw_text", "teacher_image", "teacher_text", "teacher_combined")


@dataclass(eq=False)
class RelevantPairSet:
    """Sparse binary S: every stored (i, j) has S_ij = 1. Self pairs are never stored."""

    i: np.ndarray
    j: np.ndarray
    score: np.ndarray
    source: str
    per_instance_k: int | None = None

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.score = np.asarray(self.score, dtype=np.float64)
        if not (self.i.shape == self.j.shape == self.score.shape):
            raise ValueError("i, j, score must have equal length")
        if self.score.size and (self.score.min() < 0 or self.score.max() > 1):
            raise ValueError("scores must lie in [0, 1]")
        if (self.i == self.j).any():
            raise ValueError("self pairs are implicit and may not be stored")
        if self.i.size and np.unique(np.stack([self.i, self.j]), axis=1).shape[1] != self.i.size:
            raise ValueError("duplicate (i, j) pair")

    def __len__(self):
        return self.i.size

    def order(self) -> np.ndarray:
        """Descending score, then ascending (i, j)."""
        return np.lexsort((self.j, self.i, -self.score))

    def sorted(self) -> RelevantPairSet:
        o = self.order()
        return RelevantPairSet(self.i[o], self.j[o], self.score[o], self.source, self.per_instance_k)

    def top(self, k: int) -> RelevantPairSet:
        o = self.order()[:k]
        return RelevantPairSet(self.i[o], self.j[o], self.score[o], self.source, self.per_instance_k)

    def as_set(self) -> set[tuple[int, int]]:
        return set(zip(self.i.tolist(), self.j.tolist()))

    def __eq__(self, other):
        if not isinstance(other, RelevantPairSet):
            return NotImplemented
        a, b = self.sorted(), other.sorted()
        return (
            a.source == b.source
            and np.array_equal(a.i, b.i)
            and np.array_equal(a.j, b.j)
            and np.array_equal(a.score, b.score)
        )

    def to_csv(self, path) -> None:
        s = self.sorted()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "j", "score", "source"])
            for i, j, sc in zip(s.i.tolist(), s.j.tolist(), s.score.tolist()):
                w.writerow([i, j, repr(sc), s.source])

    @classmethod
    def from_csv(cls, path, per_instance_k: int | None = None) -> RelevantPairSet:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["i", "j", "score", "source"]:
                raise ValueError(f"{path}: bad pair CSV header {header}")
            rows = list(reader)
        sources = {r[3] for r in rows}
        if len(sources) > 1:
            raise ValueError(f"{path}: mixed sources {sorted(sources)}")
        source = sources.pop() if sources else "empty"
        return cls(
            [int(r[0]) for r in rows],
            [int(r[1]) for r in rows],
            [float(r[2]) for r in rows],
            source,
            per_instance_k,
        )


# ---------------------------------------------------------------------------
# similarity functions


def embed_all(model: TwoPathwayModel, dataset: PairedDataset):
    return forward(model, dataset.image_features, "image").rows, forward(model, dataset.text_features, "text").rows


def _spaces(kind, raw, emb_img, emb_txt) -> list[np.ndarray]:
    if kind not in SIMILARITY_KINDS:
        raise ValueError(f"unknown similarity kind {kind!r}")
    if kind == "raw_image":
        return [l2_normalize(raw.image_features)[0]]
    if kind == "raw_text":
        return [l2_normalize(raw.text_features)[0]]
    need = {"teacher_image": [emb_img], "teacher_text": [emb_txt], "teacher_combined": [emb_img, emb_txt]}[kind]
    if any(e is None for e in need):
        raise ValueError(f"{kind} similarity needs teacher embeddings")
    return [np.asarray(getattr(e, "rows", e), dtype=np.float64) for e in need]


def similarity(kind, i, j, raw=None, emb_img=None, emb_txt=None) -> float:
    """One entry of S under ``kind``: ``(2 - |x_i - x_j|)/2`` per space, averaged over the
    spaces involved (image and text for ``teacher_combined``)."""
    spaces = _spaces(kind, raw, emb_img, emb_txt)
    dists = [float(np.linalg.norm(x[i] - x[j])) for x in spaces]
    score = (2 * len(spaces) - sum(dists)) / (2 * len(spaces))
    return min(1.0, max(0.0, score))


def similarity_matrix(kind, raw=None, emb_img=None, emb_txt=None, rows=None, cols=None) -> np.ndarray:
    spaces = _spaces(kind, raw, emb_img, emb_txt)
    total = None
    for x in spaces:
        a = x if rows is None else x[np.asarray(rows)]
        b = x if cols is None else x[np.asarray(cols)]
        d = cdist(a, b)
        total = d if total is None else total + d
    scores = (2 * len(spaces) - total) / (2 * len(spaces))
    return np.clip(scores, 0.0, 1.0)


def rank_neighbors(kind, i: int, candidates, k: int, raw=None, emb_img=None, emb_txt=None) -> np.ndarray:
    """Top-k candidates of instance i by descending score; ties go to the smaller index."""
    cand = np.asarray(sorted(set(int(c) for c in candidates)), dtype=np.int64)
    if k > cand.size:
        raise ValueError(f"k={k} exceeds {cand.size} candidates")
    scores = similarity_matrix(kind, raw, emb_img, emb_txt, rows=[i], cols=cand)[0]
    return cand[np.lexsort((cand, -scores))[:k]]


def _top_k_per_row(scores: np.ndarray, k: int):
    """Top-k columns of each row excluding the diagonal; stable so ties keep index order."""
    n = scores.shape[0]
    if k > n - 1:
        raise ValueError(f"k={k} exceeds the {n - 1} non-self candidates")
    s = scores.copy()
    np.fill_diagonal(s, -np.inf)
    cols = np.argsort(-s, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    return rows, cols.ravel(), np.take_along_axis(scores, cols, axis=1).ravel()


def select_pairs(kind, raw: PairedDataset, k: int, emb_img=None, emb_txt=None) -> RelevantPairSet:
    """Per-instance top-k neighbors under a single similarity function."""
    scores = similarity_matrix(kind, raw, emb_img, emb_txt)
    i, j, sc = _top_k_per_row(scores, k)
    return RelevantPairSet(i, j, sc, kind, k)


def merge_pair_lists(lists, n: int, budget=None, per_instance_k=None, source="merged") -> RelevantPairSet:
    """Union of pair lists; a pair nominated more than once keeps its highest score.

    ``budget`` keeps the globally highest-scoring pairs, ``per_instance_k`` the best pairs
    of each anchor i. Neither keeps the whole union.
    """
    if budget is not None and per_instance_k is not None:
        raise ValueError("choose either a global budget or a per-instance k")
    if budget is not None and budget > n * (n - 1):
        raise ValueError(f"budget {budget} exceeds the {n * (n - 1)} available pairs")
    i = np.concatenate([p.i for p in lists])
    j = np.concatenate([p.j for p in lists])
    sc = np.concatenate([p.score for p in lists])
    key = i * n + j
    o = np.lexsort((-sc, key))
    first = np.ones(o.size, dtype=bool)
    first[1:] = key[o][1:] != key[o][:-1]
    keep = o[first]
    i, j, sc = i[keep], j[keep], sc[keep]
    if budget is not None:
        o = np.lexsort((j, i, -sc))[:budget]
        i, j, sc = i[o], j[o], sc[o]
    elif per_instance_k is not None:
        o = np.lexsort((j, -sc, i))
        i, j, sc = i[o], j[o], sc[o]
        starts = np.searchsorted(i, i, side="left")
        rank = np.arange(i.size) - starts
        sel = rank < per_instance_k
        i, j, sc = i[sel], j[sel], sc[sel]
    return RelevantPairSet(i, j, sc, source, per_instance_k).sorted()


def build_relevant_pairs(
    teacher: TwoPathwayModel,
    dataset: PairedDataset,
    k_img: int,
    k_txt: int,
    total_budget: int | None = None,
    per_instance_k: int | None = None,
) -> RelevantPairSet:
    """Two neighbor lists, one per modality of the teacher's embedding space, merged into one.

    With ``total_budget`` the merged union is cut to that many highest-scoring pairs
    (supervised student); with ``per_instance_k`` every anchor keeps its best k
    (unsupervised student). With neither the whole union is returned.
    """
    emb_img, emb_txt = embed_all(teacher, dataset)
    lists = []
    if k_img > 0:
        lists.append(select_pairs("teacher_image", dataset, k_img, emb_img, emb_txt))
    if k_txt > 0:
        lists.append(select_pairs("teacher_text", dataset, k_txt, emb_img, emb_txt))
    if not lists:
        raise ValueError("k_img and k_txt cannot both be zero")
    if total_budget is not None:
        source = f"merged:k_img={k_img},k_txt={k_txt},budget={total_budget}"
    elif per_instance_k is not None:
        source = f"merged:k_img={k_img},k_txt={k_txt},per_instance={per_instance_k}"
    else:
        source = f"merged:k_img={k_img},k_txt={k_txt}"
    return merge_pair_lists(lists, dataset.n, total_budget, per_instance_k, source)


def pair_precision(pairs: RelevantPairSet, labels: LabelSet, k: int | None = None) -> float:
    """Fraction of the k highest-scoring pairs whose label sets overlap."""
    if labels is None:
        raise ValueError("pair precision needs labels")
    k = len(pairs) if k is None else k
    if k > len(pairs) or k < 1:
        raise ValueError(f"k={k} outside [1, {len(pairs)}]")
    top = pairs.top(k)
    lab = labels.labels
    return float(np.mean((lab[top.i] & lab[top.j]).any(axis=1)))
