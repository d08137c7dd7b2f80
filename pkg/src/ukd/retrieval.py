"""Sign quantization, packed Hamming codes, ranking and retrieval metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .datamodel import LabelSet, PairedDataset, SplitSpec
from .embednet import EmbeddingBatch, TwoPathwayModel, forward

DIRECTIONS = {"i2t": ("image", "text"), "t2i": ("text", "image")}
_WORD = 64


@dataclass(eq=False)
class HashCodeMatrix:
    """N codes of length k, packed LSB-first into ceil(k/64) uint64 words per row."""

    words: np.ndarray
    k: int

    def __post_init__(self):
        self.words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if self.words.ndim != 2 or self.words.shape[1] != n_words(self.k):
            raise ValueError(f"packed codes need shape (N, {n_words(self.k)})")
        tail = self.k % _WORD
        if tail and (self.words[:, -1] >> np.uint64(tail)).any():
            raise ValueError("unused high bits must be zero")

    def __len__(self):
        return self.words.shape[0]

    def __getitem__(self, i):
        return self.words[i]

    def __eq__(self, other):
        return isinstance(other, HashCodeMatrix) and self.k == other.k and np.array_equal(self.words, other.words)

    def unpack(self) -> np.ndarray:
        return unpack(self)


def n_words(k: int) -> int:
    if k < 1:
        raise ValueError("code length must be >= 1")
    return (k + _WORD - 1) // _WORD


def pack(codes) -> HashCodeMatrix:
    """Pack an N x K matrix of +/-1 into words (bit set <=> +1)."""
    codes = np.atleast_2d(np.asarray(codes))
    if not np.isin(codes, (-1, 1)).all():
        raise ValueError("codes must be +/-1")
    n, k = codes.shape
    nw = n_words(k)
    bits = np.zeros((n, nw * _WORD), dtype=np.uint8)
    bits[:, :k] = codes > 0
    as_bytes = np.packbits(bits, axis=1, bitorder="little")
    words = as_bytes.reshape(n, nw, 8).copy().view("<u8").reshape(n, nw)
    return HashCodeMatrix(words.astype(np.uint64), k)


def unpack(hc: HashCodeMatrix) -> np.ndarray:
    n = len(hc)
    as_bytes = hc.words.astype("<u8").view(np.uint8).reshape(n, -1)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, : hc.k]
    return np.where(bits == 1, 1, -1).astype(np.int8)


def quantize(emb) -> HashCodeMatrix:
    """``sgn`` with ``sgn(0) = +1``."""
    rows = emb.rows if isinstance(emb, EmbeddingBatch) else np.asarray(emb, dtype=np.float64)
    rows = np.atleast_2d(rows)
    if not np.isfinite(rows).all():
        raise ValueError("cannot quantize non-finite embeddings")
    return pack(np.where(rows >= 0, 1, -1))


def hamming_distance(a, b) -> int:
    a = np.asarray(a, dtype=np.uint64).ravel()
    b = np.asarray(b, dtype=np.uint64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"code length mismatch: {a.size} vs {b.size} words")
    return int(np.bitwise_count(a ^ b).sum())


def hamming_matrix(queries: HashCodeMatrix, db: HashCodeMatrix) -> np.ndarray:
    if queries.k != db.k:
        raise ValueError(f"code length mismatch: {queries.k} vs {db.k}")
    return kernels.hamming_matrix(queries.words, db.words)


def rank_by_hamming(query, db: HashCodeMatrix) -> np.ndarray:
    """Database indices by ascending Hamming distance, ties by ascending index."""
    q = np.asarray(query, dtype=np.uint64).reshape(1, -1)
    if q.shape[1] != db.words.shape[1]:
        raise ValueError("query and database code lengths differ")
    dist = kernels.hamming_matrix(q, db.words)[0]
    return kernels.rank_order(np.ascontiguousarray(dist), db.k)


def average_precision(ranked_relevance) -> float:
    """Mean of precision@r over the relevant ranks r. Zero when nothing is relevant."""
    rel = np.asarray(ranked_relevance, dtype=bool).ravel()
    if rel.size == 0:
        raise ValueError("empty ranking")
    hits = np.cumsum(rel)
    n_rel = hits[-1]
    if n_rel == 0:
        return 0.0
    ranks = np.flatnonzero(rel) + 1
    return float(np.cumsum(hits[rel] / ranks)[-1] / n_rel)


def mean_average_precision(aps, n_rel) -> float:
    aps = np.asarray(aps, dtype=np.float64)
    keep = np.asarray(n_rel) > 0
    return float(aps[keep].mean()) if keep.any() else 0.0


@dataclass
class EvalReport:
    direction: str
    k_bits: int
    map: float
    precision_at: dict[int, float]
    curve: list[tuple[int, float]]
    n_queries: int = 0
    n_queries_scored: int = 0
    map_cutoff: str = "all"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "k_bits": self.k_bits,
            "map": self.map,
            "map_cutoff": self.map_cutoff,
            "precision_at": {str(k): v for k, v in self.precision_at.items()},
            "n_queries": self.n_queries,
            "n_queries_scored": self.n_queries_scored,
            "curve": [[r, p] for r, p in self.curve],
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(
            direction=d["direction"],
            k_bits=d["k_bits"],
            map=d["map"],
            precision_at={int(k): v for k, v in d["precision_at"].items()},
            curve=[(int(r), p) for r, p in d["curve"]],
            n_queries=d.get("n_queries", 0),
            n_queries_scored=d.get("n_queries_scored", 0),
            map_cutoff=d.get("map_cutoff", "all"),
            extra=d.get("extra", {}),
        )

    def write(self, json_path, curve_path=None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if curve_path is not None:
            with open(curve_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["rank", "precision"])
                for r, p in self.curve:
                    w.writerow([r, repr(p)])


def curve_ranks(m: int, points: int = 20) -> np.ndarray:
    """Roughly evenly spaced ranks in [1, m], always including 1 and m."""
    if m < 1:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.linspace(1, m, num=min(points, m)).round().astype(np.int64))


def score_codes(
    query_codes: HashCodeMatrix,
    db_codes: HashCodeMatrix,
    relevance: np.ndarray,
    k_list=(),
    curve_points: int = 20,
):
    """Rank every query against the database and return (mAP, P@K dict, curve, per-query AP, R)."""
    m = len(db_codes)
    if len(query_codes) == 0 or m == 0:
        raise ValueError("empty query or database")
    relevance = np.ascontiguousarray(relevance, dtype=np.uint8)
    if relevance.shape != (len(query_codes), m):
        raise ValueError("relevance matrix shape does not match query x database")
    ks = np.array(sorted({min(int(k), m) for k in k_list if int(k) >= 1}), dtype=np.int64)
    cr = curve_ranks(m, curve_points)
    dist = hamming_matrix(query_codes, db_codes)
    ap, n_rel, p_at, curve = kernels.rank_scores(dist, relevance, db_codes.k, ks, cr)
    mean_ap = mean_average_precision(ap, n_rel)
    prec = {int(k): float(v) for k, v in zip(ks, p_at.mean(axis=0))}
    curve_pts = [(int(r), float(v)) for r, v in zip(cr, curve.mean(axis=0))]
    return mean_ap, prec, curve_pts, ap, n_rel


def evaluate_codes(query_codes, db_codes, relevance, direction, k_list=(), curve_points=20) -> EvalReport:
    mean_ap, prec, curve, _, n_rel = score_codes(query_codes, db_codes, relevance, k_list, curve_points)
    return EvalReport(
        direction=direction,
        k_bits=db_codes.k,
        map=mean_ap,
        precision_at=prec,
        curve=curve,
        n_queries=len(query_codes),
        n_queries_scored=int((np.asarray(n_rel) > 0).sum()),
    )


def evaluate_cross_modal(
    model: TwoPathwayModel,
    dataset: PairedDataset,
    labels: LabelSet,
    split: SplitSpec,
    direction: str,
    k_list=(1, 10, 100, 500),
    curve_points: int = 20,
) -> EvalReport:
    """Hash queries with one pathway and the retrieval set with the other, then score the
    Hamming rankings against label overlap."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {sorted(DIRECTIONS)}, got {direction!r}")
    if labels is None:
        raise ValueError("evaluation needs labels")
    if len(split.query_indices) == 0 or len(split.retrieval_indices) == 0:
        raise ValueError("empty split")
    split.validate(dataset.n)
    q_mod, db_mod = DIRECTIONS[direction]
    q_codes = quantize(forward(model, dataset.features(q_mod)[split.query_indices], q_mod))
    db_codes = quantize(forward(model, dataset.features(db_mod)[split.retrieval_indices], db_mod))
    rel = labels.relevance(split.query_indices, split.retrieval_indices)
    return evaluate_codes(q_codes, db_codes, rel, direction, k_list, curve_points)
