"""Pure-numpy versions of the compiled Hamming ranking kernels."""
import numpy as np


def hamming_matrix(queries, db):
    queries = np.ascontiguousarray(queries, dtype=np.uint64)
    db = np.ascontiguousarray(db, dtype=np.uint64)
    if queries.shape[1] != db.shape[1]:
        raise ValueError("word count mismatch")
    out = np.zeros((queries.shape[0], db.shape[0]), dtype=np.int32)
    for w in range(queries.shape[1]):
        out += np.bitwise_count(queries[:, w, None] ^ db[None, :, w]).astype(np.int32)
    return out


def rank_order(dist, k_bits):
    dist = np.asarray(dist, dtype=np.int32)
    if dist.size and (dist.min() < 0 or dist.max() > k_bits):
        raise ValueError("distance outside [0, k_bits]")
    return np.argsort(dist, kind="stable").astype(np.int64)


def rank_scores(dist, rel, k_bits, ks, curve_ranks):
    dist = np.asarray(dist, dtype=np.int32)
    rel = np.asarray(rel, dtype=bool)
    if dist.size and (dist.min() < 0 or dist.max() > k_bits):
        raise ValueError("distance outside [0, k_bits]")
    ks = np.asarray(ks, dtype=np.int64)
    curve_ranks = np.asarray(curve_ranks, dtype=np.int64)
    nq, m = dist.shape
    order = np.argsort(dist, axis=1, kind="stable")
    ranked = np.take_along_axis(rel, order, axis=1)
    cum = np.zeros((nq, m + 1), dtype=np.int64)
    np.cumsum(ranked, axis=1, out=cum[:, 1:])
    n_rel = cum[:, -1].copy()
    ranks = np.arange(1, m + 1, dtype=np.float64)
    terms = np.where(ranked, cum[:, 1:] / ranks, 0.0)
    # sequential accumulation keeps results bit-identical with the compiled kernel
    sums = np.cumsum(terms, axis=1)[:, -1] if m else np.zeros(nq)
    ap = np.divide(sums, n_rel, out=np.zeros(nq), where=n_rel > 0)
    p_at = cum[:, ks] / ks if ks.size else np.zeros((nq, 0))
    curve = cum[:, curve_ranks] / curve_ranks if curve_ranks.size else np.zeros((nq, 0))
    return ap, n_rel, p_at.astype(np.float64), curve.astype(np.float64)
