# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Hamming ranking kernels. Signatures mirror ``ukd._kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int32_t, int64_t, uint8_t

cnp.import_array()

cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil


def hamming_matrix(const uint64_t[:, ::1] queries, const uint64_t[:, ::1] db):
    cdef Py_ssize_t nq = queries.shape[0], nd = db.shape[0], nw = queries.shape[1]
    if db.shape[1] != nw:
        raise ValueError("word count mismatch")
    out = np.empty((nq, nd), dtype=np.int32)
    cdef int32_t[:, ::1] o = out
    cdef Py_ssize_t i, j, w
    cdef int acc
    with nogil:
        for i in range(nq):
            for j in range(nd):
                acc = 0
                for w in range(nw):
                    acc += __builtin_popcountll(queries[i, w] ^ db[j, w])
                o[i, j] = acc
    return out


cdef void _counting_order(const int32_t[::1] dist, int k_bits, int64_t* counts, int64_t* order) noexcept nogil:
    cdef Py_ssize_t m = dist.shape[0], j
    cdef int d
    for d in range(k_bits + 2):
        counts[d] = 0
    for j in range(m):
        counts[dist[j] + 1] += 1
    for d in range(1, k_bits + 2):
        counts[d] += counts[d - 1]
    for j in range(m):
        d = dist[j]
        order[counts[d]] = j
        counts[d] += 1


def rank_order(const int32_t[::1] dist, int k_bits):
    cdef Py_ssize_t m = dist.shape[0], j
    for j in range(m):
        if dist[j] < 0 or dist[j] > k_bits:
            raise ValueError("distance outside [0, k_bits]")
    order = np.empty(m, dtype=np.int64)
    counts = np.empty(k_bits + 2, dtype=np.int64)
    cdef int64_t[::1] o = order
    cdef int64_t[::1] c = counts
    _counting_order(dist, k_bits, &c[0], &o[0])
    return order


def rank_scores(const int32_t[:, ::1] dist, const uint8_t[:, ::1] rel, int k_bits,
                const int64_t[::1] ks, const int64_t[::1] curve_ranks):
    cdef Py_ssize_t nq = dist.shape[0], m = dist.shape[1]
    cdef Py_ssize_t nk = ks.shape[0], nc = curve_ranks.shape[0]
    cdef Py_ssize_t q, r, t
    if np.asarray(dist).size and (np.asarray(dist).min() < 0 or np.asarray(dist).max() > k_bits):
        raise ValueError("distance outside [0, k_bits]")
    ap = np.zeros(nq, dtype=np.float64)
    n_rel = np.zeros(nq, dtype=np.int64)
    p_at = np.zeros((nq, nk), dtype=np.float64)
    curve = np.zeros((nq, nc), dtype=np.float64)
    order = np.empty(m, dtype=np.int64)
    counts = np.empty(k_bits + 2, dtype=np.int64)
    cumrel = np.empty(m + 1, dtype=np.int64)
    cdef double[::1] ap_v = ap
    cdef int64_t[::1] nr_v = n_rel
    cdef double[:, ::1] p_v = p_at
    cdef double[:, ::1] c_v = curve
    cdef int64_t[::1] o = order
    cdef int64_t[::1] cnt = counts
    cdef int64_t[::1] cum = cumrel
    cdef double acc
    cdef int64_t hits
    with nogil:
        for q in range(nq):
            _counting_order(dist[q], k_bits, &cnt[0], &o[0])
            acc = 0.0
            hits = 0
            cum[0] = 0
            for r in range(m):
                if rel[q, o[r]]:
                    hits += 1
                    acc = acc + (<double>hits) / (<double>(r + 1))
                cum[r + 1] = hits
            nr_v[q] = hits
            if hits > 0:
                ap_v[q] = acc / hits
            for t in range(nk):
                p_v[q, t] = (<double>cum[ks[t]]) / ks[t]
            for t in range(nc):
                c_v[q, t] = (<double>cum[curve_ranks[t]]) / curve_ranks[t]
    return ap, n_rel, p_at, curve
