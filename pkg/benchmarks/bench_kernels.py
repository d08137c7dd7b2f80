"""Time the compiled kernels against the numpy fallback on benchmark-sized inputs.

    python benchmarks/bench_kernels.py [--queries 400] [--db 1600] [--bits 16 32 64 128] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from ukd import _kernels_py

try:
    from ukd import _kernels as compiled
except ImportError:
    compiled = None


def codes(rng, n, k):
    words = rng.integers(0, np.iinfo(np.int64).max, size=(n, -(-k // 64)), dtype=np.int64).astype(np.uint64)
    if k % 64:
        words[:, -1] &= np.uint64((1 << (k % 64)) - 1)
    return words


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queries", type=int, default=400)
    ap.add_argument("--db", type=int, default=1600)
    ap.add_argument("--bits", type=int, nargs="+", default=[16, 32, 64, 128])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1

    rng = np.random.default_rng(0)
    ks = np.array([1, 10, 100, 500], dtype=np.int64)
    curve = np.linspace(1, args.db, 20).round().astype(np.int64)
    print(f"{'kernel':<14}{'bits':>6}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}")
    for k in args.bits:
        q, db = codes(rng, args.queries, k), codes(rng, args.db, k)
        dist = compiled.hamming_matrix(q, db)
        rel = (rng.random(dist.shape) < 0.2).astype(np.uint8)
        cases = {
            "hamming": (lambda m: lambda: m.hamming_matrix(q, db)),
            "rank_scores": (lambda m: lambda: m.rank_scores(dist, rel, k, ks, curve)),
        }
        for name, make in cases.items():
            t_py = best(make(_kernels_py), args.repeat) * 1e3
            t_cy = best(make(compiled), args.repeat) * 1e3
            print(f"{name:<14}{k:>6}{t_py:>12.2f}{t_cy:>12.2f}{t_py / t_cy:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
