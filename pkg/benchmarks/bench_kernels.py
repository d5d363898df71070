"""Compare the numba and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel and size with both timings, the speedup and
the largest absolute difference between the two results.
"""

import argparse
import time

import numpy as np

from trajflow import kernels


def _time(fn, repeat):
    fn()  # warm-up (and JIT compile on the numba path)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    for n in (100, 400, 1600):
        a = rng.uniform(0, 40, size=(n, 2))
        b = rng.uniform(0, 40, size=(n, 2))
        yield "rbf_cross", n, lambda a=a, b=b: kernels.rbf_cross(a, b, 4.0, 4.0)
    for n in (500, 2000, 8000):
        q = rng.uniform(0, 40, size=(200, 2))
        pts = rng.uniform(0, 40, size=(n, 2))
        owner = rng.integers(0, 50, size=n)
        yield "support_counts", n, lambda q=q, p=pts, o=owner: kernels.support_counts(q, p, o, 50, 1.0)
    for n in (100, 400, 1000):
        pts = np.concatenate([rng.normal(c, 0.4, size=(n // 4, 2))
                              for c in ((5, 5), (20, 5), (5, 20), (30, 30))])
        yield "dbscan_labels", n, lambda p=pts: kernels.dbscan_labels(p, 1.0, 3)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy backend is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':16s} {'n':>6s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max diff':>9s}")
    for name, n, fn in cases(rng):
        res, times = {}, {}
        for be in ("numpy", "numba"):
            kernels.set_backend(be)
            times[be] = _time(fn, args.repeat)
            res[be] = np.asarray(fn(), dtype=np.float64)
        diff = float(np.max(np.abs(res["numpy"] - res["numba"]))) if res["numpy"].size else 0.0
        print(f"{name:16s} {n:6d} {times['numpy'] * 1e3:10.3f} {times['numba'] * 1e3:10.3f} "
              f"{times['numpy'] / times['numba']:8.2f} {diff:9.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
