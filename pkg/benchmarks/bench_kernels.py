#!/usr/bin/env python3
"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--size 512] [--runs 5] [--json out.json]

Both backends are called directly, so HALFPEL_NUMBA has no effect here.
Outputs are checked for bit identity before timing.
"""

import argparse
import json
import time

import numpy as np

from halfpel import _kernels as K
from halfpel.fixed_filters import HEVC_HALF


def best_of(fn, runs, warmup=1):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--block-size", type=int, default=16)
    ap.add_argument("--search-range", type=int, default=8)
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()

    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    n = args.size
    plane = rng.uniform(0, 255, (n, n))
    field = [rng.uniform(0, 255, (n, n)) for _ in range(4)]
    cur = rng.uniform(0, 255, (n, n))
    taps = np.asarray(HEVC_HALF.taps, dtype=np.float64)
    off = HEVC_HALF.offset

    cases = {
        "filter_rows": (
            lambda: K.filter_rows_numpy(plane, taps, off),
            lambda: K.filter_rows_numba(plane, taps, off),
        ),
        "block_search": (
            lambda: K.block_search_numpy(cur, *field, args.block_size, args.search_range),
            lambda: K.block_search_numba(cur, *field, args.block_size, args.search_range),
        ),
    }

    results = []
    print(f"{'kernel':<14}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (np_fn, nb_fn) in cases.items():
        a, b = np_fn(), nb_fn()  # also compiles numba
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            assert np.array_equal(x, y), f"{name}: backends disagree"
        t_np = best_of(np_fn, args.runs)
        t_nb = best_of(nb_fn, args.runs)
        results.append({"kernel": name, "size": n, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb})
        print(f"{name:<14}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")

    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
