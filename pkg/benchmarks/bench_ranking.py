"""Benchmark the compiled top-k kernel against the NumPy fallback.

Both paths must return identical rankings; this script asserts that on
every measured case and prints a timing table. Run it from the repository
root after an editable install:

    python3 benchmarks/bench_ranking.py
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fticir import ranking


def time_call(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", type=int, nargs="+",
                        default=[10_000, 100_000, 1_000_000])
    parser.add_argument("--ks", type=int, nargs="+", default=[10, 100])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if not ranking.has_compiled_kernel():
        print("compiled kernel unavailable; timing the fallback only")
    print(f"active kernel: {ranking.KERNEL}")
    print()
    header = f"{'n':>9}  {'k':>5}  {'compiled':>12}  {'numpy':>12}  {'speedup':>8}"
    print(header)
    print("-" * len(header))

    rng = np.random.default_rng(args.seed)
    for n in args.sizes:
        scores = rng.standard_normal(n)
        # A coarse quantization forces plenty of exact ties, the case the
        # tie_rank ordering exists for.
        scores = np.round(scores, 2)
        tie_rank = np.arange(n, dtype=np.int64)
        for k in args.ks:
            compiled = ranking.topk_ranked(scores, tie_rank, k)
            fallback = ranking.topk_ranked(scores, tie_rank, k,
                                           force_numpy=True)
            assert np.array_equal(compiled, fallback), (n, k)

            t_compiled = time_call(
                lambda: ranking.topk_ranked(scores, tie_rank, k),
                args.repeats,
            )
            t_numpy = time_call(
                lambda: ranking.topk_ranked(scores, tie_rank, k,
                                            force_numpy=True),
                args.repeats,
            )
            speedup = t_numpy / t_compiled if t_compiled > 0 else float("inf")
            print(f"{n:>9}  {k:>5}  {t_compiled * 1e3:>10.3f}ms  "
                  f"{t_numpy * 1e3:>10.3f}ms  {speedup:>7.2f}x")
    print()
    print("all rankings identical across kernels")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
