"""Compare the compiled and pure-numpy CTC kernels.

Usage: python benchmarks/bench_ctc.py [--repeats N]
"""

import argparse
import timeit

import numpy as np

from dypcl import ctc

CASES = [(38, 25, 4), (38, 60, 6), (38, 200, 20)]  # (K, T, label length)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    prev = ctc.BACKEND
    print(f"{'K':>4}{'T':>6}{'L':>5}  {'op':<10}{'python ms':>11}{'cython ms':>11}{'speedup':>9}")
    for K, T, L in CASES:
        z = rng.normal(size=(K, T))
        labels = list(rng.integers(1, K, size=L))
        for name, fn in (("loss", lambda: ctc.ctc_loss(z, labels)), ("viterbi", lambda: ctc.ctc_forced_align(z, labels))):
            times = {}
            for backend in ("python", "cython"):
                try:
                    ctc.use_backend(backend)
                except ImportError:
                    times[backend] = float("nan")
                    continue
                times[backend] = 1e3 * min(timeit.repeat(fn, number=args.repeats, repeat=3)) / args.repeats
            print(f"{K:>4}{T:>6}{L:>5}  {name:<10}{times['python']:>11.3f}{times['cython']:>11.3f}{times['python'] / times['cython']:>8.1f}x")
    ctc.use_backend(prev)


if __name__ == "__main__":
    main()
