"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Each row reports the best-of-N wall time per call for both backends and the
speedup. The pure-Python side is always available; the compiled side is
skipped when the extension was not built.
"""

import argparse
import timeit

import numpy as np

from endosr import _pykernels

try:
    from endosr import _ckernels
except ImportError:
    _ckernels = None


def cases():
    rng = np.random.default_rng(0)
    img = rng.random((512, 512))
    win = np.outer(np.hanning(11), np.hanning(11))
    grad = np.array([[1.0, 0.0, -1.0]] * 3) / 3
    src = rng.random((1024, 3 * 128))
    idx = np.clip(np.arange(128)[:, None] * 8 + np.arange(-12, 20)[None, :], 0, 1023).astype(np.int64)
    wt = rng.random((128, 32))
    ranks = np.arange(1, 13, dtype=np.float64)
    return [
        ("correlate 512x512, 11x11 window", "correlate_valid", (img, win)),
        ("correlate 512x512, 3x3 gradient", "correlate_valid", (img, grad)),
        ("resample 1024 -> 128 rows, 384 cols", "resample_rows", (src, idx, wt)),
        ("signed-rank exact, n = 12", "signed_rank_tail_counts", (ranks, 30.0)),
    ]


def best(fn, args, repeat):
    number = 3
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':<40} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for label, name, inputs in cases():
        py = best(getattr(_pykernels, name), inputs, args.repeat)
        if _ckernels is None:
            print(f"{label:<40} {py * 1e3:>10.3f} {'n/a':>10} {'':>8}")
            continue
        cy = best(getattr(_ckernels, name), inputs, args.repeat)
        print(f"{label:<40} {py * 1e3:>10.3f} {cy * 1e3:>10.3f} {py / cy:>7.1f}x")


if __name__ == "__main__":
    main()
