"""Compare the compiled and numpy conv/pool kernels.

Run with ``python3 benchmarks/bench_conv.py``. Each row reports the best of
``--repeat`` timings for both backends and the speedup of the compiled one.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from causal_probe import _pykernels

try:
    from causal_probe import _ckernels
except ImportError:  # extension not built
    _ckernels = None

# (label, batch, channels, height, width, kernel, stride, pad)
CASES = [
    ("bars conv1", 100, 1, 8, 8, 3, 1, 1),
    ("bars conv2", 100, 8, 8, 8, 3, 1, 1),
    ("fashion conv1", 100, 1, 28, 28, 3, 1, 1),
    ("fashion conv2", 100, 16, 14, 14, 3, 1, 1),
]


def _best(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench(repeat: int = 5) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    for label, B, C, H, W, k, s, p in CASES:
        x = rng.normal(size=(B, C, H, W))
        cols = _pykernels.im2col(x, k, s, p)
        pooled = rng.normal(size=(B, C, H - H % 2, W - W % 2))
        ops = {
            "im2col": lambda m: m.im2col(x, k, s, p),
            "col2im": lambda m: m.col2im(cols, B, C, H, W, k, s, p),
            "maxpool": lambda m: m.maxpool_forward(pooled, 2),
        }
        for op, call in ops.items():
            row = {"case": label, "op": op, "numpy": _best(lambda: call(_pykernels), repeat)}
            if _ckernels is not None:
                row["cython"] = _best(lambda: call(_ckernels), repeat)
                row["speedup"] = row["numpy"] / row["cython"]
            rows.append(row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels not built; timing numpy only")
    print(f"{'case':<15} {'op':<8} {'numpy ms':>9} {'cython ms':>10} {'speedup':>8}")
    for r in bench(args.repeat):
        cy = f"{1e3 * r['cython']:10.3f}" if "cython" in r else f"{'-':>10}"
        sp = f"{r['speedup']:8.2f}" if "speedup" in r else f"{'-':>8}"
        print(f"{r['case']:<15} {r['op']:<8} {1e3 * r['numpy']:9.3f} {cy} {sp}")


if __name__ == "__main__":
    main()
