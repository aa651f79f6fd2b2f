"""Compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import random
import timeit

import numpy as np

from hetplan import _kernels
from hetplan.bucketing import BoundaryGrid, histogram


def dp_case(seed: int):
    rng = np.random.default_rng(seed)
    lengths = np.minimum(rng.lognormal(7.0, 1.2, size=50_000).astype(np.int64) + 1, 16384)
    h = histogram(lengths, BoundaryGrid.uniform(16384))
    occupied = [k for k, c in enumerate(h.counts) if c]
    return [h.grid.u[k] for k in occupied], [h.counts[k] for k in occupied], 16


def enum_case(seed: int):
    rng = random.Random(seed)
    groups, R = 3, 3
    units = [[rng.uniform(0.5, 4.0) * (j + 1) for j in range(R)] for _ in range(groups)]
    chunks = [[rng.randint(1, 4) for _ in range(R)] for _ in range(groups)]
    return units, chunks, [2, 1, 2], [1, 2, 1], [R] * groups, [6, 5, 4]


def bench(name, fn_c, fn_py, args, repeat):
    t_py = min(timeit.repeat(lambda: fn_py(*args), number=1, repeat=repeat))
    if fn_c is None:
        print(f"{name:<20} python {t_py * 1e3:9.2f} ms   compiled      n/a")
        return
    t_c = min(timeit.repeat(lambda: fn_c(*args), number=1, repeat=repeat))
    print(f"{name:<20} python {t_py * 1e3:9.2f} ms   compiled {t_c * 1e3:9.2f} ms   x{t_py / t_c:6.1f}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    comp, fb = _kernels.compiled, _kernels.fallback
    print(f"default backend: {_kernels.BACKEND}")
    bench("bucket_dp R=16", comp and comp.bucket_dp, fb.bucket_dp, dp_case(0), args.repeat)
    bench("minimax_enumerate", comp and comp.minimax_enumerate, fb.minimax_enumerate, enum_case(0), args.repeat)


if __name__ == "__main__":
    main()
