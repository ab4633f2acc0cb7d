"""Compare the compiled and numpy recursive-filter kernels.

Usage: python3 benchmarks/bench_kernels.py [--size 256] [--repeat 5]

Times one forward pass, one adjoint pass and a full 2-D filter
(forward + backward) for each available backend and reports the
speed-up of the compiled kernels over numpy.
"""
import argparse
import time
from unittest import mock

import numpy as np

from intrinsic_decomp import kernels
from intrinsic_decomp.domain_filter import FilterParams, domain_filter_2d, domain_filter_backward


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(size, rng):
    x = rng.random((3, size, size)).astype(np.float32)
    g = rng.uniform(0.2, 0.95, (size, size)).astype(np.float32)
    y = kernels.recursive_pass(x, g)
    dy = rng.standard_normal(x.shape).astype(np.float32)
    edges = rng.random((1, size, size)).astype(np.float32) * 0.05
    params = FilterParams()

    def full_filter():
        out, saved = domain_filter_2d(x, edges, params, keep_intermediates=True)
        domain_filter_backward(dy, saved, edges, params)

    return {
        "pass": lambda impl: kernels.recursive_pass(x, g, impl=impl),
        "adjoint": lambda impl: kernels.recursive_pass_adjoint(dy, x, y, g, impl=impl),
        "filter+backward": lambda impl: _with_backend(impl, full_filter),
    }


def _with_backend(impl, fn):
    with mock.patch.object(kernels, "_impl", kernels._resolve(impl)):
        fn()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available()
    print(f"size={args.size} backends={backends} default={kernels.BACKEND}")
    rng = np.random.default_rng(0)
    results = {}
    for name, run in cases(args.size, rng).items():
        row = {b: best_time(lambda: run(b), args.repeat) for b in backends}
        results[name] = row
        line = "  ".join(f"{b}={row[b] * 1e3:9.2f} ms" for b in backends)
        if "cython" in row:
            line += f"  speedup={row['numpy'] / row['cython']:.1f}x"
        print(f"{name:<16} {line}")
    return results


if __name__ == "__main__":
    main()
