#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Run after building the extension (pip install -e . or
python setup.py build_ext --inplace):

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes mirror the pipeline's hot paths: conv unfold/fold for 32x32 patch
batches, max pooling, bilinear patch sampling, and one SLIC assignment
sweep on a 96x96 slice.
"""

import argparse
import time

import numpy as np

from pancseg._kernels import backends


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def benchmark(repeat: int):
    mods = backends()
    if "native" not in mods:
        print("compiled backend not available; build it first "
              "(pip install -e .)")
    rng = np.random.default_rng(0)

    x = np.ascontiguousarray(rng.standard_normal((64, 8, 32, 32),
                                                 dtype=np.float32))
    cols_shape = None
    cases = []

    def make_im2col(mod):
        def run():
            mod.im2col(x, 3, 3, 1, 1, 1, 1)
        return run
    cases.append(("im2col 64x8x32x32 k3", make_im2col))

    cols = None

    def make_col2im(mod):
        nonlocal cols
        if cols is None:
            cols = np.ascontiguousarray(mods["numpy"].im2col(
                x, 3, 3, 1, 1, 1, 1))

        def run():
            mod.col2im(cols, 64, 8, 32, 32, 3, 3, 1, 1, 1, 1)
        return run
    cases.append(("col2im 64x8x32x32 k3", make_col2im))

    def make_pool(mod):
        def run():
            mod.maxpool_forward(x, 2, 2, 2, 2)
        return run
    cases.append(("maxpool 64x8x32x32 w2", make_pool))

    img = np.ascontiguousarray(rng.random((96, 96)))
    xs = np.ascontiguousarray(rng.uniform(0, 95, 64 * 32 * 32))
    ys = np.ascontiguousarray(rng.uniform(0, 95, 64 * 32 * 32))

    def make_bilinear(mod):
        def run():
            mod.bilinear_sample(img, xs, ys)
        return run
    cases.append(("bilinear 65k samples", make_bilinear))

    centers = np.ascontiguousarray(np.stack(
        [rng.uniform(0, 96, 256), rng.uniform(0, 96, 256),
         rng.random(256)], axis=1))

    def make_slic(mod):
        def run():
            mod.slic_assign(img, centers, 12, 0.033)
        return run
    cases.append(("slic_assign 96x96 k256", make_slic))

    header = f"{'kernel':26s} {'numpy':>10s} {'native':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for name, factory in cases:
        times = {}
        for backend, mod in mods.items():
            times[backend] = timeit(factory(mod), repeat)
        ref = times.get("numpy")
        nat = times.get("native")
        if nat is not None:
            print(f"{name:26s} {ref * 1e3:9.2f}ms {nat * 1e3:9.2f}ms "
                  f"{ref / nat:7.1f}x")
        else:
            print(f"{name:26s} {ref * 1e3:9.2f}ms {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    benchmark(args.repeat)
