#!/usr/bin/env python3
"""Throughput comparison of the quantization kernel backends.

Times the stochastic-rounding kernel (compiled extension vs numpy
reference) across tensor sizes and codebook rates, plus one end-to-end
training-round timing through whichever backend is active. Run:

    python3 benchmarks/bench_quant.py [--sizes 1000,100000,1000000]
"""

import argparse
import math
import time

import numpy as np

from fedq import _kernels
from fedq._kernels import reference


def time_fn(fn, *args, repeats=7):
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(sizes, rates, rng):
    impls = [("numpy", reference)]
    if _kernels.BACKEND == "cython":
        impls.append(("cython", _kernels))
    print(f"{'size':>9} {'rate':>4} " + " ".join(f"{n:>12}" for n, _ in impls) + "  speedup")
    for size in sizes:
        x = rng.normal(size=size)
        u = rng.random(size)
        for rate in rates:
            centers = np.sort(rng.normal(size=1 << rate))
            times = [time_fn(impl.stochastic_round, x, centers, u) for _, impl in impls]
            row = f"{size:>9} {rate:>4} " + " ".join(
                f"{1e3 * t:>10.3f}ms" for t in times
            )
            if len(times) == 2:
                row += f"  {times[0] / times[1]:>6.2f}x"
            print(row)


def bench_training_round():
    from fedq import client as cl
    from fedq import datagen as dg

    params = dg.DataGenParams(n=1, d=32, frequent_count=2048, seed=1)
    shard = dg.generate_shard(params, 1)
    rng = np.random.default_rng(2)
    layers = cl.init_layers([32, 4], np.random.default_rng(3), 0.1 / math.sqrt(32))
    state = cl.ClientState(
        1, cl.ClientConfig(bitwidth=6), cl.quantize_model(layers, 6, rng),
        cl.LrSchedule(base=0.02), rng,
    )
    t0 = time.perf_counter()
    cl.run_local_epochs(state, shard, 5, 64)
    dt = time.perf_counter() - t0
    steps = 5 * math.ceil(shard.size / 64)
    print(f"\ntraining round ({_kernels.BACKEND} backend): "
          f"{steps} quantized steps in {dt:.3f}s ({1e3 * dt / steps:.2f} ms/step)")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="1000,100000,1000000")
    ap.add_argument("--rates", default="4,8,16")
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]
    rates = [int(r) for r in args.rates.split(",")]
    print(f"active backend: {_kernels.BACKEND}")
    bench_kernels(sizes, rates, np.random.default_rng(0))
    bench_training_round()


if __name__ == "__main__":
    main()
