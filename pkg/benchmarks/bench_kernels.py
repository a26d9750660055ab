"""Benchmark the numba kernels against their pure-numpy fallbacks.

Runs each kernel pair on synthetic workloads sized like a desk-scale pipeline
run and prints a timing table. Usage:

    python benchmarks/bench_kernels.py [--size small|large] [--repeat N]

The numba column is absent when the backend is disabled (HABFUSE_NUMBA=0) or
numba is not importable.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from habfuse import backend, kernels

SIZES = {
    "small": {"assign_n": 20_000, "assign_k": 16, "dim": 63,
              "joint_n": 2_048, "joint_c": 12, "win": (7, 96, 96)},
    "large": {"assign_n": 200_000, "assign_k": 50, "dim": 63,
              "joint_n": 8_192, "joint_c": 64, "win": (7, 512, 512)},
}


def workloads(size: dict, rng: np.random.Generator):
    x = rng.normal(size=(size["assign_n"], size["dim"]))
    centroids = rng.normal(size=(size["assign_k"], size["dim"]))
    pa = rng.dirichlet(np.ones(size["joint_c"]), size=size["joint_n"])
    pb = rng.dirichlet(np.ones(size["joint_c"]), size=size["joint_n"])
    raster = rng.random(size["win"]).astype(np.float32)
    raster[:, rng.random(size["win"][1:]) < 0.3] = np.float32(-9999.0)
    return {
        "kmeans_assign": (np.ascontiguousarray(x), np.ascontiguousarray(centroids)),
        "accumulate_outer": (np.ascontiguousarray(pa), np.ascontiguousarray(pb)),
        "gather_windows": (raster, np.float32(-9999.0)),
    }


def time_call(fn, args, repeat: int) -> float:
    fn(*args)  # warmup / JIT compile
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", choices=sorted(SIZES), default="small")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    loads = workloads(SIZES[args.size], rng)
    flavors = list(kernels.IMPLEMENTATIONS)
    print(f"backend selected at import: {backend.active_backend()}")
    header = f"{'kernel':<18}" + "".join(f"{f + ' (s)':>14}" for f in flavors)
    if len(flavors) > 1:
        header += f"{'speedup':>10}"
    print(header)
    for name, call_args in loads.items():
        times = [time_call(kernels.IMPLEMENTATIONS[f][name], call_args, args.repeat)
                 for f in flavors]
        row = f"{name:<18}" + "".join(f"{t:14.4f}" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
