"""Benchmark the compiled alignment kernel against the numpy reference.

The workload mirrors one training episode's matching stage: a batch of
query x prototype x view x direction cost matrices (default 100 of 8x8)
through the DP forward pass and the soft-alignment gradient.

Usage: python benchmarks/bench_alignment.py [--batch 100] [--size 8] [--repeats 50]
"""

import argparse
import time

import numpy as np

import mdmf.alignment as alignment
from mdmf.alignment import _softdp_py


def bench(backend, costs, gamma, repeats):
    values, acc = backend.dp_forward(costs, gamma)  # warm-up
    backend.dp_grad(costs, acc, values, gamma)

    t0 = time.perf_counter()
    for _ in range(repeats):
        values, acc = backend.dp_forward(costs, gamma)
    forward = (time.perf_counter() - t0) / repeats

    t0 = time.perf_counter()
    for _ in range(repeats):
        backend.dp_grad(costs, acc, values, gamma)
    grad = (time.perf_counter() - t0) / repeats
    return forward, grad, values


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--batch", type=int, default=100)
    parser.add_argument("--size", type=int, default=8)
    parser.add_argument("--repeats", type=int, default=50)
    parser.add_argument("--gamma", type=float, default=0.1)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    costs = rng.uniform(0.0, 2.0, size=(args.batch, args.size, args.size))

    backends = {"python (reference)": _softdp_py}
    if alignment.BACKEND == "cython":
        backends["cython (compiled)"] = alignment._backend
    else:
        print("compiled kernel not built; benchmarking the reference only")

    print(f"batch={args.batch} size={args.size}x{args.size} gamma={args.gamma} "
          f"repeats={args.repeats}")
    results = {}
    for name, backend in backends.items():
        forward, grad, values = bench(backend, costs, args.gamma, args.repeats)
        results[name] = (forward, grad, values)
        print(f"{name:20s} forward {forward * 1e3:8.3f} ms   grad {grad * 1e3:8.3f} ms")

    if len(results) == 2:
        py_fwd, py_grad, py_val = results["python (reference)"]
        cy_fwd, cy_grad, cy_val = results["cython (compiled)"]
        assert np.allclose(py_val, cy_val, atol=1e-12), "backends disagree"
        print(f"{'speedup':20s} forward {py_fwd / cy_fwd:7.1f}x    grad {py_grad / cy_grad:7.1f}x")


if __name__ == "__main__":
    main()
