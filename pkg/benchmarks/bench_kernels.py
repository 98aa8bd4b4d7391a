"""Time the dissipation scan on the compiled and numpy backends.

Run with ``python benchmarks/bench_kernels.py [--nodes N] [--level L]``. The
problem sizes mirror a composite-lift design on a 3-state plant.
"""
import argparse
import time

import numpy as np

from swobs import kernels
from swobs.numerics import unit_sphere_samples


def make_problem(nodes, level, seed=0):
    rng = np.random.default_rng(seed)
    n = 3
    C = rng.standard_normal((nodes, n, n))
    P = np.eye(n) + np.einsum("nij,nkj->nik", C, C)
    M0 = rng.standard_normal((nodes, n, n))
    M0 = 0.5 * (M0 + np.swapaxes(M0, 1, 2))
    rows = np.array([1, 1, 2, 2])
    cols = np.array([1, 2, 1, 2])
    lo = rng.uniform(-2, 0, (nodes, 4))
    hi = lo + rng.uniform(0, 2, (nodes, 4))
    G = np.zeros((nodes, n, n))
    G[:, 0, 0] = 1.0
    W = unit_sphere_samples(n, level).points
    phi = rng.uniform(0, 5, nodes)
    return M0, P, lo, hi, rows, cols, G, W, phi


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=2000)
    ap.add_argument("--level", type=int, default=90)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args(argv)
    prob = make_problem(args.nodes, args.level)
    print(f"nodes={args.nodes} samples={len(prob[7])}")
    times = {}
    for name in sorted(kernels.available_backends()):
        times[name] = best_of(lambda: kernels.dissipation_scan(*prob, backend=name), args.repeats)
        print(f"{name:>9}: {times[name] * 1e3:9.1f} ms")
    if "compiled" in times:
        print(f"  speedup: {times['numpy'] / times['compiled']:.2f}x")


if __name__ == "__main__":
    main()
