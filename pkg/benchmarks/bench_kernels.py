"""Benchmark the compiled geometry kernels against their numpy fallbacks.

Runs each hot kernel (point-to-mesh distances, winding numbers, marching-cubes
triangle collection) on the same inputs with VOXDIFF_NUMBA=1 and =0, checks
both paths agree, and prints a timing table. The first compiled call is timed
separately as JIT warmup.

Usage: python benchmarks/bench_kernels.py [--resolution 32] [--repeats 3]
"""

from __future__ import annotations

import argparse
import os
import time

import numpy as np

from voxdiff import kernels
from voxdiff.geometry import Sphere, analytic_sdf, box_mesh, default_origin


def _workloads(resolution: int):
    mesh = box_mesh(half_extents=(0.31, 0.24, 0.37))
    triangles = mesh.vertices[mesh.faces]
    d = resolution
    origin = default_origin(d)
    centers = origin + (np.stack(np.meshgrid(
        np.arange(d), np.arange(d), np.arange(d), indexing="ij"),
        axis=-1).reshape(-1, 3) / d)
    sphere = analytic_sdf(Sphere(0.35), 2 * resolution)
    return {
        "mesh_distances": (kernels.mesh_distances, (centers, triangles)),
        "winding_numbers": (kernels.winding_numbers, (centers, triangles)),
        "collect_triangles": (kernels.collect_triangles, (sphere.values, 0.0)),
    }


def _time(fn, args, repeats: int) -> tuple[float, np.ndarray]:
    best = float("inf")
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, result


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--resolution", type=int, default=32)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    workloads = _workloads(args.resolution)
    rows = []
    for name, (fn, fn_args) in workloads.items():
        os.environ[kernels.ENV_FLAG] = "0"
        numpy_s, numpy_out = _time(fn, fn_args, args.repeats)

        if kernels.HAVE_NUMBA:
            os.environ[kernels.ENV_FLAG] = "1"
            warm0 = time.perf_counter()
            fn(*fn_args)  # includes JIT compilation on first use
            warmup_s = time.perf_counter() - warm0
            numba_s, numba_out = _time(fn, fn_args, args.repeats)
            agree = np.allclose(np.asarray(numpy_out, dtype=np.float64),
                                np.asarray(numba_out, dtype=np.float64),
                                rtol=1e-10, atol=1e-12)
            rows.append((name, numpy_s, numba_s, warmup_s, agree))
        else:
            rows.append((name, numpy_s, None, None, True))
    os.environ.pop(kernels.ENV_FLAG, None)

    header = (f"{'kernel':<20} {'numpy (s)':>11} {'numba (s)':>11} "
              f"{'speedup':>8} {'warmup (s)':>11} {'agree':>6}")
    print(header)
    print("-" * len(header))
    for name, numpy_s, numba_s, warmup_s, agree in rows:
        if numba_s is None:
            print(f"{name:<20} {numpy_s:>11.4f} {'n/a':>11} {'n/a':>8} "
                  f"{'n/a':>11} {'n/a':>6}")
        else:
            print(f"{name:<20} {numpy_s:>11.4f} {numba_s:>11.4f} "
                  f"{numpy_s / numba_s:>7.1f}x {warmup_s:>11.2f} "
                  f"{str(agree):>6}")
    if not kernels.HAVE_NUMBA:
        print("numba is not importable; only the numpy path was timed")


if __name__ == "__main__":
    main()
