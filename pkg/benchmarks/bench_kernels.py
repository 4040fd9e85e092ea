#!/usr/bin/env python3
"""Compare the conv3d backends (compiled direct loops vs numpy im2col+BLAS)
across the package's working shapes. Informs the `auto` backend policy in
patchddm.backend; rerun on new hardware before overriding it.

Usage: python benchmarks/bench_kernels.py [--csv out.csv]
"""

import argparse
import time

import numpy as np

try:
    from threadpoolctl import threadpool_limits
    threadpool_limits(limits=1)
except ImportError:
    pass

from patchddm import backend, kernels_numpy

SHAPES = [
    # (channels_in, channels_out, extent) mirroring patch / volume scales
    (6, 8, 16),
    (8, 8, 16),
    (16, 16, 8),
    (6, 8, 32),
    (8, 8, 32),
    (16, 16, 16),
]


def time_call(fn, repeats=7):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--csv", default=None)
    args = parser.parse_args()

    mods = {"numpy": kernels_numpy}
    if backend.compiled_available():
        from patchddm import _conv3d
        mods["compiled"] = _conv3d
    else:
        print("note: compiled extension not built; benchmarking numpy only")

    rng = np.random.default_rng(0)
    rows = [("backend", "op", "cin", "cout", "extent", "time_ms")]
    for cin, cout, extent in SHAPES:
        x = rng.standard_normal((cin, extent, extent, extent)).astype(np.float32)
        w = rng.standard_normal((cout, cin, 3, 3, 3)).astype(np.float32)
        gy = rng.standard_normal((cout, extent, extent, extent)).astype(np.float32)
        ops = {
            "forward": lambda m: m.conv3d_forward(x, w, 1, 1),
            "grad_input": lambda m: m.conv3d_grad_input(gy, w, x.shape, 1, 1),
            "grad_kernel": lambda m: m.conv3d_grad_kernel(gy, x, w.shape, 1, 1),
        }
        line = [f"{cin}->{cout} @{extent}^3:"]
        for name, mod in mods.items():
            total = 0.0
            for op_name, op in ops.items():
                ms = time_call(lambda: op(mod)) * 1e3
                rows.append((name, op_name, cin, cout, extent, f"{ms:.3f}"))
                total += ms
            line.append(f"{name} {total:.1f}ms")
        print("  ".join(line))

    if args.csv:
        with open(args.csv, "w") as fh:
            for row in rows:
                fh.write(",".join(str(v) for v in row) + "\n")
        print(f"wrote {args.csv}")


if __name__ == "__main__":
    main()
