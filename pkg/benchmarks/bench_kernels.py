"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--cols 65536] [--repeat 20] [--end-to-end]

The end-to-end timing runs the four double-sided/RowPress experiments on
one shipped profile in a subprocess per backend.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from readdisturb import _pykernels, kernels

try:
    from readdisturb import _ckernels
except ImportError:
    _ckernels = None


def bench(fn, repeat):
    t = timeit.repeat(fn, number=1, repeat=repeat)
    return min(t)


def kernel_table(cols, repeat):
    key = kernels.stream_key(12345, 77, 0)
    q = np.sort(np.random.default_rng(0).uniform(0, 0.3, 501))
    cases = {
        "uniforms": lambda m: m.uniforms(key, cols),
        "class_min": lambda m: m.class_min(key, cols),
        "count_below[501]": lambda m: m.count_below(key, cols, q, q),
    }
    print(f"kernel timings, {cols} columns, best of {repeat}")
    print(f"{'kernel':<18}{'numpy (us)':>12}{'cython (us)':>13}{'speedup':>9}")
    for name, f in cases.items():
        tp = bench(lambda: f(_pykernels), repeat) * 1e6
        if _ckernels is None:
            print(f"{name:<18}{tp:12.1f}{'-':>13}{'-':>9}")
            continue
        tc = bench(lambda: f(_ckernels), repeat) * 1e6
        print(f"{name:<18}{tp:12.1f}{tc:13.1f}{tp / tc:8.1f}x")


def end_to_end(rows):
    code = (
        "import time,hashlib;from readdisturb import protocols as P, kernels;from readdisturb.model import load_profile;"
        f"p=load_profile('S-8Gb-B');c=P.ExperimentConfig(rows_to_test={rows});t=time.perf_counter();"
        "r=P.run_experiment(p,P.EXPERIMENTS,c);print(kernels.BACKEND,time.perf_counter()-t,hashlib.sha256(r.to_csv().encode()).hexdigest())"
    )
    outs = []
    for backend in ("numpy", "cython"):
        env = dict(os.environ, READDISTURB_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split()
        outs.append(out)
        print(f"end-to-end {rows} rows, backend {out[0]}: {float(out[1]):.2f} s")
    print("results identical:", outs[0][2] == outs[1][2])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cols", type=int, default=65536)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--end-to-end", action="store_true")
    ap.add_argument("--rows", type=int, default=256)
    args = ap.parse_args()
    print("selected backend:", kernels.BACKEND)
    kernel_table(args.cols, args.repeat)
    if args.end_to_end:
        end_to_end(args.rows)


if __name__ == "__main__":
    main()
