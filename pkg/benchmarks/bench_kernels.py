"""Compiled vs numpy row kernels, plus one training epoch under each backend.

    python benchmarks/bench_kernels.py [--repeat 50] [--skip-train]

The kernel table times both implementations in-process. The training rows
run the same epoch in subprocesses with and without ATDFUSE_PURE_PYTHON so
that each process imports a single backend.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from atdfuse import kernels
from atdfuse.kernels import _pykernels as py

TRAIN_SNIPPET = """
import time
from atdfuse import kernels
from atdfuse.config import RunConfig
from atdfuse.train import train_run
cfg = RunConfig()
cfg.train.epochs = 1
cfg.data.n = 1000
t = time.perf_counter()
train_run(cfg)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def cases(shape, rng):
    x = rng.normal(size=shape)
    g = rng.normal(size=shape)
    y = py.softmax_rows(x)
    xhat, rstd = py.layernorm_rows(x, 1e-5)
    flat, gflat = x.reshape(-1).copy(), g.reshape(-1).copy()
    return {
        "softmax": lambda m: m.softmax_rows(x),
        "softmax_bwd": lambda m: m.softmax_rows_backward(y, g),
        "gelu": lambda m: m.gelu(flat),
        "gelu_bwd": lambda m: m.gelu_backward(flat, gflat),
        "layernorm": lambda m: m.layernorm_rows(x, 1e-5),
        "layernorm_bwd": lambda m: m.layernorm_rows_backward(xhat, rstd, g),
    }


def bench_kernels(repeat):
    ck = kernels.compiled_backend
    if ck is None:
        print("compiled kernels not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14} {'rows x cols':>12} {'numpy us':>10} {'compiled us':>12} {'speedup':>8}")
    for shape in [(64, 8), (512, 32), (4096, 64)]:
        for name, fn in cases(shape, rng).items():
            t_py = min(timeit.repeat(lambda: fn(py), number=repeat, repeat=3)) / repeat * 1e6
            if ck is None:
                print(f"{name:<14} {str(shape):>12} {t_py:>10.1f} {'-':>12} {'-':>8}")
                continue
            t_c = min(timeit.repeat(lambda: fn(ck), number=repeat, repeat=3)) / repeat * 1e6
            print(f"{name:<14} {str(shape):>12} {t_py:>10.1f} {t_c:>12.1f} {t_py / t_c:>7.2f}x")


def bench_training():
    print("\none training epoch (n=1000 xor, default toy config)")
    for pure in (False, True):
        env = dict(os.environ)
        env.pop("ATDFUSE_PURE_PYTHON", None)
        if pure:
            env["ATDFUSE_PURE_PYTHON"] = "1"
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, check=True,
                             capture_output=True, text=True).stdout.split()
        print(f"  {out[0]:<9} {float(out[1]):.2f}s")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=50)
    parser.add_argument("--skip-train", action="store_true")
    args = parser.parse_args()
    bench_kernels(args.repeat)
    if not args.skip_train:
        bench_training()


if __name__ == "__main__":
    main()
