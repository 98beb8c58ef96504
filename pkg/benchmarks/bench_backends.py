"""Timing comparison of the compiled and pure-Python kernel backends.

Usage: python benchmarks/bench_backends.py [--repeats N]

Covers the raw kernels and one full engine-level workload (a short
adaptation run). Both backends produce bit-identical numbers; this is
purely a speed report.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from apm._backend import available_backends


def timeit(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(repeats: int):
    backends = available_backends()
    rng = np.random.default_rng(0)

    a128 = rng.standard_normal((128, 128))
    v128 = rng.standard_normal((128, 1))
    a1k = rng.standard_normal((1024, 1024))
    v1k = rng.standard_normal((1024, 1))
    w = rng.standard_normal((128, 128))
    u = rng.standard_normal(128)
    img = rng.standard_normal((3, 224, 224))
    kern = rng.standard_normal((3, 3, 14, 14))
    big = rng.standard_normal(1_000_000)

    cases = {
        "matvec 128x128": lambda k: k.matmul(a128, v128),
        "matvec 1024x1024": lambda k: k.matmul(a1k, v1k),
        "matmul 128x128x128": lambda k: k.matmul(a128, a128),
        "matvec_t 128x128": lambda k: k.matvec_t(w, u),
        "conv 3x224x224 s14": lambda k: k.conv_forward(img, kern, 14),
        "ksum 1e6": lambda k: k.ksum(big),
        "gauss_fill 1e5": lambda k: k.gauss_fill(k.seed_state(42), 100_000, 0.0, 1.0),
    }

    names = list(backends)
    print(f"{'kernel':24s}" + "".join(f"{n:>14s}" for n in names) + f"{'speedup':>10s}")
    for label, call in cases.items():
        times = {}
        for name, mod in backends.items():
            times[name] = timeit(lambda m=mod: call(m), repeats)
        row = f"{label:24s}" + "".join(f"{times[n] * 1e3:13.3f}m" for n in names)
        if len(names) == 2:
            row += f"{times['python'] / times['cython']:9.1f}x"
        print(row)


def bench_engine():
    """One desk-scale adaptation iteration per backend, via subprocesses so
    each run binds its backend at import."""
    code = r"""
import time
import numpy as np
from apm.config import resolve_model
from apm.tensor import SeededRng, Tensor, backend_name
from apm.teacher_io import DistilledBundle
from apm.ttt import TttConfig, run_ttt

model = resolve_model("desk")
rng = SeededRng(1)
img = np.clip(rng.fill_gaussian(3*32*32, 0.5, 0.2).reshape(3, 32, 32), 0, 1)
bundle = DistilledBundle(rng.fill_gaussian(16, 0, 1), 16)
run_ttt(Tensor(img), bundle, TttConfig(iterations=1), model)  # warm up
t0 = time.perf_counter()
rep = run_ttt(Tensor(img), bundle, TttConfig(iterations=10), model)
dt = time.perf_counter() - t0
print(f"{backend_name():>8s}: 10 iterations x 64 columns in {dt:.3f}s "
      f"({dt / 10 * 1e3:.1f} ms/iteration), final loss {rep.losses[-1]:.3e}")
"""
    print("\nengine: 10 adaptation iterations, desk scale (8x8 grid)", flush=True)
    for backend in available_backends():
        env = dict(os.environ, APM_BACKEND=backend)
        sys.stdout.flush()
        subprocess.run([sys.executable, "-c", code], env=env, check=True)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    found = ", ".join(available_backends())
    print(f"backends available: {found}\n")
    bench_kernels(args.repeats)
    bench_engine()
