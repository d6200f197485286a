"""Compare the numba and numpy kernel backends on the default model's conv shapes.

    python benchmarks/bench_kernels.py [--repeats 20] [--batch 8]

Also times one full training step under each backend (the backend is fixed
at import, so that part runs in a subprocess per backend).
"""
from __future__ import annotations

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from lesionmt import kernels

# (channels, spatial size) feeding 3x3 convs in the default 64x64, base-16 model
SHAPES = [(3, 64), (16, 32), (32, 16), (64, 8), (128, 4), (48, 64), (96, 32)]

STEP_SCRIPT = """
import time, numpy as np
from lesionmt import kernels
from lesionmt.model import ModelConfig, build_model
from lesionmt.train import Adam, Batch, TrainConfig, train_step
m = build_model(ModelConfig(), 0)
rng = np.random.default_rng(0)
b = Batch(rng.normal(size=({n}, 3, 64, 64)), (rng.random(({n}, 1, 64, 64)) < 0.3).astype(float),
          np.array([1.0, 0.0] * ({n} // 2)), np.array([0.0, 1.0] * ({n} // 2)))
opt, cfg = Adam(1e-3), TrainConfig()
train_step(m, b, opt, cfg)
t = []
for _ in range({reps}):
    t0 = time.perf_counter(); train_step(m, b, opt, cfg); t.append(time.perf_counter() - t0)
print(kernels.BACKEND, sorted(t)[len(t) // 2])
"""


def median_time(fn, repeats: int) -> float:
    fn()  # warm-up (and numba compilation)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_kernels(batch: int, repeats: int) -> None:
    if not hasattr(kernels, "im2col_numba"):
        print("numba unavailable; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<10} {'shape':<18} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8}")
    for c, s in SHAPES:
        xp = rng.normal(size=(batch, c, s + 2, s + 2))
        cols = kernels.im2col_numpy(xp, 3, 3, 1, s, s)
        assert np.array_equal(cols, kernels.im2col_numba(xp, 3, 3, 1, s, s))
        shape = xp.shape
        a = median_time(lambda: kernels.im2col_numpy(xp, 3, 3, 1, s, s), repeats)
        b = median_time(lambda: kernels.im2col_numba(xp, 3, 3, 1, s, s), repeats)
        print(f"{'im2col':<10} {f'{batch}x{c}x{s}x{s}':<18} {a * 1e3:>9.3f} {b * 1e3:>9.3f} {a / b:>7.2f}x")
        a = median_time(lambda: kernels.col2im_numpy(cols, shape, 3, 3, 1, s, s), repeats)
        b = median_time(lambda: kernels.col2im_numba(cols, shape, 3, 3, 1, s, s), repeats)
        print(f"{'col2im':<10} {f'{batch}x{c}x{s}x{s}':<18} {a * 1e3:>9.3f} {b * 1e3:>9.3f} {a / b:>7.2f}x")
        x = rng.normal(size=(batch, c, s, s))
        a = median_time(lambda: kernels.maxpool2_numpy(x), repeats)
        b = median_time(lambda: kernels.maxpool2_numba(x), repeats)
        print(f"{'maxpool2':<10} {f'{batch}x{c}x{s}x{s}':<18} {a * 1e3:>9.3f} {b * 1e3:>9.3f} {a / b:>7.2f}x")


def bench_step(batch: int, repeats: int) -> None:
    print(f"\nfull training step, default model, batch {batch} (median of {repeats}):")
    for flag in ("0", "1"):
        env = dict(os.environ, LESIONMT_NUMBA=flag)
        code = STEP_SCRIPT.format(n=batch, reps=repeats)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        backend, seconds = out.stdout.split()
        print(f"  {backend:<6} {float(seconds):.3f} s")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--step-repeats", type=int, default=5)
    args = ap.parse_args()
    bench_kernels(args.batch, args.repeats)
    bench_step(args.batch, args.step_repeats)


if __name__ == "__main__":
    main()
