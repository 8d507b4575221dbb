"""Timing comparison of the numba and numpy convolution backends.

Runs the three conv kernels on training-shaped tensors, then a full
training step, under each backend. The numba path is warmed before
timing so compilation cost is not counted.

Usage: python benchmarks/backend_bench.py [--repeats N]
"""

import argparse
import time

import numpy as np

from pnunet import kernels, model, ops, train
from pnunet.ssim import SsimConfig


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(rng):
    # shapes matching one training step at 64x64, base_channels 16
    xp = rng.standard_normal((8, 66, 66, 16)).astype(np.float32)
    w = rng.standard_normal((3, 3, 16, 16)).astype(np.float32)
    y = ops.conv_valid(xp, w)
    dy = rng.standard_normal(y.shape).astype(np.float32)
    return {
        "conv_forward": lambda: ops.conv_valid(xp, w),
        "conv_backward_dx": lambda: ops.conv_valid_backward_dx(dy, w, 66, 66),
        "conv_backward_dw": lambda: ops.conv_valid_backward_dw(xp, dy, 3, 3),
    }


def step_case(rng):
    cfg = train.TrainConfig(iterations=1, batch_size=8, patch_size=64, seed=0)
    mcfg = model.ReconstructorConfig(levels=3, base_channels=16, in_channels=1, seed=0)
    state = train.init_state(mcfg, cfg)
    batch = rng.uniform(0.0, 1.0, (8, 64, 64, 1)).astype(np.float32)
    scfg = SsimConfig()

    def run():
        train.train_step(state, batch, cfg, scfg)

    return {"train_step": run}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    rows = []
    for backend in ops.BACKENDS:
        if backend == "numba" and not kernels.HAS_NUMBA:
            print("numba not importable, skipping that backend")
            continue
        with ops.use_backend(backend):
            cases = kernel_cases(rng)
            cases.update(step_case(rng))
            for name, fn in cases.items():
                fn()  # warm-up: jit compile / allocate
                dt = time_call(fn, args.repeats)
                rows.append((name, backend, dt))
                print(f"{name:18s} {backend:6s} {dt * 1e3:9.2f} ms")

    print()
    by_name = {}
    for name, backend, dt in rows:
        by_name.setdefault(name, {})[backend] = dt
    for name, per in sorted(by_name.items()):
        if "numba" in per and "numpy" in per:
            print(f"{name:18s} numpy/numba speed ratio: {per['numpy'] / per['numba']:.1f}x")


if __name__ == "__main__":
    main()
