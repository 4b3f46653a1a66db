"""Time the numba and pure-numpy variants of each hot kernel.

    python benchmarks/bench_kernels.py [--repeat 200] [--end-to-end 2000]

``--end-to-end N`` additionally trains N steps once per backend in a
subprocess (``UNREAL_NUMBA=1`` / ``0``) and reports steps per second.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from unreal import kernels


def cases(rng):
    frames = rng.random((21, 3, 36, 36))
    conv1 = rng.random((21, 8, 17, 17))
    cols = rng.random((21, 15, 15, 8 * 3 * 3))
    prev, cur = rng.random((3, 36, 36)), rng.random((3, 36, 36))
    rewards = rng.random((20, 8, 8))
    boot = rng.random((8, 8))
    return {
        "im2col conv1 (21x3x36x36, k4 s2)": lambda v: getattr(kernels, f"im2col_{v}")(frames, 4, 4, 2),
        "im2col conv2 (21x8x17x17, k3 s1)": lambda v: getattr(kernels, f"im2col_{v}")(conv1, 3, 3, 1),
        "col2im conv2 grad": lambda v: getattr(kernels, f"col2im_{v}")(cols, 8, 17, 17, 3, 3, 1),
        "pixel change 36px, 8x8 cells": lambda v: getattr(kernels, f"cell_mean_abs_diff_{v}")(prev, cur, 32, 8),
        "returns 20 steps x 8x8 cells": lambda v: getattr(kernels, f"discounted_returns_{v}")(rewards, boot, 0.9),
    }


def bench(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<36}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, fn in cases(rng).items():
        fn("numba")  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: fn("numpy"), number=repeat, repeat=3)) / repeat * 1e6
        t_nb = min(timeit.repeat(lambda: fn("numba"), number=repeat, repeat=3)) / repeat * 1e6
        print(f"{name:<36}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.2f}x")


_TRAIN = """
import sys, time
from unreal.config import parse_config
from unreal.trainer import Trainer
cfg = parse_config({"total_steps": int(sys.argv[1]), "level": {"category": "fruit-static"},
                    "eval_interval": 10**9, "replay": {"capacity": 500, "warmup": 200}})
Trainer(cfg).train()  # warm-up run triggers any compilation
t = time.perf_counter()
Trainer(cfg).train()
print(int(sys.argv[1]) / (time.perf_counter() - t))
"""


def end_to_end(steps):
    for flag in ("1", "0"):
        env = dict(os.environ, UNREAL_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", _TRAIN, str(steps)], env=env, capture_output=True, text=True,
                             check=True)
        label = "numba" if flag == "1" else "numpy"
        print(f"training, {label} backend: {float(out.stdout.strip()):.0f} env steps/s")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--end-to-end", type=int, default=0, metavar="STEPS")
    args = parser.parse_args(argv)
    bench(args.repeat)
    if args.end_to_end:
        end_to_end(args.end_to_end)


if __name__ == "__main__":
    main()
