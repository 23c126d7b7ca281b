"""Compare the compiled and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times each row-wise kernel on shapes typical of the desk-scale model and a
full training step of the small acceptance configuration under each backend.
"""

import argparse
import timeit

import numpy as np

from stablab import kernels

SHAPES = {
    "attention rows (8x4x32, 32)": (1024, 32),
    "attention rows (16x4x128, 128)": (8192, 128),
    "hidden rows (256, 64)": (256, 64),
    "hidden rows (2048, 128)": (2048, 128),
}


def _kernel_cases(rows, cols, rng):
    x = rng.standard_normal((rows, cols)).astype(np.float32)
    g = rng.standard_normal((rows, cols)).astype(np.float32)
    gain = np.ones(cols, np.float32)
    bias = np.zeros(cols, np.float32)
    p = kernels.softmax_rows(x)
    _, xhat, rstd = kernels.layer_norm_rows(x, gain, bias, 1e-5)
    return {
        "softmax": lambda: kernels.softmax_rows(x),
        "softmax_bwd": lambda: kernels.softmax_rows_backward(p, g),
        "layer_norm": lambda: kernels.layer_norm_rows(x, gain, bias, 1e-5),
        "layer_norm_bwd": lambda: kernels.layer_norm_rows_backward(g, xhat, rstd, gain),
        "log_softmax": lambda: kernels.log_softmax_rows(x),
        "sum_squares": lambda: kernels.sum_squares(x),
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'shape':34s} {'kernel':15s} " + " ".join(f"{b:>12s}" for b in kernels.available_backends()))
    for label, (rows, cols) in SHAPES.items():
        timings = {}
        for backend in kernels.available_backends():
            kernels.use_backend(backend)
            for name, fn in _kernel_cases(rows, cols, rng).items():
                t = min(timeit.repeat(fn, number=20, repeat=repeat)) / 20
                timings.setdefault(name, {})[backend] = t
        for name, per in timings.items():
            cells = " ".join(f"{per[b] * 1e6:10.1f}us" for b in kernels.available_backends())
            print(f"{label:34s} {name:15s} {cells}")


def bench_step(repeat, steps=30):
    from stablab.config import DataConfig, RunConfig
    from stablab.harness import train
    from stablab.model import ModelConfig

    cfg = RunConfig(
        model=ModelConfig(vocab_size=128, seq_len=32, hidden=64, layers=2, heads=4),
        data=DataConfig(batch_size=8),
        steps=steps,
        abort_on_divergence=False,
        eval_batches=0,
    )
    print()
    for backend in kernels.available_backends():
        kernels.use_backend(backend)
        best = min(train(cfg).elapsed for _ in range(repeat)) / steps
        print(f"train step, small desk config, {backend:9s}: {best * 1e3:.2f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    start = kernels.BACKEND
    try:
        bench_kernels(args.repeat)
        bench_step(max(1, args.repeat // 2))
    finally:
        kernels.use_backend(start)


if __name__ == "__main__":
    main()
