"""Compiled vs numpy kernels: im2col, col2im, 2x2 max-pool and one training step.

    python benchmarks/bench_kernels.py [--repeat N]

Prints best-of-N wall time per kernel for each backend and the speedup.
"""

import argparse
import time

import numpy as np

from sadunet import kernels
from sadunet.model import ModelConfig, init_params, pad_magnitude, unet_forward
from sadunet.tensor import backward
from sadunet.train import l1_mask_loss


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x = rng.standard_normal((32, 128, 64)).astype(np.float32)
    cols = kernels.im2col(x, 3, 3, 1, 1, 1, 1)
    g = rng.standard_normal((32, 64, 32)).astype(np.float32)
    _, arg = kernels.maxpool2x2_forward(x)

    cfg = ModelConfig(channels=8, layers=2, levels=2, window_frames=64)
    params = init_params(cfg, seed=0)
    mag = np.abs(rng.standard_normal((cfg.freq_bins, cfg.window_frames))).astype(np.float32)
    targets = [mag * 0.5, mag * 0.5]

    def step():
        m1, m2 = unet_forward(pad_magnitude(mag, cfg), params, cfg)
        backward(l1_mask_loss((m1, m2), mag, targets))

    return {
        "im2col 32x128x64 k3": lambda: kernels.im2col(x, 3, 3, 1, 1, 1, 1),
        "col2im 32x128x64 k3": lambda: kernels.col2im(cols, 32, 128, 64, 3, 3, 1, 1, 1, 1),
        "maxpool fwd 32x128x64": lambda: kernels.maxpool2x2_forward(x),
        "maxpool bwd 32x128x64": lambda: kernels.maxpool2x2_backward(g, arg, 128, 64),
        "train step C=8 T=64": step,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = ["python"] + (["compiled"] if kernels.compiled_available() else [])
    if len(backends) == 1:
        print("compiled kernels not built; timing the numpy fallback only")
    results = {}
    for b in backends:
        kernels.use_backend(b)
        for name, fn in cases(np.random.default_rng(0)).items():
            fn()  # warm-up
            results[name, b] = best_of(fn, args.repeat)
    print(f"{'kernel':26s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name in cases(np.random.default_rng(0)):
        py = results[name, "python"] * 1e3
        if "compiled" in backends:
            c = results[name, "compiled"] * 1e3
            print(f"{name:26s} {py:10.2f} {c:12.2f} {py / c:7.1f}x")
        else:
            print(f"{name:26s} {py:10.2f} {'-':>12s} {'-':>8s}")


if __name__ == "__main__":
    main()
