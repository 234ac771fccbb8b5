#!/usr/bin/env python3
"""Timing comparison of the compiled kernels against the pure-torch fallback.

Measures forward and forward+backward for the bilinear warp and the 1-D
correlation on shapes representative of training (generator tap features
and the matcher's cost volume).

Usage: python benchmarks/kernel_benchmark.py [--repeats N]
"""

import argparse
import time

import numpy as np
import torch

from stereoadapt.kernels import available_backends, get_backend

WARP_SHAPES = [(8, 128, 256), (16, 64, 128), (32, 32, 64)]
CORR_SHAPES = [(32, 32, 64, 16), (16, 64, 128, 16), (32, 16, 32, 8)]


def time_fn(fn, repeats):
    fn()  # warm up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_warp(backend, shape, repeats, backward):
    c, h, w = shape
    rng = np.random.default_rng(0)
    feat = torch.from_numpy(rng.standard_normal((c, h, w)).astype(np.float32))
    disp = torch.from_numpy(rng.uniform(0, 8, (h, w)).astype(np.float32))

    if not backward:
        return time_fn(lambda: backend.warp_by_disparity(feat, disp), repeats)

    def run():
        f = feat.clone().requires_grad_(True)
        d = disp.clone().requires_grad_(True)
        backend.warp_by_disparity(f, d).sum().backward()

    return time_fn(run, repeats)


def bench_corr(backend, shape, repeats, backward):
    c, h, w, md = shape
    rng = np.random.default_rng(1)
    left = torch.from_numpy(rng.standard_normal((c, h, w)).astype(np.float32))
    right = torch.from_numpy(rng.standard_normal((c, h, w)).astype(np.float32))

    if not backward:
        return time_fn(lambda: backend.correlation(left, right, md), repeats)

    def run():
        l = left.clone().requires_grad_(True)
        r = right.clone().requires_grad_(True)
        backend.correlation(l, r, md).sum().backward()

    return time_fn(run, repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    backends = {name: get_backend(name) for name in available_backends()}
    print(f"backends: {', '.join(backends)}   (repeats={args.repeats}, best-of timing)\n")

    rows = []
    for shape in WARP_SHAPES:
        for backward in (False, True):
            label = f"warp {shape[0]}x{shape[1]}x{shape[2]}" + (" +bwd" if backward else "")
            rows.append((label, {n: bench_warp(b, shape, args.repeats, backward) for n, b in backends.items()}))
    for shape in CORR_SHAPES:
        for backward in (False, True):
            label = f"corr {shape[0]}x{shape[1]}x{shape[2]} d={shape[3]}" + (" +bwd" if backward else "")
            rows.append((label, {n: bench_corr(b, shape, args.repeats, backward) for n, b in backends.items()}))

    names = list(backends)
    header = f"{'kernel':<26}" + "".join(f"{n:>12}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for label, results in rows:
        line = f"{label:<26}" + "".join(f"{results[n] * 1e3:>10.3f}ms" for n in names)
        if len(names) == 2:
            a, b = (results[n] for n in names)
            line += f"{a / b:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
