"""Micro-benchmarks for the hot operators."""

from __future__ import annotations

import statistics
import time
from typing import Callable

import numpy as np

from .autodiff import Tensor, default_dtype, no_grad, ops
from .fusion import SRRecFusion
from .ssm import SS2D, scan_reference
from .ssm.scan import scan

OPS = ("scan", "ss2d", "conv", "fuse")


def median_time(fn: Callable[[], object], repeat: int = 5, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _scan_inputs(rng, length: int, d: int, n: int):
    x = rng.standard_normal((1, 1, length, d))
    dt = rng.uniform(1e-3, 1e-1, (1, 1, length, d))
    A = -np.exp(rng.uniform(0, 2, (1, d, n)))
    B, C = rng.standard_normal((1, 1, length, n)), rng.standard_normal((1, 1, length, n))
    return x, dt, A, B, C, np.ones((1, d))


def bench_scan(length: int, d: int = 16, n: int = 16, repeat: int = 5, sequential: bool = True) -> dict:
    rng = np.random.default_rng(0)
    arrays = _scan_inputs(rng, length, d, n)
    tensors = [Tensor(a) for a in arrays]
    with no_grad():
        blocked = median_time(lambda: scan(*tensors), repeat)
    row = {"op": "scan", "size": length, "seconds": blocked, "throughput": length / blocked, "unit": "tokens/s"}
    if sequential:
        seq = median_time(lambda: scan_reference(*arrays), max(1, repeat // 2), warmup=0)
        row["sequential_seconds"] = seq
        row["speedup"] = seq / blocked
    return row


def bench_ss2d(size: int, channels: int = 32, repeat: int = 5) -> dict:
    rng = np.random.default_rng(0)
    layer = SS2D(channels, rng)
    x = Tensor(rng.standard_normal((1, channels, size, size)))
    with no_grad():
        secs = median_time(lambda: layer(x), repeat)
    return {"op": "ss2d", "size": size, "seconds": secs, "throughput": size * size / secs, "unit": "pixels/s"}


def bench_conv(size: int, channels: int = 32, repeat: int = 5) -> dict:
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, channels, size, size)))
    k = Tensor(rng.standard_normal((channels, channels, 3, 3)))
    with no_grad():
        secs = median_time(lambda: ops.conv2d(x, k, padding=1), repeat)
    return {"op": "conv", "size": size, "seconds": secs, "throughput": size * size / secs, "unit": "pixels/s"}


def bench_fuse(size: int, channels: int = 16, repeat: int = 5) -> dict:
    rng = np.random.default_rng(0)
    fuse = SRRecFusion(channels, rng)
    a = Tensor(rng.standard_normal((1, channels, size, size)))
    b = Tensor(rng.standard_normal((1, channels, size, size)))
    with no_grad():
        secs = median_time(lambda: fuse(a, b), repeat)
    return {"op": "fuse", "size": size, "seconds": secs, "throughput": size * size / secs, "unit": "pixels/s"}


def run_bench(op: str, size: int, channels: int, repeat: int = 5, dtype=np.float64) -> dict:
    if op not in OPS:
        raise ValueError(f"unknown benchmark op '{op}'; choose from {', '.join(OPS)}")
    with default_dtype(dtype):
        if op == "scan":
            return bench_scan(size, d=channels, repeat=repeat)
        if op == "ss2d":
            return bench_ss2d(size, channels, repeat)
        if op == "conv":
            return bench_conv(size, channels, repeat)
        return bench_fuse(size, channels, repeat)


def format_bench(row: dict) -> str:
    lines = [f"{'op':<8}{'size':>8}{'median s':>14}{'throughput':>18}",
             f"{row['op']:<8}{row['size']:>8}{row['seconds']:>14.6f}{row['throughput']:>14.4g} {row['unit']}"]
    if "speedup" in row:
        lines.append(f"sequential reference: {row['sequential_seconds']:.6f} s; "
                     f"blocked/sequential throughput ratio {row['speedup']:.2f}x")
    return "\n".join(lines)
