"""Timing of the linear-time scans against a quadratic attention reference."""

from __future__ import annotations

import time

import numpy as np

from .ss2d import SS2DParams, ss2d_forward
from .ssm_core.s6 import SsmParams, s6_forward
from .tensor_core.tensor import no_grad

DEFAULT_SIZES = (256, 512, 1024, 2048, 4096)
KERNELS = ("s6_forward", "ss2d_forward", "attention")
CSV_HEADER = "kernel,size,mean_ms,std_ms,reps"


def naive_cross_attention(q_src: np.ndarray, kv_src: np.ndarray) -> np.ndarray:
    """softmax(Q K^T / sqrt(d)) V with the full (L, L) score matrix materialized."""
    d = q_src.shape[-1]
    scores = q_src @ kv_src.T / np.sqrt(d)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return w @ kv_src


def grid_for(length: int) -> tuple[int, int]:
    """Near-square (H, W) with H * W == length for power-of-two lengths."""
    h = 2 ** (int(np.log2(length)) // 2)
    return h, length // h


def _time(fn, reps: int, warmup: int = 1):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return float(np.mean(samples)), float(np.std(samples))


def run_bench(sizes=DEFAULT_SIZES, d_model: int = 16, d_state: int = 4, reps: int = 5, seed: int = 0):
    """Rows of (kernel, size, mean_ms, std_ms, reps) for every kernel and size."""
    rng = np.random.default_rng(seed)
    s6 = SsmParams(d_model, d_state, rng=rng)
    ss2d = SS2DParams(d_model, d_state, rng=rng)
    rows = []
    with no_grad():
        for L in sizes:
            L = int(L)
            x = rng.normal(size=(L, d_model)).astype(np.float32)
            y = rng.normal(size=(L, d_model)).astype(np.float32)
            H, W = grid_for(L)
            grid = rng.normal(size=(1, d_model, H, W)).astype(np.float32)
            fns = {
                "s6_forward": lambda: s6_forward(x, s6),
                "ss2d_forward": lambda: ss2d_forward(grid, ss2d),
                "attention": lambda: naive_cross_attention(x, y),
            }
            for name in KERNELS:
                mean, std = _time(fns[name], reps)
                rows.append((name, L, mean, std, reps))
    return rows


def format_csv(rows) -> str:
    lines = [CSV_HEADER]
    lines += [f"{k},{s},{m:.6f},{sd:.6f},{r}" for k, s, m, sd, r in rows]
    return "\n".join(lines) + "\n"


def growth_factors(rows, kernel: str) -> list[float]:
    """Time ratio between consecutive sizes for one kernel."""
    pts = sorted((s, m) for k, s, m, _, _ in rows if k == kernel)
    return [b[1] / a[1] for a, b in zip(pts, pts[1:])]


def check_scaling(rows, scan_max: float = 2.6, attention_min: float = 3.4) -> tuple[bool, dict]:
    """Every doubling: s6 grows by at most ``scan_max``, attention by at least ``attention_min``."""
    s6 = growth_factors(rows, "s6_forward")
    att = growth_factors(rows, "attention")
    ok = bool(s6 and att and max(s6) <= scan_max and min(att) >= attention_min)
    return ok, {"s6_forward": s6, "attention": att}
