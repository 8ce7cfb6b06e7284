"""Time-invariant SSM reference paths: ZOH discretization, recurrence, kernel form.

These operate on plain numpy arrays in float64 and serve as oracles for the
selective scan. Shapes: sequences are (L, D); per-channel diagonal state
parameters are (D, N). Scalars and 1-D inputs are promoted (a length-L vector
is a single-channel sequence).
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError

ZOH_LIMIT = 1e-4


def zoh_factor(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with the z -> 0 limit of 1 below ``ZOH_LIMIT``."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < ZOH_LIMIT
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0, np.expm1(safe) / safe)


def discretize_zoh(A, B, delta):
    """Zero-order-hold discretization of a diagonal continuous SSM.

    Returns ``(A_bar, B_bar)`` with A_bar = exp(delta*A) and
    B_bar = (delta*A)^-1 (exp(delta*A) - 1) delta*B, elementwise.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("delta must be positive")
    z = delta * A
    return np.exp(z), zoh_factor(z) * delta * B


def _as_sequence(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"sequence must be (L, D) with L >= 1, got {x.shape}")
    return x


def _as_state(p, D) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0:
        p = p.reshape(1, 1)
    elif p.ndim == 1:
        p = p[None, :]
    return np.broadcast_to(p, (D, p.shape[-1]))


def lti_scan(x, A_bar, B_bar, C, D_skip=0.0) -> np.ndarray:
    """h_k = A_bar h_{k-1} + B_bar x_k, y_k = C.h_k + D x_k, from h_0 = 0."""
    xs = _as_sequence(x)
    L, D = xs.shape
    a, b, c = (_as_state(p, D) for p in (A_bar, B_bar, C))
    d = np.broadcast_to(np.asarray(D_skip, dtype=np.float64), (D,))
    h = np.zeros(np.broadcast_shapes(a.shape, b.shape, c.shape))
    y = np.empty((L, D))
    for k in range(L):
        h = a * h + b * xs[k][:, None]
        y[k] = (c * h).sum(axis=1) + d * xs[k]
    return y.reshape(np.shape(x)) if np.ndim(x) == 1 else y


def lti_conv_kernel(A_bar, B_bar, C, L: int) -> np.ndarray:
    """K = (C B_bar, C A_bar B_bar, ..., C A_bar^{L-1} B_bar), shape (L, D)."""
    if L < 1:
        raise ValueError("kernel length must be >= 1")
    a, b, c = (np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in (A_bar, B_bar, C))
    a, b, c = np.broadcast_arrays(a, b, c)
    powers = a[None, :, :] ** np.arange(L)[:, None, None]
    return (c[None] * powers * b[None]).sum(axis=2)


def lti_scan_via_kernel(x, kernel, D_skip=0.0) -> np.ndarray:
    """Causal convolution y_k = sum_{j<=k} K_j x_{k-j} (+ D x_k), via FFT."""
    xs = _as_sequence(x)
    K = np.asarray(kernel, dtype=np.float64)
    if K.ndim == 1:
        K = K[:, None]
    L = xs.shape[0]
    if K.shape[0] != L:
        raise DimensionError(f"kernel length {K.shape[0]} != sequence length {L}")
    n = 1 << (2 * L - 1).bit_length()
    y = np.fft.irfft(np.fft.rfft(xs, n, axis=0) * np.fft.rfft(K, n, axis=0), n, axis=0)[:L]
    y = y + np.asarray(D_skip, dtype=np.float64) * xs
    return y.reshape(np.shape(x)) if np.ndim(x) == 1 else y
