"""Input-dependent (selective) state space scan."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from ..tensor_core import ops
from ..tensor_core.module import Module
from ..tensor_core.tensor import Parameter, Tensor, get_default_dtype, make_node
from . import kernels


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


class SsmParams(Module):
    """Parameters of one selective SSM head over D channels with N states each.

    A = -exp(A_log) is diagonal per channel. Per timestep, B_k = W_B x_k,
    C_k = W_C x_k and delta_k = softplus(W_delta x_k + b_delta).
    """

    def __init__(self, d_model: int, d_state: int, rng=None, zero_skip: bool = False,
                 dt_min: float = 1e-3, dt_max: float = 0.1, dtype=None):
        rng = np.random.default_rng(rng)
        dtype = dtype or get_default_dtype()
        D, N = d_model, d_state
        self.A_log = Parameter(np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (D, 1))), dtype=dtype)
        self.D_skip = Parameter(np.ones(D), dtype=dtype)
        scale = 1.0 / np.sqrt(D)
        self.W_B = Parameter(rng.normal(0.0, scale, (N, D)), dtype=dtype)
        self.W_C = Parameter(rng.normal(0.0, scale, (N, D)), dtype=dtype)
        self.W_delta = Parameter(rng.uniform(-scale, scale, (D, D)), dtype=dtype)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), D))
        self.b_delta = Parameter(inverse_softplus(dt), dtype=dtype)
        self.zero_skip = zero_skip

    @property
    def d_model(self) -> int:
        return self.A_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    def A(self) -> np.ndarray:
        return -np.exp(self.A_log.data)


def selective_scan(u, delta, A, Bs, Cs, D_skip) -> Tensor:
    """Differentiable time-varying scan; see :mod:`.kernels` for shapes."""
    args = [ops.tensor(t) for t in (u, delta, A, Bs, Cs, D_skip)]
    K, B, L, D = args[0].shape
    N = args[2].shape[-1]
    expected = [(K, B, L, D), (K, B, L, D), (K, D, N), (K, B, L, N), (K, B, L, N), (K, D)]
    for t, shape in zip(args, expected):
        if t.shape != shape:
            raise DimensionError(f"selective_scan operand shape {t.shape}, expected {shape}")
    dtype = np.result_type(*[t.dtype for t in args])
    y, cache = kernels.scan_forward(*[t.data for t in args])
    y = y.astype(dtype, copy=False)

    def backward(g):
        grads = kernels.scan_backward(g, cache)
        return tuple(gr.astype(t.dtype, copy=False) if t.requires_grad else None
                     for gr, t in zip(grads, args))

    return make_node(y, args, backward)


def stacked_s6(xs, A_log, W_B, W_C, W_delta, b_delta, D_skip) -> Tensor:
    """Run K independent S6 heads on xs of shape (K, B, L, D).

    Parameters carry a leading K axis: A_log (K,D,N), W_B/W_C (K,N,D),
    W_delta (K,D,D), b_delta (K,D), D_skip (K,D).
    """
    K, _, _, D = xs.shape
    N = W_B.shape[1]
    # One batched product for all three projections: (K,B,L,D) @ (K,1,D,2N+D).
    W_all = ops.transpose(ops.concat([W_B, W_C, W_delta], axis=1), (0, 2, 1))
    proj = ops.matmul(xs, ops.reshape(W_all, (K, 1, D, 2 * N + D)))
    Bs = proj[..., :N]
    Cs = proj[..., N:2 * N]
    pre = proj[..., 2 * N:] + ops.reshape(b_delta, (K, 1, 1, D))
    delta = ops.softplus(pre)
    A = ops.neg(ops.exp(A_log))
    return selective_scan(xs, delta, A, Bs, Cs, D_skip)


def skip_weights(params_list) -> list:
    return [ops.tensor(np.zeros_like(p.D_skip.data)) if p.zero_skip else p.D_skip for p in params_list]


def stack_params(params_list):
    """Stack K SsmParams into the leading-K layout used by :func:`stacked_s6`."""
    return (
        ops.stack([p.A_log for p in params_list]),
        ops.stack([p.W_B for p in params_list]),
        ops.stack([p.W_C for p in params_list]),
        ops.stack([p.W_delta for p in params_list]),
        ops.stack([p.b_delta for p in params_list]),
        ops.stack(skip_weights(params_list)),
    )


def s6_forward(x, params: SsmParams) -> Tensor:
    """Selective scan of an (L, D) or (B, L, D) sequence with one parameter set."""
    x = ops.tensor(x)
    if x.ndim not in (2, 3) or x.shape[-1] != params.d_model:
        raise DimensionError(f"expected (..., L, {params.d_model}) sequence, got {x.shape}")
    squeeze = x.ndim == 2
    xs = ops.reshape(x, (1, 1) + x.shape if squeeze else (1,) + x.shape)
    y = stacked_s6(xs, *stack_params([params]))
    return ops.reshape(y, x.shape)
