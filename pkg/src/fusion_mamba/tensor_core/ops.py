"""Differentiable operations over :class:`Tensor`.

Each op computes its forward value with numpy and registers a closure that maps
the output gradient to one gradient per input. Broadcasting follows numpy; the
backward pass sums gradients back down to each operand's shape.
"""

from __future__ import annotations

import builtins

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DimensionError
from .tensor import Tensor, make_node

_SCALARS = (int, float, np.integer, np.floating)


def _is_scalar(x) -> bool:
    return isinstance(x, _SCALARS)


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, forward, grad_a, grad_b):
    # Python scalars stay weakly typed so float32 graphs stay float32.
    if _is_scalar(a) and _is_scalar(b):
        raise TypeError("at least one operand must be a Tensor")
    if _is_scalar(b):
        a = tensor(a)
        out = forward(a.data, b)
        return make_node(out, (a,), lambda g: (unbroadcast(grad_a(g, a.data, b, out), a.shape),))
    if _is_scalar(a):
        b = tensor(b)
        out = forward(a, b.data)
        return make_node(out, (b,), lambda g: (unbroadcast(grad_b(g, a, b.data, out), b.shape),))
    a, b = tensor(a), tensor(b)
    out = forward(a.data, b.data)

    def backward(g):
        ga = unbroadcast(grad_a(g, a.data, b.data, out), a.shape) if a.requires_grad else None
        gb = unbroadcast(grad_b(g, a.data, b.data, out), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


def maximum(a, b) -> Tensor:
    return _binary(
        a, b, np.maximum,
        lambda g, x, y, o: g * (x >= y),
        lambda g, x, y, o: g * (x < y),
    )


def minimum(a, b) -> Tensor:
    return _binary(
        a, b, np.minimum,
        lambda g, x, y, o: g * (x <= y),
        lambda g, x, y, o: g * (x > y),
    )


def _unary(x: Tensor, out: np.ndarray, local_grad) -> Tensor:
    return make_node(out, (x,), lambda g: (local_grad(g),))


def neg(x) -> Tensor:
    x = tensor(x)
    return _unary(x, -x.data, lambda g: -g)


def exp(x) -> Tensor:
    x = tensor(x)
    out = np.exp(x.data)
    return _unary(x, out, lambda g: g * out)


def log(x) -> Tensor:
    x = tensor(x)
    return _unary(x, np.log(x.data), lambda g: g / x.data)


def relu(x) -> Tensor:
    x = tensor(x)
    mask = x.data > 0
    return _unary(x, x.data * mask, lambda g: g * mask)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any input and keeps the input dtype
    return 0.5 + 0.5 * np.tanh(0.5 * v)


def sigmoid(x) -> Tensor:
    x = tensor(x)
    s = _sigmoid(x.data)
    return _unary(x, s, lambda g: g * s * (1 - s))


def silu(x) -> Tensor:
    """x * sigmoid(x), elementwise."""
    x = tensor(x)
    s = _sigmoid(x.data)
    return _unary(x, x.data * s, lambda g: g * (s * (1 + x.data * (1 - s))))


def softplus(x) -> Tensor:
    x = tensor(x)
    v = x.data
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    return _unary(x, out, lambda g: g * _sigmoid(v))


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(out, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = tensor(x)
    return _unary(x, x.data.reshape(shape), lambda g: g.reshape(x.shape))


def transpose(x, axes) -> Tensor:
    x = tensor(x)
    inv = np.argsort(axes)
    return _unary(x, np.transpose(x.data, axes), lambda g: np.transpose(g, inv))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return builtins.all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def index(x, idx) -> Tensor:
    """Numpy-style indexing; repeated fancy indices accumulate in backward."""
    x = tensor(x)
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_node(out, (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return make_node(out, tensors, backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = [tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) if t.requires_grad else None for i, t in enumerate(tensors))

    return make_node(out, tensors, backward)


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-mode einsum (``'ij,jk->ik'``) without repeated or ellipsis indices."""
    operands = [tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise DimensionError(f"einsum {subscripts!r} expects {len(in_subs)} operands")
    for s in in_subs:
        if len(set(s)) != len(s) or "." in s:
            raise DimensionError(f"unsupported einsum operand {s!r}")
    out = np.einsum(subscripts, *[o.data for o in operands], optimize=len(operands) > 2)
    out = np.asarray(out)

    def backward(g):
        grads = []
        for i, (s, op) in enumerate(zip(in_subs, operands)):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [in_subs[j] for j in range(len(operands)) if j != i]
            available = set(out_sub).union(*others) if others else set(out_sub)
            kept = "".join(c for c in s if c in available)
            expr = ",".join([out_sub] + others) + "->" + kept
            gi = np.einsum(expr, g, *[operands[j].data for j in range(len(operands)) if j != i],
                           optimize=len(operands) > 2)
            if kept != s:
                shape = [op.shape[k] if c in available else 1 for k, c in enumerate(s)]
                gi = np.broadcast_to(gi.reshape(shape), op.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return make_node(out, operands, backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


# ---------------------------------------------------------------------------
# Neural network primitives on (B, C, H, W) feature maps.


def linear(x, weight, bias=None) -> Tensor:
    """Per-position channel mixing: out[b,o,h,w] = sum_c W[o,c] x[b,c,h,w] + bias[o]."""
    x, weight = tensor(x), tensor(weight)
    if x.ndim != 4:
        raise DimensionError(f"linear expects a (B,C,H,W) tensor, got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"weight {weight.shape} incompatible with {x.shape[1]} input channels")
    parents = [x, weight]
    B, C, H, W = x.shape
    xf = x.data.reshape(B, C, H * W)
    out = np.matmul(weight.data, xf).reshape(B, -1, H, W)
    if bias is not None:
        bias = tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias {bias.shape} does not match {weight.shape[0]} outputs")
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gf = g.reshape(B, -1, H * W)
        gx = np.matmul(weight.data.T, gf).reshape(x.shape) if x.requires_grad else None
        gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gf.sum(axis=(0, 2))

    return make_node(out, parents, backward)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis at every (batch, y, x) position."""
    x = tensor(x)
    if eps < 0:
        raise ConfigurationError("eps must be non-negative")
    v = x.data
    mu = v.mean(axis=1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    shape = (1, -1) + (1,) * (x.ndim - 2)
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma = tensor(gamma)
        out = out * gamma.data.reshape(shape)
        parents.append(gamma)
    if beta is not None:
        beta = tensor(beta)
        out = out + beta.data.reshape(shape)
        parents.append(beta)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        dxhat = g * gamma.data.reshape(shape) if gamma is not None else g
        grads = []
        if x.requires_grad:
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            grads.append(inv * (dxhat - m1 - xhat * m2))
        else:
            grads.append(None)
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return make_node(out.astype(v.dtype, copy=False), parents, backward)


def _check_odd(k: int):
    if k % 2 != 1:
        raise ConfigurationError(f"kernel size must be odd, got {k}")


def depthwise_conv2d(x, kernel, bias=None) -> Tensor:
    """Per-channel KxK cross-correlation with zero "same" padding; kernel is (C, K, K)."""
    x, kernel = tensor(x), tensor(kernel)
    if kernel.ndim != 3 or kernel.shape[1] != kernel.shape[2]:
        raise DimensionError(f"depthwise kernel must be (C,K,K), got {kernel.shape}")
    K = kernel.shape[1]
    _check_odd(K)
    if kernel.shape[0] != x.shape[1]:
        raise DimensionError(f"kernel has {kernel.shape[0]} channels, input has {x.shape[1]}")
    p = K // 2
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    k = kernel.data
    out = np.zeros_like(x.data)
    for u in range(K):
        for v in range(K):
            out += k[None, :, u, v, None, None] * xp[:, :, u:u + H, v:v + W]
    parents = [x, kernel]
    if bias is not None:
        bias = tensor(bias)
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(K):
                for v in range(K):
                    gxp[:, :, u:u + H, v:v + W] += k[None, :, u, v, None, None] * g
            gx = gxp[:, :, p:p + H, p:p + W]
        gk = None
        if kernel.requires_grad:
            gk = np.empty_like(k)
            for u in range(K):
                for v in range(K):
                    gk[:, u, v] = (g * xp[:, :, u:u + H, v:v + W]).sum(axis=(0, 2, 3))
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return make_node(out, parents, backward)


def conv2d(x, kernel, bias=None, stride: int = 1, padding="same") -> Tensor:
    """Dense cross-correlation; kernel is (C_out, C_in, K, K).

    ``padding="same"`` pads K//2 on every side before striding, so the output
    spatial size is ceil(H / stride).
    """
    x, kernel = tensor(x), tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"kernel {kernel.shape} incompatible with input {x.shape}")
    if stride < 1:
        raise ConfigurationError("stride must be positive")
    K = kernel.shape[2]
    if padding == "same":
        _check_odd(K)
        p = K // 2
    else:
        p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = cols.shape[2], cols.shape[3]
    out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = [x, kernel]
    if bias is not None:
        bias = tensor(bias)
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gx = gk = None
        if kernel.requires_grad:
            gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, K, K)
        if x.requires_grad:
            gcols = np.tensordot(g, kernel.data, axes=([1], [0]))  # (B, Ho, Wo, C, K, K)
            gxp = np.zeros_like(xp)
            for u in range(K):
                for v in range(K):
                    gxp[:, :, u:u + stride * (Ho - 1) + 1:stride, v:v + stride * (Wo - 1) + 1:stride] += (
                        gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return make_node(out, parents, backward)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = tensor(x)
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        B, C, H, W = x.shape
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return make_node(out, (x,), backward)


# ---------------------------------------------------------------------------
# Losses.


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits (targets are constants)."""
    logits = tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    v = logits.data
    out = np.maximum(v, 0) - v * t + np.log1p(np.exp(-np.abs(v)))
    return _unary(logits, out, lambda g: g * (_sigmoid(v) - t))


def log_softmax(x, axis=-1) -> Tensor:
    x = tensor(x)
    v = x.data
    shifted = v - v.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _unary(x, out, lambda g: g - soft * g.sum(axis=axis, keepdims=True))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under (N, K) ``logits``."""
    logits = tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    lp = log_softmax(logits, axis=1)
    picked = index(lp, (np.arange(labels.shape[0]), labels))
    return neg(mean(picked))

