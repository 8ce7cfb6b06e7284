"""Four-direction 2D selective scan.

A (B, D, H, W) map is unrolled into four length-H*W sequences:

    row_fwd   row-major order
    col_fwd   column-major order
    row_bwd   reversed row-major
    col_bwd   reversed column-major

Each direction is scanned by its own S6 head and the four outputs are
un-permuted back onto the grid and summed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .ssm_core.s6 import SsmParams, stack_params, stacked_s6
from .tensor_core import ops
from .tensor_core.module import Module
from .tensor_core.tensor import Tensor, make_node

DIRECTIONS = ("row_fwd", "col_fwd", "row_bwd", "col_bwd")


def scan_orders(H: int, W: int) -> np.ndarray:
    """(4, H*W) array; row ``k`` lists flat positions in direction ``k``'s order."""
    row = np.arange(H * W)
    col = row.reshape(H, W).T.reshape(-1)
    return np.stack([row, col, row[::-1], col[::-1]])


@dataclass
class ScanSequences:
    """Direction-ordered sequences stacked as a (4, B, L, D) tensor."""

    data: Tensor
    height: int
    width: int

    def __getitem__(self, direction: str) -> Tensor:
        return self.data[DIRECTIONS.index(direction)]

    @property
    def length(self) -> int:
        return self.height * self.width


def scan_expand(x) -> ScanSequences:
    x = ops.tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"scan_expand expects (B,D,H,W), got {x.shape}")
    B, D, H, W = x.shape
    orders = scan_orders(H, W)
    flat = x.data.reshape(B, D, H * W)
    out = np.ascontiguousarray(flat[:, :, orders].transpose(2, 0, 3, 1))  # (4, B, L, D)

    def backward(g):
        return (_merge_array(g, orders).reshape(B, D, H, W),)

    return ScanSequences(make_node(out, (x,), backward), H, W)


def _merge_array(seqs: np.ndarray, orders: np.ndarray) -> np.ndarray:
    # Position j of direction k sits at sequence index inverse[k, j].
    # Pairwise sum keeps merge(expand(x)) == 4x bitwise.
    inverse = np.argsort(orders, axis=1)
    g = [seqs[k][:, inverse[k]] for k in range(seqs.shape[0])]
    out = (g[0] + g[1]) + (g[2] + g[3])
    return np.ascontiguousarray(out.transpose(0, 2, 1))


def scan_merge(seqs: ScanSequences) -> Tensor:
    """Un-permute each direction back onto the grid and sum the four maps."""
    t = seqs.data
    H, W = seqs.height, seqs.width
    if t.ndim != 4 or t.shape[0] != len(DIRECTIONS) or t.shape[2] != H * W:
        raise DimensionError(f"expected (4, B, {H * W}, D) sequences, got {t.shape}")
    K, B, L, D = t.shape
    orders = scan_orders(H, W)
    out = _merge_array(t.data, orders).reshape(B, D, H, W)

    def backward(g):
        flat = g.reshape(B, D, L)
        return (np.ascontiguousarray(flat[:, :, orders].transpose(2, 0, 3, 1)),)

    return make_node(out, (t,), backward)


class SS2DParams(Module):
    """Independent S6 parameters for each of the four scan directions."""

    def __init__(self, d_model: int, d_state: int, rng=None, zero_skip: bool = False):
        rng = np.random.default_rng(rng)
        self.heads = [SsmParams(d_model, d_state, rng=rng, zero_skip=zero_skip) for _ in DIRECTIONS]


def ss2d_forward(x, params: SS2DParams) -> Tensor:
    x = ops.tensor(x)
    if x.ndim != 4 or x.shape[1] != params.heads[0].d_model:
        raise DimensionError(f"ss2d expects {params.heads[0].d_model} channels, got {x.shape}")
    seqs = scan_expand(x)
    y = stacked_s6(seqs.data, *stack_params(params.heads))
    return scan_merge(ScanSequences(y, seqs.height, seqs.width))
