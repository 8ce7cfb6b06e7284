"""Cross-modality fusion in a hidden state space.

The fusion block (FMB) takes a pair of same-shaped RGB / IR feature maps and

1. swaps channel quarters between them and passes each result through its own
   VSS block (shallow fusion, SSCS),
2. runs N dual state space fusion layers (DSSF): both branches are projected
   into the hidden state space, gated, mixed across branches and projected
   back with a residual,
3. adds the fused features back onto the inputs and sums the two branches.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DimensionError
from .ss2d import SS2DParams, ss2d_forward
from .tensor_core import ops
from .tensor_core.module import Module
from .tensor_core.tensor import Parameter, Tensor, get_default_dtype

VALID_STAGES = frozenset({2, 3, 4, 5})


@dataclass(frozen=True)
class FmbConfig:
    n_sscs: int = 1
    n_dssf: int = 8
    stages: tuple = (3, 4, 5)
    use_sscs: bool = True
    use_dssf: bool = True
    # z_R * y_IR in the RGB update and z_IR * y_R in the IR update.
    attn_ir_to_rgb: bool = True
    attn_rgb_to_ir: bool = True
    gate_silu_twice: bool = False
    d_state: int = 4
    expansion_ratio: int = 2
    conv_kernel: int = 3
    zero_skip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(sorted(set(int(s) for s in self.stages))))
        self.validate()

    def validate(self):
        if self.n_dssf < 1:
            raise ConfigurationError("n_dssf must be >= 1 (use use_dssf=False to remove DSSF)")
        if self.n_sscs < 1:
            raise ConfigurationError("n_sscs must be >= 1 (use use_sscs=False to remove SSCS)")
        if not set(self.stages) <= VALID_STAGES:
            raise ConfigurationError(f"stages must be a subset of {sorted(VALID_STAGES)}, got {self.stages}")
        if self.expansion_ratio < 1:
            raise ConfigurationError("expansion_ratio must be >= 1")
        if self.d_state < 1:
            raise ConfigurationError("d_state must be >= 1")
        if self.conv_kernel % 2 != 1:
            raise ConfigurationError("conv_kernel must be odd")

    @property
    def fusion_active(self) -> bool:
        return self.use_sscs or self.use_dssf

    def replace(self, **changes) -> "FmbConfig":
        return replace(self, **changes)


def _param(data, dtype):
    return Parameter(np.asarray(data), dtype=dtype)


class VssBlockParams(Module):
    """Norm, in-projection, depthwise conv, SS2D, post-norm, gate and out-projection."""

    def __init__(self, channels: int, expansion_ratio: int = 2, d_state: int = 4, conv_kernel: int = 3,
                 rng=None, out_scale: float = 0.02, zero_skip: bool = False):
        rng = np.random.default_rng(rng)
        dtype = get_default_dtype()
        C, P = channels, expansion_ratio * channels
        self.norm_g = _param(np.ones(C), dtype)
        self.norm_b = _param(np.zeros(C), dtype)
        self.in_w = _param(rng.normal(0, 1 / np.sqrt(C), (P, C)), dtype)
        self.in_b = _param(np.zeros(P), dtype)
        self.conv_k = _param(rng.normal(0, 1 / conv_kernel, (P, conv_kernel, conv_kernel)), dtype)
        self.conv_b = _param(np.zeros(P), dtype)
        self.ss2d = SS2DParams(P, d_state, rng=rng, zero_skip=zero_skip)
        self.post_g = _param(np.ones(P), dtype)
        self.post_b = _param(np.zeros(P), dtype)
        self.gate_w = _param(rng.normal(0, 1 / np.sqrt(C), (P, C)), dtype)
        self.gate_b = _param(np.zeros(P), dtype)
        self.out_w = _param(rng.normal(0, out_scale, (C, P)), dtype)
        self.out_b = _param(np.zeros(C), dtype)

    @property
    def channels(self) -> int:
        return self.norm_g.shape[0]

    @property
    def inner(self) -> int:
        return self.in_w.shape[0]


def _check_channels(x: Tensor, p: VssBlockParams):
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"expected (B,{p.channels},H,W) input, got {x.shape}")


def _normed(x, p: VssBlockParams) -> Tensor:
    return ops.layer_norm(x, p.norm_g, p.norm_b)


def _hidden(xn, p: VssBlockParams) -> Tensor:
    h = ops.linear(xn, p.in_w, p.in_b)
    h = ops.silu(ops.depthwise_conv2d(h, p.conv_k, p.conv_b))
    return ops.layer_norm(ss2d_forward(h, p.ss2d), p.post_g, p.post_b)


def _gate(xn, p: VssBlockParams, silu_twice: bool = False) -> Tensor:
    z = ops.silu(ops.linear(xn, p.gate_w, p.gate_b))
    return ops.silu(z) if silu_twice else z


def project_in(x, p: VssBlockParams) -> Tensor:
    """Norm -> Linear -> DWConv -> SiLU -> SS2D -> Norm, output has P channels."""
    x = ops.tensor(x)
    _check_channels(x, p)
    return _hidden(_normed(x, p), p)


def gate(x, p: VssBlockParams, silu_twice: bool = False) -> Tensor:
    """SiLU(Linear(Norm(x))); ``silu_twice`` applies the activation a second time."""
    x = ops.tensor(x)
    _check_channels(x, p)
    return _gate(_normed(x, p), p, silu_twice)


def project_out(y, x, p: VssBlockParams) -> Tensor:
    """Linear back to C channels plus the residual ``x``."""
    return ops.add(ops.linear(y, p.out_w, p.out_b), x)


def vss_block(x, p: VssBlockParams) -> Tensor:
    x = ops.tensor(x)
    _check_channels(x, p)
    xn = _normed(x, p)
    return project_out(ops.mul(_hidden(xn, p), _gate(xn, p)), x, p)


def channel_swap(a, b) -> Tensor:
    """Quarters 1 and 3 from ``a``, quarters 2 and 4 from ``b``."""
    a, b = ops.tensor(a), ops.tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"channel_swap shapes differ: {a.shape} vs {b.shape}")
    C = a.shape[1]
    if C % 4:
        raise ConfigurationError(f"channel count {C} is not divisible by 4")
    q = C // 4
    parts = [a[:, 0:q], b[:, q:2 * q], a[:, 2 * q:3 * q], b[:, 3 * q:]]
    return ops.concat(parts, axis=1)


def dual_fuse(y_r, y_ir, z_r, z_ir, attn_ir_to_rgb: bool = True, attn_rgb_to_ir: bool = True):
    """y'_R = y_R z_R + z_R y_IR,  y'_IR = y_IR z_IR + z_IR y_R (cross terms optional)."""
    out_r = ops.mul(y_r, z_r)
    if attn_ir_to_rgb:
        out_r = ops.add(out_r, ops.mul(z_r, y_ir))
    out_ir = ops.mul(y_ir, z_ir)
    if attn_rgb_to_ir:
        out_ir = ops.add(out_ir, ops.mul(z_ir, y_r))
    return out_r, out_ir


class BranchPair(Module):
    def __init__(self, r: VssBlockParams, ir: VssBlockParams):
        self.r = r
        self.ir = ir


class FmbParams(Module):
    def __init__(self, channels: int, config: FmbConfig, rng=None):
        rng = np.random.default_rng(rng)

        def block():
            return VssBlockParams(channels, config.expansion_ratio, config.d_state, config.conv_kernel,
                                  rng=rng, zero_skip=config.zero_skip)

        n_sscs = config.n_sscs if config.use_sscs else 0
        n_dssf = config.n_dssf if config.use_dssf else 0
        self.sscs = [BranchPair(block(), block()) for _ in range(n_sscs)]
        self.dssf = [BranchPair(block(), block()) for _ in range(n_dssf)]

    def swapped(self) -> "FmbParams":
        """Same parameter objects with the R and IR roles exchanged."""
        twin = FmbParams.__new__(FmbParams)
        twin.sscs = [BranchPair(b.ir, b.r) for b in self.sscs]
        twin.dssf = [BranchPair(b.ir, b.r) for b in self.dssf]
        return twin


def sscs(f_r, f_ir, params: FmbParams):
    """Channel-swap the pair, then refine each swapped map with its own VSS stack."""
    t_r = channel_swap(f_r, f_ir)
    t_ir = channel_swap(f_ir, f_r)
    for pair in params.sscs:
        t_r = vss_block(t_r, pair.r)
        t_ir = vss_block(t_ir, pair.ir)
    return t_r, t_ir


def dssf_layer(f_r, f_ir, pair: BranchPair, config: FmbConfig):
    xn_r, xn_ir = _normed(f_r, pair.r), _normed(f_ir, pair.ir)
    y_r, y_ir = _hidden(xn_r, pair.r), _hidden(xn_ir, pair.ir)
    z_r = _gate(xn_r, pair.r, config.gate_silu_twice)
    z_ir = _gate(xn_ir, pair.ir, config.gate_silu_twice)
    yp_r, yp_ir = dual_fuse(y_r, y_ir, z_r, z_ir, config.attn_ir_to_rgb, config.attn_rgb_to_ir)
    return project_out(yp_r, f_r, pair.r), project_out(yp_ir, f_ir, pair.ir)


def dssf(f_r, f_ir, config: FmbConfig, params: FmbParams):
    """Stacked dual state space fusion; layer k's outputs feed layer k+1."""
    for pair in params.dssf:
        f_r, f_ir = dssf_layer(f_r, f_ir, pair, config)
    return f_r, f_ir


def fmb(f_r, f_ir, config: FmbConfig, params: FmbParams):
    """Return (enhanced RGB, enhanced IR, fused sum).

    With both SSCS and DSSF disabled the block degenerates to plain addition
    fusion: the inputs pass through unchanged and the fused map is their sum.
    """
    f_r, f_ir = ops.tensor(f_r), ops.tensor(f_ir)
    if f_r.shape != f_ir.shape:
        raise DimensionError(f"modal feature shapes differ: {f_r.shape} vs {f_ir.shape}")
    if f_r.shape[1] % 4:
        raise ConfigurationError(f"channel count {f_r.shape[1]} is not divisible by 4")
    if not config.fusion_active:
        return f_r, f_ir, ops.add(f_r, f_ir)
    if config.use_sscs:
        t_r, t_ir = sscs(f_r, f_ir, params)
    else:
        t_r, t_ir = f_r, f_ir
    if config.use_dssf:
        t_r, t_ir = dssf(t_r, t_ir, config, params)
    hat_r = ops.add(f_r, t_r)
    hat_ir = ops.add(f_ir, t_ir)
    return hat_r, hat_ir, ops.add(hat_r, hat_ir)


def swapped_config(config: FmbConfig) -> FmbConfig:
    """Config for the branch-relabelled block (cross-term flags exchanged)."""
    return config.replace(attn_ir_to_rgb=config.attn_rgb_to_ir, attn_rgb_to_ir=config.attn_ir_to_rgb)
