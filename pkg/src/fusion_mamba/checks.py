"""Oracle, gradient and invariant checks shared by ``selftest`` and the test suite.

Each check returns a :class:`CheckResult` carrying the measured quantity, so
callers can both gate on ``passed`` and report the number.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import oracles
from .bench import DEFAULT_SIZES, check_scaling, run_bench
from .detector.metrics import class_ap
from .fusion import (
    FmbConfig,
    FmbParams,
    VssBlockParams,
    channel_swap,
    dssf_layer,
    fmb,
    swapped_config,
    vss_block,
)
from .ss2d import SS2DParams, scan_expand, scan_merge, ss2d_forward
from .ssm_core.lti import discretize_zoh
from .ssm_core.s6 import SsmParams, s6_forward
from .tensor_core import ops
from .tensor_core.gradcheck import finite_diff_check
from .tensor_core.tensor import Parameter, no_grad


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def check_lti_oracle(n_draws: int = 100, tolerance: float = 1e-5, seed: int = 0) -> CheckResult:
    """Recurrent vs convolutional LTI evaluation on random ZOH-discretized systems."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(n_draws):
        N, D, L = (int(rng.integers(1, m + 1)) for m in (16, 8, 64))
        A = -rng.uniform(0.01, 2.0, (D, N))
        B = rng.normal(0, 1, (D, N))
        delta = np.exp(rng.uniform(np.log(1e-3), 0.0, (D, 1)))
        A_bar, B_bar = discretize_zoh(A, B, delta)
        C = rng.normal(0, 1, (D, N))
        x = rng.normal(0, 1, (L, D))
        worst = max(worst, oracles.lti_agreement(x, A_bar, B_bar, C))
    dt = time.perf_counter() - t0
    return CheckResult("lti_oracle", worst <= tolerance, worst,
                       f"{n_draws} draws, max rel err {worst:.2e} (tol {tolerance:g}), {dt:.2f}s")


def _weighted_sum(y, w):
    return ops.sum(ops.mul(y, w))


def gradient_cases(seed: int = 0) -> dict:
    """name -> (loss closure, parameter dict) for every differentiable building block.

    Each loss contracts the output with fixed random weights so that no
    gradient vanishes by symmetry.
    """
    rng = np.random.default_rng(seed)

    def p(*shape, scale=1.0):
        return Parameter(rng.normal(0, scale, shape).astype(np.float32))

    def weights(shape):
        return rng.normal(0, 1, shape).astype(np.float32)

    cases = {}
    # Closures bind their operands through default arguments because the
    # names are reused from case to case.

    x = p(3, 5)
    w = weights((3, 5))
    cases["silu"] = (lambda x=x, w=w: _weighted_sum(ops.silu(x), w), {"x": x})

    x, g, b = p(2, 4, 3, 3), p(4), p(4)
    w = weights((2, 4, 3, 3))
    cases["layer_norm"] = (lambda x=x, w=w: _weighted_sum(ops.layer_norm(x, g, b), w), {"x": x, "gamma": g, "beta": b})

    x, W, bias = p(2, 3, 4, 4), p(5, 3), p(5)
    w = weights((2, 5, 4, 4))
    cases["linear"] = (lambda x=x, w=w: _weighted_sum(ops.linear(x, W, bias), w), {"x": x, "W": W, "b": bias})

    x, k, kb = p(1, 3, 5, 5), p(3, 3, 3), p(3)
    w = weights((1, 3, 5, 5))
    cases["depthwise_conv2d"] = (lambda x=x, w=w: _weighted_sum(ops.depthwise_conv2d(x, k, kb), w),
                                 {"x": x, "kernel": k, "bias": kb})

    s6p = SsmParams(4, 3, rng=rng)
    x = p(6, 4)
    w = weights((6, 4))
    cases["s6_forward"] = (lambda x=x, w=w: _weighted_sum(s6_forward(x, s6p), w), {"x": x, **s6p.parameter_dict()})

    s2p = SS2DParams(4, 2, rng=rng)
    x = p(1, 4, 3, 3)
    w = weights((1, 4, 3, 3))
    cases["ss2d_forward"] = (lambda x=x, w=w: _weighted_sum(ss2d_forward(x, s2p), w), {"x": x, **s2p.parameter_dict()})

    vp = VssBlockParams(4, d_state=2, rng=rng, out_scale=0.5)
    x = p(1, 4, 4, 4)
    w = weights((1, 4, 4, 4))
    cases["vss_block"] = (lambda x=x, w=w: _weighted_sum(vss_block(x, vp), w), {"x": x, **vp.parameter_dict()})

    cfg = FmbConfig(n_dssf=2, d_state=2)
    fp = FmbParams(4, cfg, rng=rng)
    for pair in fp.sscs + fp.dssf:
        for blk in (pair.r, pair.ir):
            blk.out_w.data = rng.normal(0, 0.5, blk.out_w.shape).astype(blk.out_w.dtype)
    f_r, f_ir = p(1, 4, 4, 4), p(1, 4, 4, 4)
    w1, w2 = weights((1, 4, 4, 4)), weights((1, 4, 4, 4))

    def fmb_loss():
        hat_r, hat_ir, fused = fmb(f_r, f_ir, cfg, fp)
        return ops.add(_weighted_sum(fused, w1), _weighted_sum(hat_r, w2))

    cases["fmb"] = (fmb_loss, {"f_r": f_r, "f_ir": f_ir, **fp.parameter_dict()})
    return cases


def check_gradients(tolerance: float = 1e-3, seed: int = 0, max_coords: int = 16) -> list[CheckResult]:
    results = []
    for name, (loss, params) in gradient_cases(seed).items():
        t0 = time.perf_counter()
        rep = finite_diff_check(loss, params, tolerance=tolerance, max_coords=max_coords, seed=seed)
        dt = time.perf_counter() - t0
        worst = f", worst {rep.worst[0]}" if rep.worst else ""
        results.append(CheckResult(f"grad_{name}", rep.passed, rep.max_rel_error,
                                   f"max rel err {rep.max_rel_error:.2e} over {rep.n_checked} coords{worst}, {dt:.2f}s"))
    return results


def _block_pair_with(fp: FmbParams, **arrays):
    for pair in fp.sscs + fp.dssf:
        for blk in (pair.r, pair.ir):
            for attr, fill in arrays.items():
                getattr(blk, attr).data = np.full_like(getattr(blk, attr).data, fill)


def invariant_results(seed: int = 0) -> list[CheckResult]:
    """Exact (bitwise) structural identities of the scan and fusion blocks."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 8, 5, 6)).astype(np.float32)
    b = rng.normal(size=(2, 8, 5, 6)).astype(np.float32)
    out = []
    with no_grad():
        t_r, t_ir = channel_swap(a, b).data, channel_swap(b, a).data
        back = channel_swap(t_r, t_ir).data
        out.append(CheckResult("swap_involution", bool(np.array_equal(back, a)), 0.0,
                               "swap(swap(a,b), swap(b,a)) == a bitwise"))
        before = np.sort(np.concatenate([a, b], axis=1), axis=1)
        after = np.sort(np.concatenate([t_r, t_ir], axis=1), axis=1)
        out.append(CheckResult("swap_conservation", bool(np.array_equal(before, after)), 0.0,
                               "channel multiset preserved across the swapped pair"))

        merged = scan_merge(scan_expand(a)).data
        out.append(CheckResult("merge_expand", bool(np.array_equal(merged, 4 * a)), 0.0,
                               "merge(expand(x)) == 4x bitwise"))

        cfg = FmbConfig(n_dssf=2, d_state=2)
        fp = FmbParams(8, cfg, rng=rng)
        _block_pair_with(fp, out_w=0.0, out_b=0.0)
        y_r, y_ir = dssf_layer(a, b, fp.dssf[0], cfg)
        ok = np.array_equal(y_r.data, a) and np.array_equal(y_ir.data, b)
        out.append(CheckResult("dssf_residual", bool(ok), 0.0, "zero out-projection leaves DSSF inputs unchanged"))

        fp = FmbParams(8, cfg, rng=rng)
        _block_pair_with(fp, gate_w=0.0, gate_b=0.0)
        y_r, y_ir = dssf_layer(a, b, fp.dssf[0], cfg)
        ok = np.array_equal(y_r.data, a) and np.array_equal(y_ir.data, b)
        out.append(CheckResult("gate_closure", bool(ok), 0.0, "closed gate (z = 0) passes the input through"))

        cfg = FmbConfig(n_dssf=2, d_state=2, attn_rgb_to_ir=False)
        fp = FmbParams(8, cfg, rng=rng)
        hat_r, hat_ir, fused = fmb(a, b, cfg, fp)
        s_r, s_ir, s_fused = fmb(b, a, swapped_config(cfg), fp.swapped())
        ok = (np.array_equal(s_r.data, hat_ir.data) and np.array_equal(s_ir.data, hat_r.data)
              and np.array_equal(s_fused.data, fused.data))
        out.append(CheckResult("branch_swap", bool(ok), 0.0,
                               "relabelling RGB/IR swaps the enhanced outputs, fused sum unchanged"))
    return out


def check_ap_oracle(n_instances: int = 50, tolerance: float = 1e-6, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    compared = 0
    for _ in range(n_instances):
        dets, gts = oracles.random_ap_instance(rng)
        for c in range(2):
            for thr in (0.5, 0.75, 0.9):
                fast = class_ap(dets, gts, c, thr)
                slow = oracles.brute_force_ap(dets, gts, c, thr)
                if (fast is None) != (slow is None):
                    return CheckResult("ap_oracle", False, float("inf"), f"class presence mismatch for class {c}")
                if fast is not None:
                    worst = max(worst, abs(fast - slow))
                    compared += 1
    return CheckResult("ap_oracle", worst <= tolerance, worst,
                       f"{n_instances} instances, {compared} AP values, max |diff| {worst:.1e}")


def check_bench(sizes=DEFAULT_SIZES, retries: int = 1, **kwargs) -> CheckResult:
    """Scaling thresholds with a retry to absorb timing noise."""
    for attempt in range(retries + 1):
        rows = run_bench(sizes, **kwargs)
        ok, factors = check_scaling(rows)
        detail = ", ".join(f"{k} x{max(v) if k == 's6_forward' else min(v):.2f}" for k, v in factors.items())
        if ok:
            break
    return CheckResult("bench_scaling", ok, max(factors["s6_forward"]),
                       f"worst per-doubling growth: {detail} (attempts {attempt + 1})")


def check_determinism(seed: int = 0, n_samples: int = 8, epochs: int = 2) -> CheckResult:
    """Two identical training runs must log identical losses."""
    from .detector.config import TrainConfig
    from .detector.data import synth_dataset
    from .detector.train import train

    config = TrainConfig(epochs=epochs, image_size=64, seed=seed).replace(n_dssf=2)
    data = synth_dataset(seed, n_samples, 64)
    first = train(config, data).log_csv()
    second = train(config, data).log_csv()
    same = first == second
    return CheckResult("determinism", same, 0.0 if same else 1.0,
                       f"{epochs} epochs on {n_samples} samples, loss logs {'identical' if same else 'differ'}")
