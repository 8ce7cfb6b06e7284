import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusion_mamba.errors import DimensionError
from fusion_mamba.oracles import lti_agreement
from fusion_mamba.ssm_core import (
    SsmParams,
    discretize_zoh,
    lti_conv_kernel,
    lti_scan,
    lti_scan_via_kernel,
    s6_forward,
    selective_scan,
)
from fusion_mamba.ssm_core.lti import zoh_factor
from fusion_mamba.tensor_core import Parameter, backward, finite_diff_check, ops, precision
from fusion_mamba.tensor_core.tensor import no_grad


def softplus(v):
    return np.logaddexp(0.0, v)


def reference_s6(x, p: SsmParams):
    """Plain float64 loop over timesteps: per-step ZOH, then the recurrence."""
    x = np.asarray(x, np.float64)
    A = -np.exp(p.A_log.data.astype(np.float64))
    W_B, W_C = p.W_B.data.astype(np.float64), p.W_C.data.astype(np.float64)
    W_d, b_d = p.W_delta.data.astype(np.float64), p.b_delta.data.astype(np.float64)
    D_skip = 0.0 if p.zero_skip else p.D_skip.data.astype(np.float64)
    h = np.zeros_like(A)
    ys = []
    for xk in x:
        delta = softplus(W_d @ xk + b_d)[:, None]
        A_bar, B_bar = discretize_zoh(A, np.broadcast_to(W_B @ xk, A.shape), delta)
        h = A_bar * h + B_bar * xk[:, None]
        ys.append(h @ (W_C @ xk) + D_skip * xk)
    return np.array(ys)


# discretize_zoh

def test_zoh_closed_form():
    A_bar, B_bar = discretize_zoh(-1.0, 1.0, np.log(2.0))
    assert A_bar == pytest.approx(0.5, abs=1e-15)
    assert B_bar == pytest.approx(0.5, abs=1e-15)


def test_zoh_limits():
    A_bar, B_bar = discretize_zoh(0.0, 2.0, 0.3)
    assert A_bar == 1.0 and B_bar == pytest.approx(0.6)
    A_bar, B_bar = discretize_zoh(-1e-9, 2.0, 0.3)
    assert B_bar == pytest.approx(0.6, rel=1e-8)
    A_bar, B_bar = discretize_zoh(-2.0, 1.0, 1e-12)
    assert A_bar == pytest.approx(1.0) and abs(B_bar) < 1e-11


def test_zoh_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        discretize_zoh(-1.0, 1.0, 0.0)


@given(st.floats(-5e-4, 5e-4))
def test_zoh_factor_continuous_across_limit(z):
    exact = np.expm1(z) / z if z != 0 else 1.0
    assert abs(zoh_factor(z) - exact) < 1e-4


# lti_scan and kernel form

def test_lti_examples():
    np.testing.assert_array_equal(lti_scan(np.zeros(5), 0.5, 1.0, 1.0), 0)
    np.testing.assert_allclose(lti_scan([1.0, 0.0, 0.0], 0.5, 1.0, 1.0), [1, 0.5, 0.25])
    x = np.random.default_rng(0).normal(size=(7, 3))
    np.testing.assert_array_equal(lti_scan(x, 0.5, 1.0, 0.0, D_skip=1.0), x)


def test_kernel_examples():
    np.testing.assert_allclose(lti_conv_kernel(0.5, 1.0, 1.0, 3).ravel(), [1, 0.5, 0.25])
    k = lti_conv_kernel(0.0, 2.0, 3.0, 4).ravel()
    np.testing.assert_array_equal(k, [6, 0, 0, 0])
    assert np.all(lti_conv_kernel(0.9, 1.0, 0.0, 5) == 0)


def test_kernel_path_examples():
    K = lti_conv_kernel(0.7, 0.4, 1.3, 3)
    np.testing.assert_allclose(lti_scan_via_kernel(np.array([1.0, 0.0, 0.0]), K.ravel()), K.ravel(), atol=1e-15)
    assert np.allclose(lti_scan_via_kernel(np.ones(6), np.zeros(6)), 0)
    with pytest.raises(DimensionError):
        lti_scan_via_kernel(np.ones(4), np.ones(3))


def test_kernel_path_matches_recurrence_at_l16():
    rng = np.random.default_rng(1)
    A_bar, B_bar = discretize_zoh(-rng.uniform(0.1, 2, (4, 6)), rng.normal(size=(4, 6)), 0.1)
    C = rng.normal(size=(4, 6))
    assert lti_agreement(rng.normal(size=(16, 4)), A_bar, B_bar, C) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(1, 8), st.integers(1, 64), st.integers(0, 10_000))
def test_oracle_equivalence_random(N, D, L, seed):
    rng = np.random.default_rng(seed)
    delta = np.exp(rng.uniform(np.log(1e-3), 0.0, (D, 1)))
    A_bar, B_bar = discretize_zoh(-rng.uniform(0.01, 2.0, (D, N)), rng.normal(size=(D, N)), delta)
    C = rng.normal(size=(D, N))
    assert lti_agreement(rng.normal(size=(L, D)), A_bar, B_bar, C) < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 40), st.integers(0, 10_000))
def test_state_stability_bound(N, L, seed):
    rng = np.random.default_rng(seed)
    A_bar, B_bar = discretize_zoh(-np.exp(rng.normal(size=(1, N))), rng.normal(size=(1, N)), rng.uniform(0.01, 1.0))
    x = rng.uniform(-1, 1, L)
    bound = np.abs(B_bar).max() * np.abs(x).max() / (1 - A_bar.max())
    for n in range(N):
        # reading state n through a one-hot C
        h_n = lti_scan(x, A_bar, B_bar, np.eye(N)[n][None])
        assert np.abs(h_n).max() <= bound * (1 + 1e-12)


# selective scan

def test_s6_without_state_path_is_skip():
    p = SsmParams(3, 4, rng=0)
    p.W_B.data[:] = 0
    p.W_C.data[:] = 0
    p.D_skip.data[:] = [0.5, -1.0, 2.0]
    x = np.random.default_rng(2).normal(size=(9, 3)).astype(np.float32)
    np.testing.assert_allclose(s6_forward(x, p).data, x * p.D_skip.data, rtol=1e-6)


def test_s6_single_step():
    with precision(np.float64):
        p = SsmParams(1, 1, rng=3)
    x = np.array([[0.8]])
    xk = 0.8
    A = -np.exp(p.A_log.data[0, 0])
    B1, C1 = p.W_B.data[0, 0] * xk, p.W_C.data[0, 0] * xk
    delta = softplus(p.W_delta.data[0, 0] * xk + p.b_delta.data[0])
    _, B_bar = discretize_zoh(A, B1, delta)
    expected = C1 * B_bar * xk + p.D_skip.data[0] * xk
    assert s6_forward(x, p).data[0, 0] == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("zero_skip", [False, True])
def test_s6_matches_reference_loop(zero_skip):
    with precision(np.float64):
        p = SsmParams(5, 3, rng=4, zero_skip=zero_skip)
    x = np.random.default_rng(5).normal(size=(20, 5))
    np.testing.assert_allclose(s6_forward(x, p).data, reference_s6(x, p), rtol=1e-10, atol=1e-12)


def test_s6_frozen_step_size_matches_reference_loop():
    # W_delta = 0 fixes the step size at softplus(b_delta); B_k and C_k still follow x_k.
    with precision(np.float64):
        p = SsmParams(4, 3, rng=6)
    p.W_delta.data[:] = 0
    x = np.random.default_rng(7).normal(size=(16, 4))
    np.testing.assert_allclose(s6_forward(x, p).data, reference_s6(x, p), rtol=1e-10, atol=1e-12)


def test_time_invariant_scan_matches_kernel_oracle():
    # Constant step size, B and C: the selective scan is an LTI system.
    rng = np.random.default_rng(8)
    L, D, N = 32, 3, 5
    A = -rng.uniform(0.1, 2.0, (D, N))
    B, C = rng.normal(size=N), rng.normal(size=N)
    delta = softplus(rng.normal(size=D))
    x = rng.normal(size=(L, D))
    y = selective_scan(
        x[None, None], np.broadcast_to(delta, (1, 1, L, D)), A[None],
        np.broadcast_to(B, (1, 1, L, N)), np.broadcast_to(C, (1, 1, L, N)), np.zeros((1, D)),
    ).data[0, 0]
    A_bar, B_bar = discretize_zoh(A, np.broadcast_to(B, (D, N)), delta[:, None])
    K = lti_conv_kernel(A_bar, B_bar, np.broadcast_to(C, (D, N)), L)
    oracle = lti_scan_via_kernel(x, K)
    assert np.abs(y - oracle).max() / np.abs(oracle).max() < 1e-5


def test_s6_causality():
    p = SsmParams(4, 3, rng=9)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(12, 4)).astype(np.float32)
    x2 = x.copy()
    x2[7:] += rng.normal(size=(5, 4)).astype(np.float32)
    y, y2 = s6_forward(x, p).data, s6_forward(x2, p).data
    np.testing.assert_array_equal(y[:7], y2[:7])
    assert not np.allclose(y[7:], y2[7:])


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3).filter(lambda a: abs(a) > 1e-3), st.integers(0, 1000))
def test_scan_linear_with_frozen_selection(alpha, seed):
    rng = np.random.default_rng(seed)
    L, D, N = 10, 3, 2
    delta = softplus(rng.normal(size=(1, 1, L, D)))
    A = -np.exp(rng.normal(size=(1, D, N)))
    Bs, Cs = rng.normal(size=(1, 1, L, N)), rng.normal(size=(1, 1, L, N))
    Dk = rng.normal(size=(1, D))
    x = rng.normal(size=(1, 1, L, D))
    y = selective_scan(x, delta, A, Bs, Cs, Dk).data
    ya = selective_scan(alpha * x, delta, A, Bs, Cs, Dk).data
    np.testing.assert_allclose(ya, alpha * y, rtol=1e-12, atol=1e-12)


def test_selective_scan_gradients_all_operands():
    rng = np.random.default_rng(11)
    K, B, L, D, N = 2, 1, 6, 3, 2
    u = Parameter(rng.normal(size=(K, B, L, D)))
    delta = Parameter(softplus(rng.normal(size=(K, B, L, D))))
    A = Parameter(-np.exp(rng.normal(size=(K, D, N))))
    Bs, Cs = Parameter(rng.normal(size=(K, B, L, N))), Parameter(rng.normal(size=(K, B, L, N)))
    Dk = Parameter(rng.normal(size=(K, D)))
    w = rng.normal(size=(K, B, L, D))
    params = {"u": u, "delta": delta, "A": A, "B": Bs, "C": Cs, "D": Dk}
    rep = finite_diff_check(lambda: ops.sum(ops.mul(selective_scan(u, delta, A, Bs, Cs, Dk), w)), params,
                            epsilon=1e-5, tolerance=1e-6, max_coords=None)
    assert rep.passed, rep.worst


def test_s6_gradients_float32():
    p = SsmParams(4, 3, rng=12)
    x = Parameter(np.random.default_rng(13).normal(size=(6, 4)).astype(np.float32))
    w = np.random.default_rng(14).normal(size=(6, 4)).astype(np.float32)
    rep = finite_diff_check(lambda: ops.sum(ops.mul(s6_forward(x, p), w)), {"x": x, **p.parameter_dict()},
                            tolerance=1e-3)
    assert rep.passed, rep.worst


def test_s6_batched_equals_per_sequence():
    p = SsmParams(4, 2, rng=15)
    x = np.random.default_rng(16).normal(size=(3, 9, 4)).astype(np.float32)
    with no_grad():
        batched = s6_forward(x, p).data
        for b in range(3):
            np.testing.assert_allclose(batched[b], s6_forward(x[b], p).data, rtol=1e-6, atol=1e-7)


def test_s6_shape_errors():
    p = SsmParams(4, 2, rng=0)
    with pytest.raises(DimensionError):
        s6_forward(np.zeros((5, 3)), p)
    with pytest.raises(DimensionError):
        selective_scan(np.zeros((1, 1, 4, 2)), np.ones((1, 1, 4, 2)), np.zeros((1, 2, 3)),
                       np.zeros((1, 1, 4, 2)), np.zeros((1, 1, 4, 3)), np.zeros((1, 2)))


def test_s6_parameters_receive_gradient():
    p = SsmParams(3, 2, rng=17)
    x = np.random.default_rng(18).normal(size=(5, 3)).astype(np.float32)
    grads = backward(ops.sum(ops.mul(s6_forward(x, p), np.linspace(-1, 1, 15).reshape(5, 3))), p.parameter_dict())
    for name, g in grads.items():
        assert np.abs(g).max() > 0, name
