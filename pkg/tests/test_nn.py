import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import FD_TOL, numeric_grad, rel_error
from scenetraj.nn import (
    AdamState,
    GaussianParams,
    LSTMCellParams,
    Parameter,
    Tensor,
    adam_step,
    add,
    backward,
    bvn_mean,
    bvn_nll,
    bvn_sample,
    clip_global_norm,
    concat,
    dropout,
    embed_relu,
    gaussian_head,
    linear_sigmoid,
    lstm_step,
    mul,
    no_grad,
    put_rows,
    take_rows,
    total,
)

SEEDS = range(20)


def zero_lstm(H, D):
    return LSTMCellParams(
        Parameter(np.zeros((4 * H, D)), "a"),
        Parameter(np.zeros((4 * H, H)), "b"),
        Parameter(np.zeros(4 * H), "c"),
    )


def check_param_grads(loss_fn, params):
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    for p in params:
        num = numeric_grad(lambda: float(loss_fn().value), p.value)
        assert rel_error(p.grad, num) <= FD_TOL, p.name


# ------------------------------------------------------------------ lstm

def test_lstm_zero_params_zero_state():
    p = zero_lstm(3, 2)
    h, c = lstm_step(p, np.array([4.0, -1.0]), np.zeros(3), np.zeros(3))
    assert np.all(h.value == 0) and np.all(c.value == 0)


def test_lstm_zero_params_closed_form():
    p = zero_lstm(3, 2)
    v = np.array([1.0, -2.0, 0.3])
    h, c = lstm_step(p, np.array([0.5, 0.5]), np.zeros(3), v)
    np.testing.assert_allclose(c.value, 0.5 * v, rtol=0, atol=1e-15)
    np.testing.assert_allclose(h.value, 0.5 * np.tanh(0.5 * v), rtol=0, atol=1e-15)


def test_lstm_shape_mismatch():
    p = zero_lstm(3, 2)
    with pytest.raises(ValueError, match="lstm_step"):
        lstm_step(p, np.zeros(4), np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        LSTMCellParams(Parameter(np.zeros((12, 2)), "a"), Parameter(np.zeros((12, 4)), "b"),
                       Parameter(np.zeros(12), "c"))


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_gradients(seed):
    rng = np.random.default_rng(seed + 7)
    p = LSTMCellParams.init("l", 2, 3, rng)
    x = Parameter(rng.normal(size=2), "x")
    h0 = Parameter(rng.normal(size=3), "h0")
    c0 = Parameter(rng.normal(size=3), "c0")
    w = rng.normal(size=3)
    wc = rng.normal(size=3)

    def loss():
        h, c = lstm_step(p, x, h0, c0)
        return total(concat([mul(h, Tensor(w)), mul(c, Tensor(wc))]))

    check_param_grads(loss, p.parameters() + [x, h0, c0])


def test_lstm_batched_matches_rows():
    rng = np.random.default_rng(3)
    p = LSTMCellParams.init("l", 2, 4, rng)
    x = rng.normal(size=(5, 2))
    h0 = rng.normal(size=(5, 4))
    c0 = rng.normal(size=(5, 4))
    hb, cb = lstm_step(p, x, h0, c0)
    for r in range(5):
        hr, cr = lstm_step(p, x[r], h0[r], c0[r])
        np.testing.assert_allclose(hb.value[r], hr.value, rtol=1e-14, atol=1e-15)
        np.testing.assert_allclose(cb.value[r], cr.value, rtol=1e-14, atol=1e-15)


# ------------------------------------------------------------------ embedding / sigmoid layer

def test_embed_zero_input():
    W = Parameter(np.random.default_rng(0).normal(size=(5, 2)), "W")
    assert np.all(embed_relu(W, np.zeros(2)).value == 0)


def test_embed_identity():
    W = Parameter(np.eye(2), "W")
    np.testing.assert_array_equal(embed_relu(W, np.array([-1.0, 2.0])).value, [0.0, 2.0])


def test_embed_shape_error():
    with pytest.raises(ValueError):
        embed_relu(Parameter(np.zeros((3, 2)), "W"), np.zeros(3))


@pytest.mark.parametrize("seed", SEEDS)
def test_embed_gradients(seed):
    rng = np.random.default_rng(seed)
    W = Parameter(rng.normal(size=(3, 2)), "W")
    x = Parameter(np.ones(2), "x")
    w = rng.normal(size=3)
    check_param_grads(lambda: total(mul(embed_relu(W, x), Tensor(w))), [W, x])


def test_linear_sigmoid_zero():
    out = linear_sigmoid(Parameter(np.zeros((4, 3)), "W"), Parameter(np.zeros(4), "b"), np.ones(3))
    np.testing.assert_array_equal(out.value, 0.5)


def test_linear_sigmoid_asymptote():
    out = linear_sigmoid(Parameter(np.zeros((1, 1)), "W"), Parameter(np.array([10.0]), "b"),
                         np.zeros(1))
    assert out.value[0] > 0.9999
    big = linear_sigmoid(Parameter(np.zeros((1, 1)), "W"), Parameter(np.array([20.0]), "b"),
                         np.zeros(1))
    assert big.value[0] > out.value[0]


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_sigmoid_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    W = Parameter(rng.normal(size=(4, 3)), "W")
    b = Parameter(rng.normal(size=4), "b")
    x = Parameter(rng.normal(size=(2, 3)), "x")
    w = rng.normal(size=(2, 4))
    check_param_grads(lambda: total(mul(linear_sigmoid(W, b, x), Tensor(w))), [W, b, x])


# ------------------------------------------------------------------ dropout

def test_dropout_eval_identity_bit_exact():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    out = dropout(x, 0.2, train=False, rng=None)
    assert out.value.tobytes() == x.value.tobytes()


def test_dropout_zero_rate():
    x = Tensor(np.arange(6.0))
    out = dropout(x, 0.0, train=True, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out.value, x.value)


def test_dropout_rate_range():
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(2)), 1.0, True, np.random.default_rng(0))
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(2)), -0.1, True, np.random.default_rng(0))


def test_dropout_expectation():
    x = Tensor(np.full(100_000, 1.7))
    out = dropout(x, 0.2, train=True, rng=np.random.default_rng(42))
    ratio = float(np.mean(out.value / x.value))
    assert 0.98 <= ratio <= 1.02


def test_dropout_deterministic():
    x = Tensor(np.ones(50))
    a = dropout(x, 0.2, True, np.random.default_rng(9)).value
    b = dropout(x, 0.2, True, np.random.default_rng(9)).value
    assert a.tobytes() == b.tobytes()


# ------------------------------------------------------------------ gaussian head / nll

def test_head_zero_hidden():
    g = gaussian_head(Parameter(np.random.default_rng(0).normal(size=(5, 4)), "W"), np.zeros(4))
    assert (g.mu_x, g.mu_y, g.sigma_x, g.sigma_y, g.rho) == (0.0, 0.0, 1.0, 1.0, 0.0)


def test_head_raw_mapping():
    W = Parameter(np.diag([0.0, 0.0, math.log(2), math.log(3), 0.0]), "W")
    g = gaussian_head(W, np.ones(5))
    assert g.sigma_x == pytest.approx(2.0, rel=1e-15)
    assert g.sigma_y == pytest.approx(3.0, rel=1e-15)
    assert g.rho == 0.0


@pytest.mark.parametrize("seed", SEEDS)
def test_head_nll_gradients(seed):
    rng = np.random.default_rng(200 + seed)
    W = Parameter(rng.normal(scale=0.5, size=(5, 4)), "W")
    h = Parameter(rng.normal(size=(3, 4)), "h")
    target = rng.normal(size=(3, 2))
    check_param_grads(lambda: total(bvn_nll(gaussian_head(W, h), target)), [W, h])


def test_nll_standard_origin():
    g = GaussianParams.from_moments(0.0, 0.0, 1.0, 1.0, 0.0)
    assert float(bvn_nll(g, [0.0, 0.0]).value) == pytest.approx(1.837877066409345, abs=1e-12)


def test_nll_unit_offset():
    g = GaussianParams.from_moments(0.0, 0.0, 1.0, 1.0, 0.0)
    assert float(bvn_nll(g, [1.0, 0.0]).value) == pytest.approx(math.log(2 * math.pi) + 0.5,
                                                                abs=1e-12)


def _matrix_log_density(x, y, mx, my, sx, sy, rho):
    cov = np.array([[sx * sx, rho * sx * sy], [rho * sx * sy, sy * sy]])
    d = np.array([x - mx, y - my])
    return -0.5 * d @ np.linalg.solve(cov, d) - math.log(2 * math.pi) \
        - 0.5 * math.log(np.linalg.det(cov))


@given(
    st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2), st.floats(-2, 2),
    st.floats(0.05, 4), st.floats(0.05, 4), st.floats(-0.95, 0.95),
)
@settings(max_examples=200, deadline=None)
def test_nll_matches_matrix_density(x, y, mx, my, sx, sy, rho):
    g = GaussianParams.from_moments(mx, my, sx, sy, rho)
    ref = -_matrix_log_density(x, y, mx, my, sx, sy, rho)
    assert float(bvn_nll(g, [x, y]).value) == pytest.approx(ref, rel=1e-9, abs=1e-9)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 3))
@settings(max_examples=100, deadline=None)
def test_nll_symmetry(x, y, s):
    g = GaussianParams.from_moments(0.0, 0.0, s, s, 0.0)
    assert float(bvn_nll(g, [x, y]).value) == pytest.approx(float(bvn_nll(g, [y, x]).value),
                                                            rel=1e-12, abs=1e-12)


@given(st.floats(0.1, 10), st.floats(-2, 2), st.floats(-2, 2), st.floats(-0.9, 0.9))
@settings(max_examples=100, deadline=None)
def test_nll_rescaling(s, x, y, rho):
    base = GaussianParams.from_moments(0.3, -0.2, 0.7, 1.3, rho)
    scaled = GaussianParams.from_moments(0.3 * s, -0.2 * s, 0.7 * s, 1.3 * s, rho)
    lhs = float(bvn_nll(scaled, [x * s, y * s]).value)
    rhs = float(bvn_nll(base, [x, y]).value) + 2 * math.log(s)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_nll_rejects_nonfinite():
    g = GaussianParams.from_moments(0.0, 0.0, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        bvn_nll(g, [float("nan"), 0.0])


def test_nll_finite_at_extreme_correlation():
    g = GaussianParams(Tensor(np.array([0.0, 0.0, 0.0, 0.0, 30.0])))
    assert np.isfinite(bvn_nll(g, [0.1, -0.1]).value)


# ------------------------------------------------------------------ sampling

def test_mean_extraction():
    g = GaussianParams.from_moments(3.0, -1.0, 0.4, 2.0, 0.3)
    np.testing.assert_array_equal(bvn_mean(g), [3.0, -1.0])


def test_sample_vanishing_variance():
    g = GaussianParams.from_moments(3.0, -1.0, 1e-6, 1e-6, 0.0)
    s = bvn_sample(g, np.random.default_rng(0))
    np.testing.assert_allclose(s, [3.0, -1.0], atol=1e-4)


def test_sample_covariance():
    n = 100_000
    g = GaussianParams.from_moments(np.zeros(n), np.zeros(n), np.ones(n), np.full(n, 2.0),
                                    np.full(n, 0.5))
    s = bvn_sample(g, np.random.default_rng(5))
    cov = np.cov(s.T)
    ref = np.array([[1.0, 1.0], [1.0, 4.0]])
    assert np.all(np.abs(cov - ref) <= 0.05 * np.abs(ref))


def test_sample_deterministic():
    g = GaussianParams.from_moments(0.0, 0.0, 1.0, 1.0, 0.2)
    a = bvn_sample(g, np.random.default_rng(11))
    b = bvn_sample(g, np.random.default_rng(11))
    assert a.tobytes() == b.tobytes()


# ------------------------------------------------------------------ backward contract

def test_backward_sum_of_parameter():
    p = Parameter(np.arange(6.0).reshape(2, 3), "p")
    backward(total(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_accumulates():
    rng = np.random.default_rng(1)
    W = Parameter(rng.normal(size=(5, 3)), "W")
    loss = total(bvn_nll(gaussian_head(W, rng.normal(size=3)), rng.normal(size=2)))
    backward(loss)
    first = W.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(W.grad, 2.0 * first)


def test_backward_without_forward():
    with pytest.raises(RuntimeError):
        backward(Tensor(np.array(1.0)))
    with no_grad():
        loss = total(Parameter(np.ones(2), "p"))
    with pytest.raises(RuntimeError):
        backward(loss)


def test_row_ops_gradients():
    rng = np.random.default_rng(4)
    base = Parameter(rng.normal(size=(5, 3)), "base")
    rows = Parameter(rng.normal(size=(2, 3)), "rows")
    w = rng.normal(size=(5, 3))
    w2 = rng.normal(size=(3, 3))

    def loss():
        out = put_rows(base, np.array([3, 1]), rows)
        a = total(mul(out, Tensor(w)))
        b = total(mul(take_rows(out, np.array([1, 1, 4])), Tensor(w2)))
        return add(a, b)

    check_param_grads(loss, [base, rows])


def test_put_rows_rejects_duplicates():
    with pytest.raises(ValueError):
        put_rows(Tensor(np.zeros((3, 2))), np.array([1, 1]), Tensor(np.zeros((2, 2))))


# ------------------------------------------------------------------ clipping

def _grads(*arrays):
    ps = []
    for k, a in enumerate(arrays):
        p = Parameter(np.zeros_like(a), f"p{k}")
        p.grad[...] = a
        ps.append(p)
    return ps


def test_clip_scales_down():
    ps = _grads(np.array([12.0, 0.0]), np.array([0.0, 16.0]))  # norm 20
    assert clip_global_norm(ps, 10.0) == 0.5
    np.testing.assert_array_equal(ps[0].grad, [6.0, 0.0])
    np.testing.assert_array_equal(ps[1].grad, [0.0, 8.0])


def test_clip_below_threshold():
    ps = _grads(np.array([3.0, 4.0]))
    assert clip_global_norm(ps, 10.0) == 1.0
    np.testing.assert_array_equal(ps[0].grad, [3.0, 4.0])


def test_clip_boundary():
    ps = _grads(np.array([6.0, 8.0]))
    assert clip_global_norm(ps, 10.0) == 1.0
    np.testing.assert_array_equal(ps[0].grad, [6.0, 8.0])


@given(st.integers(0, 10_000), st.floats(0.01, 100))
@settings(max_examples=50, deadline=None)
def test_clip_preserves_direction(seed, threshold):
    rng = np.random.default_rng(seed)
    ps = _grads(rng.normal(size=(3, 4)) * 10, rng.normal(size=5) * 10)
    before = np.concatenate([p.grad.ravel() for p in ps])
    clip_global_norm(ps, threshold)
    after = np.concatenate([p.grad.ravel() for p in ps])
    cos = before @ after / (np.linalg.norm(before) * np.linalg.norm(after))
    assert abs(cos - 1.0) <= 1e-12


# ------------------------------------------------------------------ adam

def test_adam_zero_grad_no_move():
    p = Parameter(np.array([1.0, -2.0]), "p")
    adam_step([p], AdamState(), 0.003)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_adam_first_step_scalar():
    p = Parameter(np.array(0.5), "p")
    p.grad[...] = 1.0
    adam_step([p], AdamState(), 0.003)
    assert abs((float(p.value) - 0.5) - (-0.003)) < 1e-7
    # hand value: -lr * 1 / (1 + eps)
    assert float(p.value) - 0.5 == pytest.approx(-0.003 / (1 + 1e-8), abs=1e-15)


def test_adam_sign_property():
    rng = np.random.default_rng(0)
    p = Parameter(rng.normal(size=20), "p")
    start = p.value.copy()
    p.grad[...] = rng.normal(size=20)
    adam_step([p], AdamState(), 0.003)
    assert np.all(np.sign(p.value - start) == -np.sign(p.grad))


def test_adam_rejects_bad_lr():
    with pytest.raises(ValueError):
        adam_step([], AdamState(), 0.0)


def test_adam_step_counter():
    st_ = AdamState()
    p = Parameter(np.ones(2), "p")
    for k in range(3):
        adam_step([p], st_, 0.01)
        assert st_.t == k + 1
