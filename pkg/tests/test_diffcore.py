import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spatial_vae import diffcore as dc


def grad_of(f, *arrays):
    leaves = [dc.parameter(a) for a in arrays]
    return dc.backprop(f(*leaves), wrt=leaves)


# -- forward values ----------------------------------------------------------

def test_linear_identity():
    out = dc.linear(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_linear_picks_first_row_plus_bias():
    out = dc.linear(np.array([[1.0, 0.0]]), np.array([[3.0, 4.0], [5.0, 6.0]]), np.ones(2))
    np.testing.assert_array_equal(out.data, [[4.0, 5.0]])


def test_linear_bias_gradient_is_ones(rng):
    x, W, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    gb = grad_of(lambda x, W, b: dc.tsum(dc.linear(x, W, b)), x, W, b)[2]
    np.testing.assert_array_equal(gb, [4.0, 4.0])


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        dc.linear(np.ones((2, 3)), np.ones((2, 2)), np.ones(2))


def test_tanh_values_and_gradient():
    assert dc.tanh_act(np.array(0.0)).item() == 0.0
    (g,) = grad_of(lambda a: dc.tsum(dc.tanh_act(a)), np.array([0.0]))
    assert g[0] == 1.0
    big = dc.tanh_act(np.array(20.0))
    assert abs(big.item() - 1.0) < 1e-12
    (g,) = grad_of(lambda a: dc.tsum(dc.tanh_act(a)), np.array([20.0]))
    assert abs(g[0]) < 1e-12


def test_square_gradient():
    (g,) = grad_of(lambda w: dc.tsum(dc.square(w)), np.array(3.0))
    assert g == 6.0


def test_unreachable_parameter_gets_zero():
    w, p = dc.parameter(2.0), dc.parameter(np.ones(3))
    gw, gp = dc.backprop(dc.mul(w, w), wrt=[w, p])
    assert gw == 4.0
    np.testing.assert_array_equal(gp, np.zeros(3))


def test_backprop_needs_scalar():
    w = dc.parameter(np.ones(3))
    with pytest.raises(ValueError):
        dc.backprop(dc.mul(w, 2.0))


def test_shared_subexpression_visited_once():
    w = dc.parameter(1.5)
    h = dc.mul(w, w)
    loss = dc.add(h, h)  # d/dw 2 w^2 = 4 w
    (g,) = dc.backprop(loss, wrt=[w])
    assert g == 6.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_is_an_error():
    with pytest.raises(dc.NonFiniteError):
        dc.exp(np.array([1000.0]))
    with pytest.raises(dc.NonFiniteError):
        dc.div(np.array([1.0]), np.array([0.0]))


def test_log_rejects_non_positive():
    with pytest.raises(dc.NonFiniteError):
        dc.log(np.array([0.0, 1.0]))


def test_broadcast_gradients_reduce_to_operand_shape(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    ga, gb = grad_of(lambda a, b: dc.tsum(dc.mul(a, b)), a, b)
    np.testing.assert_allclose(ga, np.broadcast_to(b, (4, 3)))
    np.testing.assert_allclose(gb, a.sum(axis=0))


def test_getitem_fancy_index_accumulates():
    (g,) = grad_of(lambda a: dc.tsum(dc.getitem(a, np.array([0, 0, 2]))), np.zeros(3))
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])


# -- gradient oracle over every differentiable op -----------------------------

_CONST = np.random.default_rng(7).normal(size=(4, 2))

UNARY = {
    "neg": dc.neg, "square": dc.square, "exp": dc.exp, "sin": dc.sin, "cos": dc.cos,
    "tanh": dc.tanh_act, "sigmoid": dc.sigmoid,
    "log": lambda a: dc.log(dc.add(dc.square(a), 0.5)),
    "relu": lambda a: dc.relu(dc.add(a, 0.05)),
    "clip": lambda a: dc.clip(a, -0.7, 0.7),
    "sum_axis": lambda a: dc.tsum(a, axis=0), "mean": lambda a: dc.tmean(a, axis=1),
    "reshape": lambda a: dc.reshape(a, (-1,)), "slice": lambda a: a[1:, ::2],
    "matmul_const": lambda a: dc.matmul(a, _CONST),
    "vecmat": lambda a: dc.matmul(a, _CONST[:, 0]),
}
BINARY = {
    "add": dc.add, "sub": dc.sub, "mul": dc.mul,
    "div": lambda a, b: dc.div(a, dc.add(dc.square(b), 1.0)),
    "matmul": lambda a, b: dc.matmul(a, dc.reshape(b, (4, 3))),
    "concat": lambda a, b: dc.concat([a, b], axis=0),
    "stack": lambda a, b: dc.stack([a, b], axis=-1),
}


def _weighted_sum(t, w):
    return dc.tsum(dc.mul(t, w))


def _away_from_kinks(x, name):
    # keep finite differences off the non-differentiable points of relu/clip
    if name == "relu":
        x = np.where(np.abs(x + 0.05) < 1e-3, 0.5, x)
    if name == "clip":
        x = np.where(np.abs(np.abs(x) - 0.7) < 1e-3, 0.0, x)
    return x


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=st.integers(0, 2**32 - 1))
def test_unary_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = _away_from_kinks(rng.normal(size=(3, 4)), name)
    w = rng.normal(size=UNARY[name](dc.Tensor(x)).shape)
    err = dc.finite_diff_check(lambda p: _weighted_sum(UNARY[name](p[0]), w), [x])
    assert err <= 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
@given(seed=st.integers(0, 2**32 - 1))
def test_binary_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = rng.normal(size=BINARY[name](dc.Tensor(a), dc.Tensor(b)).shape)
    err = dc.finite_diff_check(lambda p: _weighted_sum(BINARY[name](p[0], p[1]), w), [a, b])
    assert err <= 1e-4


@given(seed=st.integers(0, 2**32 - 1))
def test_batched_matmul_against_shared_matrix(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 5, 3)), rng.normal(size=(3, 4))
    w = rng.normal(size=(2, 5, 4))
    assert dc.finite_diff_check(lambda p: _weighted_sum(dc.matmul(p[0], p[1]), w), [a, b]) <= 1e-4


def test_mlp_loss_gradient(rng):
    x, W, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    err = dc.finite_diff_check(lambda p: dc.tsum(dc.tanh_act(dc.linear(p[0], p[1], p[2]))), [x, W, b])
    assert err <= 1e-4


def test_finite_diff_exact_for_quadratic(rng):
    A = rng.normal(size=(4, 4))
    A = A @ A.T
    x = rng.normal(size=4)
    err = dc.finite_diff_check(lambda p: dc.tsum(dc.mul(p[0], dc.matmul(A, p[0]))), [x])
    assert err <= 1e-8


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        dc.finite_diff_check(lambda p: dc.tsum(p[0]), [np.ones(2)], eps=0.0)


def test_finite_diff_rejects_non_finite_objective():
    def f(p):
        return dc.Tensor(np.array(np.nan))
    with pytest.raises(dc.NonFiniteError):
        dc.finite_diff_check(f, [np.ones(2)])


def test_forward_backward_deterministic(rng):
    x, W, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    f = lambda x, W, b: dc.tsum(dc.square(dc.tanh_act(dc.linear(x, W, b))))
    g1, g2 = grad_of(f, x, W, b), grad_of(f, x, W, b)
    for a, c in zip(g1, g2):
        assert np.array_equal(a, c)


# -- ADAM --------------------------------------------------------------------

def test_adam_zero_gradient_is_identity(rng):
    params = [rng.normal(size=(3, 2)), rng.normal(size=2)]
    state = dc.AdamState.for_params(params, lr=1e-2)
    for _ in range(3):
        new, state = dc.adam_step(params, [np.zeros_like(p) for p in params], state)
        for p, q in zip(params, new):
            assert np.array_equal(p, q)
    assert state.step == 3


def test_adam_first_step_matches_hand_formula():
    # m1 = 0.1 g, v1 = 0.001 g^2; bias-corrected m = g, v = g^2
    lr, g = 1e-4, 0.5
    state = dc.AdamState.for_params([np.array([1.0])], lr=lr)
    (p,), state = dc.adam_step([np.array([1.0])], [np.array([g])], state)
    expected = 1.0 - lr * g / (math.sqrt(g * g) + 1e-8)
    assert p[0] == pytest.approx(expected, abs=1e-15)
    assert 1.0 - p[0] == pytest.approx(lr, rel=1e-7)
    assert state.m[0][0] == pytest.approx(0.05) and state.v[0][0] == pytest.approx(0.00025)


def test_adam_second_step_matches_hand_formula():
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    g1, g2 = 0.5, -0.2
    state = dc.AdamState.for_params([np.zeros(1)], lr=lr)
    p, state = dc.adam_step([np.zeros(1)], [np.array([g1])], state)
    p, state = dc.adam_step(p, [np.array([g2])], state)
    m = b1 * (1 - b1) * g1 + (1 - b1) * g2
    v = b2 * (1 - b2) * g1 ** 2 + (1 - b2) * g2 ** 2
    step1 = lr * g1 / (abs(g1) + eps)
    step2 = lr * (m / (1 - b1 ** 2)) / (math.sqrt(v / (1 - b2 ** 2)) + eps)
    assert p[0][0] == pytest.approx(-step1 - step2, abs=1e-15)


def test_adam_deterministic_and_pure(rng):
    params = [rng.normal(size=4)]
    grads = [rng.normal(size=4)]
    state = dc.AdamState.for_params(params)
    snapshot = params[0].copy()
    a, sa = dc.adam_step(params, grads, state)
    b, sb = dc.adam_step(params, grads, state)
    assert np.array_equal(a[0], b[0]) and np.array_equal(sa.v[0], sb.v[0])
    assert np.array_equal(params[0], snapshot) and state.step == 0


def test_adam_errors():
    state = dc.AdamState.for_params([np.zeros(2)])
    with pytest.raises(ValueError):
        dc.adam_step([np.zeros(2)], [np.zeros(3)], state)
    with pytest.raises(ValueError):
        dc.adam_step([np.zeros(2)], [], state)
    with pytest.raises(dc.NonFiniteError):
        dc.adam_step([np.zeros(2)], [np.array([np.inf, 0.0])], state)


@given(seed=st.integers(0, 2**32 - 1))
def test_adam_second_moments_non_negative(seed):
    rng = np.random.default_rng(seed)
    params = [rng.normal(size=5)]
    state = dc.AdamState.for_params(params)
    for _ in range(4):
        params, state = dc.adam_step(params, [rng.normal(size=5) * 10], state)
    assert np.all(state.v[0] >= 0)
