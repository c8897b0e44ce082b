import io
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from voxrecon import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    out = T.matmul(T.Tensor([[1, 0], [0, 1]]), T.Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_scalar_case():
    assert T.matmul(T.Tensor([[2.0]]), T.Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.matmul(a, b).data, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_backward_rules(rng):
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    g = rng.normal(size=(3, 2))
    T.matmul(a, b).backward(g)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


# ---------------------------------------------------------------- softmax

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax_lastdim(T.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_singleton():
    assert T.softmax_lastdim(T.Tensor([[4.2]])).data.tolist() == [[1.0]]


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(5, 7))
    a = T.softmax_lastdim(T.Tensor(x)).data
    b = T.softmax_lastdim(T.Tensor(x + 3.7)).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_softmax_is_distribution(x):
    y = T.softmax_lastdim(T.Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_softmax_mask_excludes_entries():
    y = T.softmax_lastdim(T.Tensor([1.0, 2.0, 3.0]), mask=[False, True, False]).data
    assert y[1] == 0
    np.testing.assert_allclose(y[[0, 2]], np.exp([1, 3]) / np.exp([1, 3]).sum())


# ---------------------------------------------------------------- bce

def test_bce_at_zero_logit():
    assert T.bce_with_logits(T.Tensor([0.0]), [1.0]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_saturated():
    assert T.bce_with_logits(T.Tensor([20.0]), [1.0]).item() == pytest.approx(2.0611536e-9, rel=1e-7)


def test_bce_matches_extended_precision(rng):
    z = rng.normal(scale=4, size=64)
    y = (rng.random(64) < 0.5).astype(float)
    mpmath.mp.dps = 40
    ref = 0
    for zi, yi in zip(z, y):
        p = 1 / (1 + mpmath.exp(-mpmath.mpf(zi)))
        ref += -(yi * mpmath.log(p) + (1 - yi) * mpmath.log(1 - p))
    ref = float(ref / len(z))
    assert abs(T.bce_with_logits(T.Tensor(z), y).item() - ref) < 1e-10


def test_bce_empty_raises():
    with pytest.raises(ZeroDivisionError):
        T.bce_with_logits(T.Tensor(np.zeros(0)), np.zeros(0))


def test_bce_rejects_soft_targets():
    with pytest.raises(ValueError):
        T.bce_with_logits(T.Tensor([0.0]), [0.5])


# ---------------------------------------------------------------- elementwise

def test_relu():
    assert T.elementwise("relu", T.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]


def test_tanh_zero():
    assert T.elementwise("tanh", T.Tensor([0.0])).data.tolist() == [0.0]


def test_exp_minus_three():
    assert T.elementwise("exp", T.Tensor([-3.0])).item() == pytest.approx(0.049787, abs=1e-6)


def test_binary_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.elementwise("add", T.Tensor([1.0, 2.0]), T.Tensor([1.0]))


def test_unknown_kind():
    with pytest.raises(ValueError):
        T.elementwise("gelu", T.Tensor([1.0]))


def test_non_finite_forward_raises():
    with pytest.raises(T.NonFiniteError):
        T.exp(T.Tensor([1000.0]))


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_slice():
    y = T.layer_norm(T.Tensor([[2.0, 2.0, 2.0]]), np.ones(3), np.zeros(3)).data
    np.testing.assert_array_equal(y, 0.0)


def test_layer_norm_two_points():
    y = T.layer_norm(T.Tensor([1.0, 3.0]), np.ones(2), np.zeros(2)).data
    expect = np.array([-1.0, 1.0]) / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(y, expect, rtol=0, atol=1e-15)


def test_layer_norm_statistics(rng):
    x = rng.normal(loc=3, scale=5, size=(20, 16))
    y = T.layer_norm(T.Tensor(x), np.ones(16), np.zeros(16)).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-9
    assert np.abs(y.var(axis=-1) - 1).max() < 1e-6


# ---------------------------------------------------------------- adam

def test_adam_zero_grad_is_identity(rng):
    p = T.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    before = p.data.copy()
    opt = T.Adam({"p": p}, lr=0.1)
    for _ in range(3):
        p.grad = np.zeros_like(p.data)
        opt.step()
    np.testing.assert_array_equal(p.data, before)
    assert opt.step_count == 3


@pytest.mark.parametrize("g", [-3.0, 1e-4, 7.5])
def test_adam_first_step_magnitude(g):
    p = T.Tensor([0.5], requires_grad=True)
    opt = T.Adam({"p": p}, lr=0.01)
    p.grad = np.array([g])
    opt.step()
    assert abs(p.data[0] - 0.5) == pytest.approx(0.01, rel=1e-3)


def test_adam_two_step_recursion():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta, m, v = 0.0, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = T.Tensor([0.0], requires_grad=True)
    opt = T.Adam({"p": p}, lr=lr)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    assert abs(p.data[0] - theta) < 1e-12

    params, state = {"p": np.array([0.0])}, dict(lr=lr, beta1=b1, beta2=b2, eps=eps, step=0, m={}, v={})
    for _ in range(2):
        params, state = T.adam_step(params, {"p": np.array([1.0])}, state)
    assert abs(params["p"][0] - theta) < 1e-12
    assert state["step"] == 2


# ---------------------------------------------------------------- autodiff

def test_grad_check_square_sum(rng):
    assert T.grad_check(lambda x: T.sum(T.mul(x, x)), rng.normal(size=(4, 3))) < 1e-7


def test_grad_check_bce(rng):
    y = (rng.random(10) < 0.5).astype(float)
    assert T.grad_check(lambda z: T.bce_with_logits(z, y), rng.normal(size=10)) < 1e-6


def test_grad_check_rejects_vector_output(rng):
    with pytest.raises(T.ShapeError):
        T.grad_check(lambda x: T.relu(x), rng.normal(size=3))


def test_shared_subexpression_accumulates(rng):
    x0 = rng.normal(size=(3, 2))
    x = T.Tensor(x0, requires_grad=True)
    h = T.tanh(x)
    T.sum(T.mul(h, h)).backward()
    # duplicated-input oracle: two separate leaves carrying the same value
    a = T.Tensor(x0, requires_grad=True)
    b = T.Tensor(x0, requires_grad=True)
    T.sum(T.mul(T.tanh(a), T.tanh(b))).backward()
    np.testing.assert_allclose(x.grad, a.grad + b.grad, rtol=0, atol=1e-15)


def test_determinism():
    def run():
        r = np.random.default_rng(7)
        w = T.Tensor(r.normal(size=(5, 4)), requires_grad=True)
        x = T.Tensor(r.normal(size=(6, 5)))
        loss = T.sum(T.tanh(T.matmul(x, w)))
        loss.backward()
        return loss.data.tobytes() + w.grad.tobytes()

    assert run() == run()


def test_param_serialization_round_trip(rng):
    params = {"b": rng.normal(size=(2, 3)), "a.w": rng.normal(size=(4,)), "s": np.array(1.5)}
    raw = T.params_to_bytes(params)
    assert raw.startswith(b"a.w 4\n")
    back = T.read_params(io.BytesIO(raw), 3)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
    assert T.params_to_bytes(back) == raw


def test_param_serialization_truncated(rng):
    raw = T.params_to_bytes({"a": rng.normal(size=4)})
    with pytest.raises(ValueError):
        T.read_params(io.BytesIO(raw[:-3]), 1)


OP_NAMES = sorted(__import__("oracles").op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OP_NAMES)
def test_every_op_passes_grad_check(name):
    from oracles import op_cases

    for trial in range(10):
        f, x0 = op_cases(np.random.default_rng([trial, 99]))[name]
        assert T.grad_check(f, x0) < 1e-4, (name, trial)
