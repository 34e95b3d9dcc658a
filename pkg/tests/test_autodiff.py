"""Reverse-mode differentiation: closed-form gradients and numeric checks."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tadlab import autodiff as ad
from tadlab.autodiff import Tensor
from tadlab.errors import UsageError
from tadlab.seeding import rng_from


def _t(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


# -- construction and bookkeeping ------------------------------------------------

def test_sum_of_params_gives_unit_gradients():
    x = _t(rng_from(0).standard_normal((3, 4)))
    ad.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_requires_scalar():
    x = _t([1.0, 2.0])
    with pytest.raises(UsageError):
        (x * 2.0).backward()


def test_backward_twice_rejected():
    x = _t([1.0, 2.0])
    loss = ad.tsum(x)
    loss.backward()
    with pytest.raises(UsageError):
        loss.backward()


def test_grads_accumulate_across_backwards():
    x = _t([1.0, 2.0])
    ad.tsum(x * 2.0).backward()
    ad.tsum(x * 3.0).backward()
    assert np.array_equal(x.grad, [5.0, 5.0])
    x.zero_grad()
    assert x.grad is None


def test_no_grad_blocks_graph():
    x = _t([1.0, 2.0])
    with ad.no_grad():
        y = x * 3.0 + 1.0
    assert not y.requires_grad


def test_detach_cuts_history():
    x = _t([2.0])
    y = (x * 3.0).detach()
    assert not y.requires_grad
    assert np.array_equal(y.data, [6.0])


def test_scalar_arithmetic_keeps_dtype():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 2.0).data.dtype == np.float32
    assert (x + 1).data.dtype == np.float32
    assert (1.0 / x).data.dtype == np.float32


# -- closed-form gradients ---------------------------------------------------------

def test_quadratic_matches_closed_form():
    # loss = 0.5 * ||W x||^2  =>  dL/dW = (W x) x^T
    rng = rng_from(1)
    w = _t(rng.standard_normal((4, 3)))
    x = Tensor(rng.standard_normal((3, 1)))
    y = ad.matmul(w, x)
    (ad.tsum(y * y) * 0.5).backward()
    expected = w.data @ x.data @ x.data.T
    assert np.allclose(w.grad, expected, atol=1e-12)


def test_product_rule():
    a, b = _t([2.0, 3.0]), _t([5.0, 7.0])
    ad.tsum(a * b).backward()
    assert np.array_equal(a.grad, b.data)
    assert np.array_equal(b.grad, a.data)


def test_division_gradients():
    a, b = _t([6.0]), _t([3.0])
    (a / b).backward()
    assert np.allclose(a.grad, [1 / 3])
    assert np.allclose(b.grad, [-6 / 9])


def test_broadcast_addition_reduces_grad():
    a = _t(np.zeros((3, 4)))
    b = _t(np.zeros(4))
    ad.tsum(a + b).backward()
    assert np.array_equal(a.grad, np.ones((3, 4)))
    assert np.array_equal(b.grad, np.full(4, 3.0))


def test_relu_gate():
    x = _t([-2.0, -0.5, 0.5, 2.0])
    ad.tsum(ad.relu(x) * 3.0).backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 3.0, 3.0])


def test_sigmoid_gradient():
    x = _t([0.0])
    ad.sigmoid(x).backward()
    assert np.allclose(x.grad, [0.25])


def test_exp_log_chain():
    x = _t([2.0])
    ad.log(ad.exp(x)).backward()
    assert np.allclose(x.grad, [1.0], atol=1e-12)


def test_sqrt_gradient():
    x = _t([4.0])
    ad.sqrt(x).backward()
    assert np.allclose(x.grad, [0.25])


def test_abs_gradient_signs():
    x = _t([-3.0, 2.0])
    ad.tsum(ad.absolute(x)).backward()
    assert np.array_equal(x.grad, [-1.0, 1.0])


def test_maximum_routes_to_larger():
    a, b = _t([1.0, 5.0]), _t([3.0, 2.0])
    ad.tsum(ad.maximum(a, b)).backward()
    assert np.array_equal(a.grad, [0.0, 1.0])
    assert np.array_equal(b.grad, [1.0, 0.0])


def test_min_max_ties_route_to_second_operand():
    # a clamp like maximum(x, 0.0) must zero x's gradient right at the
    # boundary, so ties hand the whole gradient to the second operand
    a, b = _t([2.0]), _t([2.0])
    ad.tsum(ad.minimum(a, b)).backward()
    assert np.array_equal(a.grad, [0.0])
    assert np.array_equal(b.grad, [1.0])
    x = _t([0.0])
    ad.tsum(ad.maximum(x, 0.0)).backward()
    assert np.array_equal(x.grad, [0.0])


def test_softmax_rows_and_gradient():
    x = _t(rng_from(2).standard_normal((3, 5)))
    s = ad.softmax(x, axis=-1)
    assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)
    # loss = first column sum; ds_0/dx = s_0 * (delta - s)
    ad.tsum(ad.select(s, (slice(None), 0))).backward()
    s0 = s.data[:, :1]
    expected = s0 * (np.eye(5)[0] - s.data)
    assert np.allclose(x.grad, expected, atol=1e-12)


def test_select_scatters_gradient():
    x = _t(np.arange(12, dtype=np.float64).reshape(3, 4))
    picked = ad.select(x, (np.array([0, 0, 2]), slice(None)))
    ad.tsum(picked).backward()
    expected = np.zeros((3, 4))
    expected[0] = 2.0  # row picked twice accumulates
    expected[2] = 1.0
    assert np.array_equal(x.grad, expected)


def test_concat_splits_gradient():
    a, b = _t(np.ones((2, 3))), _t(np.ones((1, 3)))
    out = ad.concat([a, b], axis=0)
    ad.tsum(out * Tensor(np.arange(9, dtype=np.float64).reshape(3, 3))).backward()
    assert np.array_equal(a.grad, np.arange(6, dtype=np.float64).reshape(2, 3))
    assert np.array_equal(b.grad, np.array([[6.0, 7.0, 8.0]]))


def test_reshape_swapaxes_round_trip():
    x = _t(rng_from(3).standard_normal((2, 6)))
    y = ad.swapaxes(ad.reshape(x, (2, 3, 2)), 0, 2)
    ad.tsum(y * y).backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_mean_gradient():
    x = _t(np.ones((4, 5)))
    ad.tmean(x).backward()
    assert np.allclose(x.grad, np.full((4, 5), 1 / 20))


def test_diamond_graph_accumulates():
    # y used twice: d(y*y + y)/dy = 2y + 1
    x = _t([3.0])
    y = x * 2.0
    (y * y + y).backward()
    assert np.allclose(x.grad, [2 * (2 * 6.0 + 1)])


def test_layer_norm_output_and_grads():
    x = _t(rng_from(4).standard_normal((3, 8)))
    gain, bias = _t(np.ones(8)), _t(np.zeros(8))
    out = ad.layer_norm(x, gain, bias)
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-9)
    assert np.allclose(out.data.std(axis=-1), 1.0, atol=1e-4)
    ad.tsum(out).backward()
    # normalized rows are mean-free, so a constant upstream grad nearly cancels
    assert np.allclose(x.grad, 0.0, atol=1e-9)
    assert np.allclose(bias.grad, np.full(8, 3.0))


# -- finite-difference suite --------------------------------------------------------

def test_grad_check_affine():
    rng = rng_from(5)
    w = _t(rng.standard_normal((6, 4)))
    b = _t(rng.standard_normal(4))
    x = Tensor(rng.standard_normal((3, 6)))

    def loss():
        return ad.tsum(ad.matmul(x, w) + b)

    assert ad.grad_check(loss, [w, b], rng=rng_from(50)) < 1e-7


def test_grad_check_softmax_cross_entropy():
    rng = rng_from(6)
    w = _t(rng.standard_normal((5, 3)))
    x = Tensor(rng.standard_normal((4, 5)))
    labels = np.array([0, 2, 1, 1])

    def loss():
        probs = ad.softmax(ad.matmul(x, w), axis=-1)
        picked = ad.select(probs, (np.arange(4), labels))
        return ad.tsum(ad.log(picked)) * -1.0

    assert ad.grad_check(loss, [w], rng=rng_from(51)) < 1e-6


def test_grad_check_attention_block():
    from tadlab.model import attention
    rng = rng_from(7)
    q = _t(rng.standard_normal((3, 4)))
    k = _t(rng.standard_normal((5, 4)))
    v = _t(rng.standard_normal((5, 4)))
    probe = Tensor(rng.standard_normal((3, 4)))

    def loss():
        out, _ = attention(q, k, v)
        return ad.tsum(out * probe)

    assert ad.grad_check(loss, [q, k, v], rng=rng_from(52)) < 1e-5


def test_grad_check_layer_norm():
    rng = rng_from(8)
    x = _t(rng.standard_normal((4, 6)))
    gain = _t(rng.standard_normal(6))
    bias = _t(rng.standard_normal(6))
    probe = Tensor(rng.standard_normal((4, 6)))

    def loss():
        return ad.tsum(ad.layer_norm(x, gain, bias) * probe)

    assert ad.grad_check(loss, [x, gain, bias], rng=rng_from(53)) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_grad_check_random_composite(seed):
    rng = rng_from(9, seed)
    a = _t(rng.standard_normal((3, 3)))
    b = _t(rng.standard_normal((3, 3)))

    def loss():
        y = ad.matmul(a, b) + ad.sigmoid(a) * 0.5
        return ad.tsum(y * y) + ad.tsum(ad.absolute(b)) * 0.1

    assert ad.grad_check(loss, [a, b], num_samples=18, rng=rng_from(54, seed)) < 1e-6
