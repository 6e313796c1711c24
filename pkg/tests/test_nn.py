import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fervgg.errors import DegenerateBatchError, LabelError, NumericError, ShapeError, StateError
from fervgg.nn import (BatchNorm2d, Conv2d, Dropout, Linear, ReLU, maxpool_backward,
                       maxpool_forward, relu, relu_backward, softmax_cross_entropy)
from fervgg.tensor import SeededRng

from gradcheck import TOLERANCES, probe as _probe, random_case_errors
from oracles import brute_maxpool, max_rel_error, naive_conv2d, numerical_grad


# -- convolution ---------------------------------------------------------------

def test_conv_1x1_identity():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 5))
    conv = Conv2d(np.ones((1, 1, 1, 1)), np.zeros(1), padding=0)
    np.testing.assert_array_equal(conv.forward(x), x)
    up = np.random.default_rng(1).normal(size=x.shape)
    np.testing.assert_array_equal(conv.backward(up), up)


def test_conv_ones_kernel_on_one_hot():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1
    conv = Conv2d(np.ones((1, 1, 3, 3)), np.zeros(1), padding=1)
    np.testing.assert_array_equal(conv.forward(x), np.ones((1, 1, 3, 3)))


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
def test_conv_matches_loop_reference(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    ref = naive_conv2d(x, w, b, stride, pad)
    out = Conv2d(w, b, stride, pad).forward(x)
    assert np.max(np.abs(out - ref)) <= 1e-12 * np.max(np.abs(ref))


def test_conv_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(0)
    conv = Conv2d(rng.normal(size=(2, 1, 3, 3)), np.zeros(2))
    y = conv.forward(rng.normal(size=(1, 1, 4, 4)))
    dx = conv.backward(np.zeros_like(y))
    assert not dx.any() and not conv.grads["weight"].any() and not conv.grads["bias"].any()


def test_conv_finite_difference_single_channel():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 1, 4, 4))
    conv = Conv2d(rng.normal(size=(1, 1, 3, 3)), rng.normal(size=1))
    u, f = _probe(conv, x, rng)
    conv.forward(x)
    dx = conv.backward(u)
    assert max_rel_error(dx, numerical_grad(f, x)) <= 1e-6
    assert max_rel_error(conv.grads["weight"], numerical_grad(f, conv.params["weight"])) <= 1e-6
    np.testing.assert_allclose(conv.grads["bias"], u.sum(axis=(0, 2, 3)))


def test_conv_shape_errors():
    conv = Conv2d(np.zeros((2, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError):
        conv.forward(np.zeros((1, 2, 5, 5)))
    conv.forward(np.zeros((1, 3, 5, 5)))
    with pytest.raises(ShapeError):
        conv.backward(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        Conv2d(np.zeros((1, 1, 2, 2)), np.zeros(1))
    with pytest.raises(StateError):
        Conv2d(np.zeros((1, 1, 3, 3)), np.zeros(1)).backward(np.zeros((1, 1, 3, 3)))


# -- relu ------------------------------------------------------------------------

def test_relu_examples():
    np.testing.assert_array_equal(relu(np.array([-2.0, 0.0, 3.0])), [0, 0, 3])
    np.testing.assert_array_equal(relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 5.0])), [0, 5])
    assert relu_backward(np.array([0.0]), np.array([1.0]))[0] == 0


def test_relu_finite_difference_off_kink():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 1e-3] = 0.5
    layer = ReLU()
    u, f = _probe(layer, x, rng)
    layer.forward(x)
    assert max_rel_error(layer.backward(u), numerical_grad(f, x)) <= 1e-8


# -- batch norm ----------------------------------------------------------------------

def test_batchnorm_train_normalizes():
    x = np.random.default_rng(0).normal(3, 2, size=(8, 3, 4, 4))
    y = BatchNorm2d(3, dtype=np.float64).forward(x)
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) <= 1e-5)
    assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1) <= 1e-4)


def test_batchnorm_constant_channel():
    bn = BatchNorm2d(1, dtype=np.float64)
    bn.params["gamma"][:] = 2
    bn.params["beta"][:] = 3
    np.testing.assert_array_equal(bn.forward(np.full((2, 1, 3, 3), 7.0)), 3.0)


def test_batchnorm_running_stats_update():
    x = np.random.default_rng(1).normal(size=(4, 2, 3, 3))
    bn = BatchNorm2d(2, momentum=0.1, dtype=np.float64)
    bn.forward(x)
    m = 4 * 9
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batchnorm_eval_is_pure():
    rng = np.random.default_rng(2)
    bn = BatchNorm2d(2, dtype=np.float64)
    bn.forward(rng.normal(size=(4, 2, 3, 3)))
    bn.eval()
    a, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(5, 2, 3, 3))
    batch = np.concatenate([a, b])
    before = {k: v.copy() for k, v in bn.buffers.items()}
    np.testing.assert_array_equal(bn.forward(batch)[:3], bn.forward(a))
    for k in before:
        np.testing.assert_array_equal(before[k], bn.buffers[k])
    single = bn.forward(a[:1])
    assert single.shape == (1, 2, 3, 3)


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        BatchNorm2d(1).forward(np.zeros((1, 1, 1, 1), np.float32))


def test_batchnorm_backward_properties():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 2, 3, 3))
    bn = BatchNorm2d(2, dtype=np.float64)
    u, f = _probe(bn, x, rng)
    bn.forward(x)
    dx = bn.backward(u)
    np.testing.assert_allclose(bn.grads["beta"], u.sum(axis=(0, 2, 3)))
    assert np.all(np.abs(dx.sum(axis=(0, 2, 3))) <= 1e-8)
    assert max_rel_error(dx, numerical_grad(f, x)) <= 1e-5


# -- pooling --------------------------------------------------------------------------

def test_maxpool_small_cases():
    y, idx = maxpool_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert y.item() == 4 and idx.item() == 3
    np.testing.assert_array_equal(maxpool_backward(idx, np.ones((1, 1, 1, 1)), (1, 1, 2, 2)),
                                  [[[[0, 0], [0, 1]]]])
    x = np.ones((1, 1, 4, 4))
    y, idx = maxpool_forward(x)
    dx = maxpool_backward(idx, np.ones_like(y), x.shape)
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    np.testing.assert_array_equal(dx[0, 0], expected)


def test_maxpool_matches_brute_force():
    x = np.random.default_rng(4).normal(size=(2, 3, 6, 6))
    y, idx = maxpool_forward(x)
    ref_y, ref_idx = brute_maxpool(x)
    np.testing.assert_array_equal(y, ref_y)
    np.testing.assert_array_equal(idx, ref_idx)


def test_maxpool_odd_extent_floors():
    y, _ = maxpool_forward(np.zeros((1, 1, 5, 5)))
    assert y.shape == (1, 1, 2, 2)
    with pytest.raises(ShapeError):
        maxpool_forward(np.zeros((1, 1, 1, 4)))


# -- linear / dropout ---------------------------------------------------------------

def test_linear_identity_and_errors():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(Linear(np.eye(4), np.zeros(4)).forward(x), x)
    with pytest.raises(ShapeError):
        Linear(np.eye(4), np.zeros(4)).forward(np.zeros((3, 5)))


def test_dropout_identities():
    x = np.random.default_rng(0).normal(size=(4, 6))
    np.testing.assert_array_equal(Dropout(0.0).forward(x, SeededRng(0)), x)
    np.testing.assert_array_equal(Dropout(0.5).eval().forward(x), x)
    np.testing.assert_array_equal(Dropout(0.0).eval().forward(x), x)


def test_dropout_mask_values_and_mean():
    x = np.ones(100_000)
    d = Dropout(0.5)
    y = d.forward(x, SeededRng(3))
    assert set(np.unique(d.mask)) <= {0.0, 2.0}
    assert abs(y.mean() - x.mean()) <= 0.02 * x.mean()
    up = np.arange(100_000, dtype=float)
    np.testing.assert_array_equal(d.backward(up), up * d.mask)


def test_dropout_requires_rng_in_train_mode():
    with pytest.raises(ValueError):
        Dropout(0.5).forward(np.ones(3))


# -- softmax cross-entropy -------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    res = softmax_cross_entropy(np.zeros((3, 7)), np.array([0, 3, 6]))
    assert abs(res.loss - math.log(7)) <= 1e-12
    assert abs(res.loss - 1.945910) <= 1e-6


def test_cross_entropy_saturated():
    logits = np.zeros((1, 7))
    logits[0, 2] = 1e6
    assert softmax_cross_entropy(logits, np.array([2])).loss <= 1e-12


def test_cross_entropy_gradient_rows_sum_to_zero():
    logits = np.random.default_rng(0).normal(size=(5, 7)) * 3
    res = softmax_cross_entropy(logits, np.array([0, 1, 2, 3, 4]))
    assert np.all(np.abs(res.logit_grad.sum(axis=1)) <= 1e-12)


def test_cross_entropy_errors():
    with pytest.raises(LabelError):
        softmax_cross_entropy(np.zeros((1, 7)), np.array([7]))
    with pytest.raises(LabelError):
        softmax_cross_entropy(np.zeros((1, 7)), np.array([-1]))
    with pytest.raises(NumericError):
        softmax_cross_entropy(np.full((1, 7), np.inf), np.array([0]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3))
def test_cross_entropy_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 7)) * 5
    labels = rng.integers(0, 7, size=4)
    a = softmax_cross_entropy(logits, labels).loss
    b = softmax_cross_entropy(logits + shift, labels).loss
    assert abs(a - b) <= 1e-6


# -- randomized gradient checks over many small shapes ----------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_randomized_gradient_checks(seed):
    errors = random_case_errors(seed)
    assert set(errors) == set(TOLERANCES)
    for kind, err in errors.items():
        assert err <= TOLERANCES[kind], (kind, err)
