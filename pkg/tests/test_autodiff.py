"""Every differentiable op is verified against central finite differences
(the independent oracle), plus the closed-form trivia the layer semantics
force."""

import numpy as np
import pytest

from hipporate import autodiff as ad
from hipporate.autodiff import Tensor, grad_check
from hipporate.errors import DegenerateBatch, ShapeMismatch

TOL = 1e-3


def sq_sum(t):
    return ad.tensor_sum(ad.square(t))


def rand(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


# -- grad_check itself --------------------------------------------------------

def test_grad_check_quadratic_exact():
    x = rand(0, 10)
    assert grad_check(sq_sum, x) <= 1e-6


def test_constant_function_zero_gradient():
    # f multiplies the input by zero: analytic and numeric gradients vanish
    def const(t):
        return ad.tensor_sum(ad.scale_channels(t, Tensor(np.zeros((1, 2)))))

    x = rand(1, 1, 2, 2, 2, 2)
    assert grad_check(const, x) <= 1e-9
    leaf = Tensor(x, requires_grad=True)
    const(leaf).backward()
    assert np.all(leaf.grad == 0.0)


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeMismatch):
        ad.square(t).backward()


# -- conv3d --------------------------------------------------------------------

def test_conv_identity_kernel():
    x = rand(2, 1, 2, 4, 4, 4)
    k = np.zeros((2, 2, 3, 3, 3))
    k[0, 0, 1, 1, 1] = 1.0
    k[1, 1, 1, 1, 1] = 1.0
    out = ad.conv3d(Tensor(x), Tensor(k), Tensor(np.zeros(2)))
    assert np.allclose(out.data, x)


def test_conv_ones_kernel_counts():
    x = np.full((1, 2, 5, 5, 5), 3.0)
    k = np.ones((1, 2, 3, 3, 3))
    out = ad.conv3d(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
    assert out.data[0, 0, 2, 2, 2] == 27 * 3.0 * 2


def test_conv_bias_added():
    x = np.zeros((1, 1, 3, 3, 3))
    k = np.zeros((2, 1, 3, 3, 3))
    out = ad.conv3d(Tensor(x), Tensor(k), Tensor(np.array([1.5, -2.0])))
    assert np.all(out.data[0, 0] == 1.5)
    assert np.all(out.data[0, 1] == -2.0)


def test_conv_gradients():
    x, k, b = rand(3, 1, 2, 4, 4, 4), rand(4, 3, 2, 3, 3, 3), rand(5, 3)
    assert grad_check(lambda t: sq_sum(ad.conv3d(t, Tensor(k), Tensor(b))), x) <= TOL
    assert grad_check(lambda t: sq_sum(ad.conv3d(Tensor(x), t, Tensor(b))), k) <= TOL
    assert grad_check(lambda t: sq_sum(ad.conv3d(Tensor(x), Tensor(k), t)), b) <= TOL


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        ad.conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))),
                  Tensor(np.zeros((3, 1, 3, 3, 3))), Tensor(np.zeros(3)))
    with pytest.raises(ShapeMismatch):
        ad.conv3d(Tensor(np.zeros((1, 1, 4, 4, 4))),
                  Tensor(np.zeros((3, 1, 3, 3, 3))), Tensor(np.zeros(2)))


def test_conv1x1_gradients():
    x, k, b = rand(6, 2, 3, 2, 2, 2), rand(7, 4, 3), rand(8, 4)
    assert grad_check(lambda t: sq_sum(ad.conv1x1(t, Tensor(k), Tensor(b))), x) <= TOL
    assert grad_check(lambda t: sq_sum(ad.conv1x1(Tensor(x), t, Tensor(b))), k) <= TOL


# -- maxpool --------------------------------------------------------------------

def test_pool_shapes():
    out = ad.maxpool3d(Tensor(np.zeros((1, 1, 72, 53, 33))))
    assert out.data.shape == (1, 1, 36, 26, 16)


def test_five_pools_telescope():
    shape = (72, 53, 33)
    t = Tensor(np.zeros((1, 1) + shape))
    for _ in range(5):
        t = ad.maxpool3d(t)
    assert t.data.shape == (1, 1, 2, 1, 1)


def test_pool_monotone_ramp():
    ramp = np.arange(4 * 4 * 4, dtype=np.float64).reshape(1, 1, 4, 4, 4)
    out = ad.maxpool3d(Tensor(ramp))
    # each output is the max corner (largest index) of its window
    assert out.data[0, 0, 0, 0, 0] == ramp[0, 0, 1, 1, 1]
    assert out.data[0, 0, 1, 1, 1] == ramp[0, 0, 3, 3, 3]


def test_pool_gradient():
    x = rand(9, 1, 2, 4, 4, 4)
    assert grad_check(lambda t: sq_sum(ad.maxpool3d(t)), x) <= TOL


def test_pool_tie_first_in_scan_order():
    x = np.zeros((1, 1, 2, 2, 2))  # all equal: one window, 8-way tie
    t = Tensor(x, requires_grad=True)
    sq_sum(ad.add(ad.maxpool3d(t), Tensor(np.ones((1, 1, 1, 1, 1))))).backward()
    g = t.grad.reshape(-1)
    assert g[0] != 0.0
    assert np.all(g[1:] == 0.0)


def test_pool_relu_commute():
    x = rand(10, 2, 3, 6, 6, 6)
    a = ad.relu(ad.maxpool3d(Tensor(x)))
    b = ad.maxpool3d(ad.relu(Tensor(x)))
    assert np.allclose(a.data, b.data, atol=1e-5)


# -- batchnorm -------------------------------------------------------------------

def test_batchnorm_train_moments():
    x = rand(11, 8, 3, 4, 4, 4).astype(np.float32)
    rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
    out = ad.batchnorm3d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                         rm, rv, training=True)
    mean = out.data.mean(axis=(0, 2, 3, 4))
    var = out.data.var(axis=(0, 2, 3, 4))
    assert np.abs(mean).max() < 1e-4
    assert np.abs(var - 1).max() < 1e-4


def test_batchnorm_eval_formula():
    x = rand(12, 4, 2, 2, 2, 2)
    gamma, beta = rand(13, 2), rand(14, 2)
    rm = np.array([0.5, -1.0])
    rv = np.array([2.0, 0.3])
    out = ad.batchnorm3d(Tensor(x), Tensor(gamma), Tensor(beta),
                         rm.copy(), rv.copy(), training=False)
    shape = (1, 2, 1, 1, 1)
    expected = (x - rm.reshape(shape)) / np.sqrt(rv.reshape(shape) + 1e-5) \
        * gamma.reshape(shape) + beta.reshape(shape)
    assert np.allclose(out.data, expected, atol=1e-6)


def test_batchnorm_running_stats_update_and_freeze():
    x = rand(15, 6, 2, 2, 2, 2)
    rm, rv = np.zeros(2), np.ones(2)
    ad.batchnorm3d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                   rm, rv, training=True)
    batch_mean = x.mean(axis=(0, 2, 3, 4))
    assert np.allclose(rm, 0.1 * batch_mean, atol=1e-6)  # momentum 0.1
    frozen_rm, frozen_rv = rm.copy(), rv.copy()
    ad.batchnorm3d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                   rm, rv, training=False)
    assert np.array_equal(rm, frozen_rm)
    assert np.array_equal(rv, frozen_rv)


def test_batchnorm_rejects_singleton_batch():
    x = Tensor(np.zeros((1, 2, 2, 2, 2)))
    with pytest.raises(DegenerateBatch):
        ad.batchnorm3d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       np.zeros(2), np.ones(2), training=True)


def test_batchnorm_gradients_train_and_eval():
    x = rand(16, 4, 3, 2, 2, 2)
    gamma, beta = rand(17, 3), rand(18, 3)

    def run(mode):
        def wrt_x(t):
            return sq_sum(ad.batchnorm3d(t, Tensor(gamma), Tensor(beta),
                                         np.zeros(3), np.ones(3), training=mode))

        def wrt_gamma(t):
            return sq_sum(ad.batchnorm3d(Tensor(x), t, Tensor(beta),
                                         np.zeros(3), np.ones(3), training=mode))

        def wrt_beta(t):
            return sq_sum(ad.batchnorm3d(Tensor(x), Tensor(gamma), t,
                                         np.zeros(3), np.ones(3), training=mode))

        assert grad_check(wrt_x, x) <= TOL
        assert grad_check(wrt_gamma, gamma) <= TOL
        assert grad_check(wrt_beta, beta) <= TOL

    run(True)
    run(False)


# -- pointwise / dense ops ----------------------------------------------------------

def test_relu_values_and_grad():
    out = ad.relu(Tensor(np.array([-1.0, 2.0, 0.0])))
    assert list(out.data) == [0.0, 2.0, 0.0]
    assert grad_check(lambda t: sq_sum(ad.relu(t)), rand(19, 20) + 0.1) <= TOL


def test_linear_gradients():
    x, w, b = rand(20, 4, 6), rand(21, 3, 6), rand(22, 3)
    assert grad_check(lambda t: sq_sum(ad.linear(t, Tensor(w), Tensor(b))), x) <= TOL
    assert grad_check(lambda t: sq_sum(ad.linear(Tensor(x), t, Tensor(b))), w) <= TOL
    assert grad_check(lambda t: sq_sum(ad.linear(Tensor(x), Tensor(w), t)), b) <= TOL


def test_sigmoid_gradient():
    assert grad_check(lambda t: sq_sum(ad.sigmoid(t)), rand(23, 12)) <= TOL


def test_global_avg_pool_semantics_and_grad():
    x = rand(24, 2, 3, 2, 2, 2)
    out = ad.global_avg_pool(Tensor(x))
    assert np.allclose(out.data, x.mean(axis=(2, 3, 4)))
    assert grad_check(lambda t: sq_sum(ad.global_avg_pool(t)), x) <= TOL


def test_add_and_scale_channels_grads():
    x, y = rand(25, 2, 3, 2, 2, 2), rand(26, 2, 3, 2, 2, 2)
    s = rand(27, 2, 3)
    assert grad_check(lambda t: sq_sum(ad.add(t, Tensor(y))), x) <= TOL
    assert grad_check(lambda t: sq_sum(ad.scale_channels(t, Tensor(s))), x) <= TOL
    assert grad_check(lambda t: sq_sum(ad.scale_channels(Tensor(x), t)), s) <= TOL


def test_dropout_eval_is_identity():
    x = rand(28, 5, 4)
    out = ad.dropout(Tensor(x), p=0.5, training=False)
    assert np.array_equal(out.data, x)


def test_dropout_train_scaling_and_determinism():
    x = np.ones((200, 10))
    out1 = ad.dropout(Tensor(x), p=0.25, training=True,
                      rng=np.random.default_rng(5))
    out2 = ad.dropout(Tensor(x), p=0.25, training=True,
                      rng=np.random.default_rng(5))
    assert np.array_equal(out1.data, out2.data)
    kept = out1.data[out1.data > 0]
    assert np.allclose(kept, 1.0 / 0.75)
    assert abs(out1.data.mean() - 1.0) < 0.05  # inverted scaling preserves mean


def test_dropout_grad_masks_match():
    x = rand(29, 6, 6)
    rng_seed = 77

    def f(t):
        return sq_sum(ad.dropout(t, p=0.3, training=True,
                                 rng=np.random.default_rng(rng_seed)))

    assert grad_check(f, x) <= TOL


def test_flatten_round_trip_grad():
    x = rand(30, 2, 3, 2, 2, 2)
    out = ad.flatten(Tensor(x))
    assert out.data.shape == (2, 24)
    assert grad_check(lambda t: sq_sum(ad.flatten(t)), x) <= TOL


# -- the property sweep the module contract pins -------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_all_ops_grad_check_over_seeds(seed):
    rng = np.random.default_rng([31, seed])
    b = int(rng.integers(2, 4))
    c = int(rng.integers(1, 4))
    f = int(rng.integers(1, 4))
    spatial = tuple(rng.integers(2, 5, size=3) * 2)
    x = rng.standard_normal((b, c) + spatial)
    k = rng.standard_normal((f, c, 3, 3, 3))
    bias = rng.standard_normal(f)
    gamma = rng.standard_normal(c)
    beta = rng.standard_normal(c)
    s = rng.standard_normal((b, c))

    checks = [
        (lambda t: sq_sum(ad.conv3d(t, Tensor(k), Tensor(bias))), x),
        (lambda t: sq_sum(ad.conv3d(Tensor(x), t, Tensor(bias))), k),
        (lambda t: sq_sum(ad.maxpool3d(t)), x),
        (lambda t: sq_sum(ad.batchnorm3d(t, Tensor(gamma), Tensor(beta),
                                         np.zeros(c), np.ones(c), True)), x),
        (lambda t: sq_sum(ad.relu(t)), x),
        (lambda t: sq_sum(ad.sigmoid(t)), x),
        (lambda t: sq_sum(ad.scale_channels(t, Tensor(s))), x),
        (lambda t: sq_sum(ad.global_avg_pool(t)), x),
        (lambda t: sq_sum(ad.flatten(t)), x),
    ]
    for fn, arg in checks:
        assert grad_check(fn, arg, seed=seed) <= TOL


def test_forward_deterministic():
    x = rand(32, 2, 1, 8, 8, 8).astype(np.float32)
    k = rand(33, 4, 1, 3, 3, 3).astype(np.float32)
    b = rand(34, 4).astype(np.float32)
    a1 = ad.conv3d(Tensor(x), Tensor(k), Tensor(b)).data
    a2 = ad.conv3d(Tensor(x), Tensor(k), Tensor(b)).data
    assert np.array_equal(a1, a2)
