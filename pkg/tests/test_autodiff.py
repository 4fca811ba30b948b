"""Tape differentiation: adjoint rules, accumulation, and the finite-difference verifier."""

import numpy as np
import numpy.testing as npt
import pytest

from llanet import tensor
from llanet.autodiff import GradGraph, Param, grad_check, relative_error
from llanet.tensor import ConvSpec, FORWARD_KERNELS
from llanet.verify import KERNEL_CHECKS


def ones_probe(g, node):
    return g.weighted_sum(node, np.ones_like(node.value))


def test_product_rule_on_hadamard():
    rng = np.random.default_rng(0)
    a = Param("a", rng.standard_normal((1, 2, 3, 3)))
    b = Param("b", rng.standard_normal((1, 2, 3, 3)))
    g = GradGraph()
    loss = ones_probe(g, g.hadamard(g.leaf(a), g.leaf(b)))
    grads = g.backward(loss)
    npt.assert_allclose(grads["a"], b.value, atol=1e-15)
    npt.assert_allclose(grads["b"], a.value, atol=1e-15)


def test_concat_adjoint_is_slice():
    rng = np.random.default_rng(1)
    a = Param("a", rng.standard_normal((1, 2, 2, 2)))
    b = Param("b", rng.standard_normal((1, 3, 2, 2)))
    g = GradGraph()
    loss = ones_probe(g, g.concat_channels(g.leaf(a), g.leaf(b)))
    grads = g.backward(loss)
    npt.assert_array_equal(grads["a"], np.ones_like(a.value))
    npt.assert_array_equal(grads["b"], np.ones_like(b.value))


def test_fanout_accumulates_like_doubling():
    rng = np.random.default_rng(2)
    x_val = rng.standard_normal((1, 2, 2, 2))

    x1 = Param("x", x_val.copy())
    g1 = GradGraph()
    n1 = g1.leaf(x1)
    loss1 = ones_probe(g1, g1.add(n1, n1))  # y = x + x
    grad_sum = g1.backward(loss1)["x"]

    x2 = Param("x", x_val.copy())
    g2 = GradGraph()
    two = g2.constant(np.full_like(x_val, 2.0))
    loss2 = ones_probe(g2, g2.hadamard(g2.leaf(x2), two))  # y = 2 * x
    grad_two = g2.backward(loss2)["x"]

    npt.assert_allclose(grad_sum, grad_two, atol=1e-15)
    npt.assert_allclose(grad_sum, 2.0, atol=1e-15)


def test_gradient_linearity_in_loss_scale():
    rng = np.random.default_rng(3)
    x = Param("x", rng.standard_normal((2, 3)))
    w = Param("w", rng.standard_normal((4, 3)))
    b = Param("b", rng.standard_normal(4))
    alpha = 3.7

    def run(scale):
        g = GradGraph()
        y = g.linear(g.leaf(x), g.leaf(w), g.leaf(b))
        probe = np.full(y.value.shape, scale)
        return g.backward(g.weighted_sum(y, probe))

    g1, ga = run(1.0), run(alpha)
    for name in ("x", "w", "b"):
        npt.assert_allclose(ga[name], alpha * g1[name], rtol=1e-13)


def test_backward_requires_scalar_root():
    x = Param("x", np.ones((1, 1, 2, 2)))
    g = GradGraph()
    node = g.relu(g.leaf(x))
    with pytest.raises(ValueError):
        g.backward(node)


def test_unreachable_leaf_gets_zero_gradient():
    a = Param("a", np.ones((2, 2)))
    lonely = Param("lonely", np.ones(3))
    g = GradGraph()
    g.leaf(lonely)  # registered but never used by the loss
    loss = g.weighted_sum(g.leaf(a), np.ones((2, 2)))
    grads = g.backward(loss)
    npt.assert_array_equal(grads["lonely"], np.zeros(3))
    npt.assert_array_equal(grads["a"], np.ones((2, 2)))


def test_frozen_leaves_are_not_reported():
    frozen = Param("frozen", np.ones(2), trainable=False)
    live = Param("live", np.ones(2))
    g = GradGraph()
    loss = g.weighted_sum(g.hadamard(g.leaf(frozen), g.leaf(live)), np.ones(2))
    grads = g.backward(loss)
    assert "frozen" not in grads and "live" in grads


def test_same_name_different_params_rejected():
    g = GradGraph()
    g.leaf(Param("x", np.ones(2)))
    with pytest.raises(ValueError):
        g.leaf(Param("x", np.ones(2)))


def test_every_forward_kernel_has_an_adjoint():
    # map each tensor-module kernel to the graph ops that differentiate it
    coverage = {
        "conv2d": (GradGraph.conv2d,),
        "batchnorm2d": (GradGraph.batchnorm2d,),
        "activation": (GradGraph.relu, GradGraph.sigmoid),
        "concat_channels": (GradGraph.concat_channels,),
        "hadamard": (GradGraph.hadamard,),
        "pool2d": (GradGraph.maxpool, GradGraph.global_avg_pool),
        "linear": (GradGraph.linear,),
        "softmax_cross_entropy": (GradGraph.softmax_cross_entropy,),
    }
    assert set(coverage) == set(FORWARD_KERNELS)
    for ops in coverage.values():
        for op in ops:
            assert callable(op)
    # and the finite-difference suite exercises every one of them
    checked = {name.split("[")[0] for name, _ in KERNEL_CHECKS}
    assert set(FORWARD_KERNELS) <= checked


def test_grad_check_quadratic_is_nearly_exact():
    rng = np.random.default_rng(4)
    x = Param("x", rng.standard_normal((2, 2)))

    def make_loss():
        g = GradGraph()
        n = g.leaf(x)
        return g, g.weighted_sum(g.hadamard(n, n), np.ones((2, 2)))

    report = grad_check(make_loss, [x])
    assert report.max_error < 1e-9
    assert report.checked == 4


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(5)
    logits = Param("logits", rng.standard_normal((2, 7)))
    labels = np.array([2, 5])

    def make_loss():
        g = GradGraph()
        return g, g.softmax_cross_entropy(g.leaf(logits), labels)

    assert grad_check(make_loss, [logits]).max_error < 1e-6


def test_grad_check_honors_selection_mask():
    x = Param("x", np.array([0.0, 1.0, -1.0, 0.05]))
    probe = np.ones(4)

    def make_loss():
        g = GradGraph()
        # reshape through a 4d view so relu applies
        n = g.leaf(x)
        return g, g.weighted_sum(n, probe)

    report = grad_check(make_loss, [x], select={"x": np.abs(x.value) > 0.1})
    assert report.checked == 2  # only the entries the mask admits


def test_grad_check_max_entries_subsamples():
    rng = np.random.default_rng(6)
    x = Param("x", rng.standard_normal(50))

    def make_loss():
        g = GradGraph()
        return g, g.weighted_sum(g.leaf(x), np.ones(50))

    report = grad_check(make_loss, [x], max_entries=7)
    assert report.checked == 7


def test_relu_gradient_zero_at_origin_convention():
    x = Param("x", np.array([[[[0.0, -1.0, 2.0]]]]))
    g = GradGraph()
    loss = ones_probe(g, g.relu(g.leaf(x)))
    grads = g.backward(loss)
    npt.assert_array_equal(grads["x"][0, 0, 0], [0.0, 0.0, 1.0])


def test_conv_adjoint_against_finite_differences_strided():
    rng = np.random.default_rng(7)
    spec = ConvSpec(2, 2, 3, 3, stride=2, padding=1, has_bias=True)
    x = Param("x", rng.standard_normal((1, 2, 6, 6)))
    w = Param("w", rng.standard_normal(spec.weight_shape) * 0.5)
    b = Param("b", rng.standard_normal(2) * 0.1)
    probe = rng.standard_normal(tensor.conv2d(x.value, w.value, b.value, spec).shape)

    def make_loss():
        g = GradGraph()
        return g, g.weighted_sum(g.conv2d(g.leaf(x), g.leaf(w), g.leaf(b), spec), probe)

    assert grad_check(make_loss, [x, w, b]).max_error < 1e-6


def test_maxpool_overlapping_adjoint():
    # overlapping windows route gradient to the same winner multiple times
    rng = np.random.default_rng(8)
    vals = rng.permutation(16).astype(float).reshape(1, 1, 4, 4)
    x = Param("x", vals)
    g = GradGraph()
    loss = ones_probe(g, g.maxpool(g.leaf(x), window=3, stride=1))
    grads = g.backward(loss)
    # the global max (value 15) wins every window it appears in
    total_windows = 4  # 2x2 output positions
    assert grads["x"].sum() == total_windows
    winner = np.unravel_index(np.argmax(vals), vals.shape)
    assert grads["x"][winner] >= 1


def test_eval_batchnorm_treats_running_stats_as_constants():
    rng = np.random.default_rng(9)
    from llanet.tensor import RunningStats
    x = Param("x", rng.standard_normal((2, 2, 3, 3)))
    gamma = Param("gamma", np.array([1.5, 0.5]))
    beta = Param("beta", np.zeros(2))
    stats = RunningStats(np.array([0.3, -0.2]), np.array([1.2, 0.7]))
    g = GradGraph()
    y = g.batchnorm2d(g.leaf(x), g.leaf(gamma), g.leaf(beta), stats, train=False)
    grads = g.backward(ones_probe(g, y))
    inv = 1.0 / np.sqrt(stats.var + 1e-5)
    expected = np.broadcast_to((gamma.value * inv)[None, :, None, None], x.value.shape)
    npt.assert_allclose(grads["x"], expected, atol=1e-12)


def test_relative_error_denominator_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-15, 0.0) == pytest.approx(1e-3)
