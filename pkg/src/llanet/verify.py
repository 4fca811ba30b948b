"""Finite-difference verification drivers.

Each check builds a tiny randomized instance of one differentiable kernel
(or the attention gate, or the whole small network), reduces it to a scalar
through a fixed random weighting so every output element influences the
loss, and compares tape gradients against central differences.

Convention: ReLU inputs are only checked where |x| > 0.1 - the kernel is
nondifferentiable at 0 and a central difference straddling the kink is
meaningless. The sampling mask enforces this.
"""

from __future__ import annotations

import numpy as np

from . import tensor
from .attention import attention_forward_graph, init_attention
from .autodiff import GradCheckReport, GradGraph, Param, grad_check
from .network import init_network, network_loss_graph, preset
from .tensor import ConvSpec, RunningStats

RELU_KINK_MARGIN = 0.1


def _param(rng, name, shape, scale=1.0):
    return Param(name, scale * rng.standard_normal(shape))


def _probe(rng, shape):
    # fixed weighting drawn once, reused across every finite-difference re-evaluation
    return rng.standard_normal(shape)


def check_conv2d(eps, rng):
    spec = ConvSpec(out_channels=2, in_channels=3, kernel_h=3, kernel_w=3,
                    stride=2, padding=1, has_bias=True)
    x = _param(rng, "x", (2, 3, 5, 5))
    w = _param(rng, "w", spec.weight_shape, scale=0.5)
    b = _param(rng, "b", (2,), scale=0.1)
    out_shape = tensor.conv2d(x.value, w.value, b.value, spec).shape
    probe = _probe(rng, out_shape)

    def make_loss():
        g = GradGraph()
        y = g.conv2d(g.leaf(x), g.leaf(w), g.leaf(b), spec)
        return g, g.weighted_sum(y, probe)

    return grad_check(make_loss, [x, w, b], eps=eps)


def check_batchnorm(eps, rng, train):
    x = _param(rng, "x", (2, 3, 4, 4))
    gamma = Param("gamma", 0.5 + rng.random(3))
    beta = _param(rng, "beta", (3,), scale=0.3)
    stats = RunningStats(rng.standard_normal(3), 0.5 + rng.random(3))
    probe = _probe(rng, x.value.shape)

    def make_loss():
        g = GradGraph()
        y = g.batchnorm2d(g.leaf(x), g.leaf(gamma), g.leaf(beta), stats,
                          train=train, update_running=False)
        return g, g.weighted_sum(y, probe)

    return grad_check(make_loss, [x, gamma, beta], eps=eps)


def check_relu(eps, rng):
    x = Param("x", rng.standard_normal((2, 3, 4, 4)))
    probe = _probe(rng, x.value.shape)

    def make_loss():
        g = GradGraph()
        return g, g.weighted_sum(g.relu(g.leaf(x)), probe)

    mask = np.abs(x.value) > RELU_KINK_MARGIN
    return grad_check(make_loss, [x], eps=eps, select={"x": mask})


def check_sigmoid(eps, rng):
    x = Param("x", 2.0 * rng.standard_normal((2, 3, 4, 4)))
    probe = _probe(rng, x.value.shape)

    def make_loss():
        g = GradGraph()
        return g, g.weighted_sum(g.sigmoid(g.leaf(x)), probe)

    return grad_check(make_loss, [x], eps=eps)


def check_concat(eps, rng):
    a = _param(rng, "a", (2, 2, 3, 3))
    b = _param(rng, "b", (2, 3, 3, 3))
    probe = _probe(rng, (2, 5, 3, 3))

    def make_loss():
        g = GradGraph()
        return g, g.weighted_sum(g.concat_channels(g.leaf(a), g.leaf(b)), probe)

    return grad_check(make_loss, [a, b], eps=eps)


def check_hadamard(eps, rng):
    a = _param(rng, "a", (2, 3, 4, 4))
    b = _param(rng, "b", (2, 3, 4, 4))
    probe = _probe(rng, a.value.shape)

    def make_loss():
        g = GradGraph()
        return g, g.weighted_sum(g.hadamard(g.leaf(a), g.leaf(b)), probe)

    return grad_check(make_loss, [a, b], eps=eps)


def check_maxpool(eps, rng):
    # well-separated values so +/- eps nudges never flip a window's argmax
    vals = rng.permutation(2 * 2 * 6 * 6).astype(float) * 0.1
    x = Param("x", vals.reshape(2, 2, 6, 6))
    probe = _probe(rng, (2, 2, 3, 3))

    def make_loss():
        g = GradGraph()
        return g, g.weighted_sum(g.maxpool(g.leaf(x), window=2, stride=2), probe)

    return grad_check(make_loss, [x], eps=eps)


def check_global_avg_pool(eps, rng):
    x = _param(rng, "x", (2, 3, 4, 5))
    probe = _probe(rng, (2, 3, 1, 1))

    def make_loss():
        g = GradGraph()
        return g, g.weighted_sum(g.global_avg_pool(g.leaf(x)), probe)

    return grad_check(make_loss, [x], eps=eps)


def check_linear(eps, rng):
    x = _param(rng, "x", (2, 5))
    w = _param(rng, "w", (3, 5), scale=0.5)
    b = _param(rng, "b", (3,), scale=0.1)
    probe = _probe(rng, (2, 3))

    def make_loss():
        g = GradGraph()
        return g, g.weighted_sum(g.linear(g.leaf(x), g.leaf(w), g.leaf(b)), probe)

    return grad_check(make_loss, [x, w, b], eps=eps)


def check_softmax_cross_entropy(eps, rng):
    logits = _param(rng, "logits", (2, 7))
    labels = np.array([3, 6])

    def make_loss():
        g = GradGraph()
        return g, g.softmax_cross_entropy(g.leaf(logits), labels)

    return grad_check(make_loss, [logits], eps=eps)


def check_attention_gate(eps, rng):
    f_pre = _param(rng, "f_pre", (1, 2, 3, 3))
    f_cur = _param(rng, "f_cur", (1, 2, 3, 3))
    gate = init_attention(2, 3, rng, prefix="gate")
    probe = _probe(rng, f_cur.value.shape)

    def make_loss():
        g = GradGraph()
        refined, _ = attention_forward_graph(g, g.leaf(f_pre), g.leaf(f_cur), gate)
        return g, g.weighted_sum(refined, probe)

    return grad_check(make_loss, [f_pre, f_cur, gate.weight, gate.bias], eps=eps)


KERNEL_CHECKS = (
    ("conv2d", check_conv2d),
    ("batchnorm2d[train]", lambda eps, rng: check_batchnorm(eps, rng, train=True)),
    ("batchnorm2d[eval]", lambda eps, rng: check_batchnorm(eps, rng, train=False)),
    ("activation[relu]", check_relu),
    ("activation[sigmoid]", check_sigmoid),
    ("concat_channels", check_concat),
    ("hadamard", check_hadamard),
    ("pool2d[max]", check_maxpool),
    ("pool2d[global_avg]", check_global_avg_pool),
    ("linear", check_linear),
    ("softmax_cross_entropy", check_softmax_cross_entropy),
    ("attention_gate", check_attention_gate),
)


def kernel_gradchecks(eps: float = 1e-5, seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    """Finite-difference reports for every kernel plus the attention gate."""
    results = []
    for i, (name, fn) in enumerate(KERNEL_CHECKS):
        rng = np.random.default_rng([seed, i])
        results.append((name, fn(eps, rng)))
    return results


def network_gradcheck(eps: float = 1e-5, seed: int = 0,
                      max_entries: int | None = None,
                      preset_name: str = "micro") -> tuple[str, GradCheckReport]:
    """End-to-end check: mean cross-entropy through a complete network
    (stem, combined modules, head) at the given preset size, train mode.

    The micro preset (one module at width 4, 8x8 input) is small enough to
    check every entry; for bigger presets pass ``max_entries`` to subsample.
    """
    rng = np.random.default_rng([seed, 99])
    cfg = preset(preset_name, seed=seed)
    store = init_network(cfg)
    x = rng.standard_normal((1,) + cfg.input_shape)
    labels = np.array([2])

    def make_loss():
        g = GradGraph()
        _, loss = network_loss_graph(g, x, labels, store, cfg, train=True,
                                     update_running=False)
        return g, loss

    report = grad_check(make_loss, store.trainable(), eps=eps,
                        max_entries=max_entries, rng=rng)
    tag = ",sampled" if max_entries is not None else ""
    return f"network[{preset_name},e2e{tag}]", report


def run_suite(which: str = "all", eps: float = 1e-5) -> list[tuple[str, GradCheckReport]]:
    """The CLI's gradcheck entry point: "ops", "net" (end-to-end), or "all"."""
    results = []
    if which in ("ops", "all"):
        results.extend(kernel_gradchecks(eps=eps))
    if which in ("net", "all"):
        # micro exhaustively, tiny subsampled (a few entries from every parameter)
        results.append(network_gradcheck(eps=eps))
        results.append(network_gradcheck(eps=eps, max_entries=3, preset_name="tiny"))
    if not results:
        raise ValueError(f"unknown suite {which!r}; choose ops, net, or all")
    return results
