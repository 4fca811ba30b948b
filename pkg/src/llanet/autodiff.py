"""Reverse-mode differentiation over the NCHW kernels.

A ``GradGraph`` is a tape: every op appends a ``Node`` holding the forward
value and a closure that scatters the node's cotangent to its parents.
``backward`` walks the tape in reverse creation order, which is a valid
topological order, accumulating gradients across fan-out, and returns a
``GradMap`` for the trainable leaves. Leaves the loss never touched get
zero gradients rather than being dropped, so optimizer code can iterate
parameters unconditionally.

``grad_check`` verifies any graph-building closure against central
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .tensor import DEFAULT_DTYPE, ConvSpec, DimensionError, RunningStats


class Param:
    """A named trainable leaf.

    ``decay_exempt`` marks parameters (biases, norm scales/shifts) that the
    optimizer should skip when applying weight decay.
    """

    __slots__ = ("name", "value", "trainable", "decay_exempt")

    def __init__(self, name: str, value, trainable: bool = True, decay_exempt: bool = False):
        self.name = name
        self.value = np.asarray(value, dtype=DEFAULT_DTYPE)
        self.trainable = trainable
        self.decay_exempt = decay_exempt

    def __repr__(self):
        flags = "" if self.trainable else ", frozen"
        return f"Param({self.name!r}, shape={self.value.shape}{flags})"


class Node:
    """One tape entry: forward value plus the local backward rule."""

    __slots__ = ("value", "grad", "_backprop", "label")

    def __init__(self, value, backprop=None, label=""):
        self.value = value
        self.grad = None
        self._backprop = backprop
        self.label = label

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.label or 'const'}, shape={np.shape(self.value)})"


class GradMap(dict):
    """Mapping from trainable parameter name to its gradient array."""

    def total_norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for g in self.values())))


class GradGraph:
    """Tape of differentiable ops; build a scalar loss, then call ``backward``."""

    def __init__(self):
        self._tape: list[Node] = []
        self._leaves: dict[str, tuple[Param, Node]] = {}

    # -- graph construction -------------------------------------------------

    def _record(self, value, backprop=None, label="") -> Node:
        node = Node(value, backprop, label)
        self._tape.append(node)
        return node

    @staticmethod
    def _send(parent: Node, grad):
        if parent.grad is None:
            parent.grad = np.array(grad, dtype=DEFAULT_DTYPE)
        else:
            parent.grad += grad

    def leaf(self, param: Param) -> Node:
        """Enter ``param`` into the graph; repeated calls return the same node."""
        hit = self._leaves.get(param.name)
        if hit is not None:
            if hit[0] is not param:
                raise ValueError(f"two different params share the name {param.name!r}")
            return hit[1]
        node = self._record(param.value, label=param.name)
        self._leaves[param.name] = (param, node)
        return node

    def constant(self, value) -> Node:
        """A non-differentiable input (e.g. an image batch)."""
        return self._record(np.asarray(value, dtype=DEFAULT_DTYPE))

    # -- ops -----------------------------------------------------------------

    def conv2d(self, x: Node, weight: Node, bias: Node | None, spec: ConvSpec) -> Node:
        out = tensor.conv2d(x.value, weight.value, None if bias is None else bias.value, spec)
        windows, padded_shape = tensor._conv_windows(
            x.value, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding)
        n, _, oh, ow = out.shape
        wmat = weight.value.reshape(spec.out_channels, -1)

        def backprop(dy):
            self._send(weight, np.tensordot(dy, windows, axes=([0, 2, 3], [0, 4, 5])).reshape(spec.weight_shape))
            if bias is not None:
                self._send(bias, dy.sum(axis=(0, 2, 3)))
            dcols = np.matmul(wmat.T, dy.reshape(n, spec.out_channels, oh * ow))
            dwin = dcols.reshape(n, spec.in_channels, spec.kernel_h, spec.kernel_w, oh, ow)
            dxp = np.zeros(padded_shape, dtype=DEFAULT_DTYPE)
            s = spec.stride
            for i in range(spec.kernel_h):
                for j in range(spec.kernel_w):
                    dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dwin[:, :, i, j]
            p = spec.padding
            dx = dxp[:, :, p:padded_shape[2] - p, p:padded_shape[3] - p] if p else dxp
            self._send(x, dx)

        return self._record(out, backprop, "conv2d")

    def batchnorm2d(self, x: Node, gamma: Node, beta: Node, stats: RunningStats,
                    train: bool, eps: float = 1e-5, momentum: float = 0.1,
                    update_running: bool | None = None) -> Node:
        xv = x.value
        if train:
            m = xv.shape[0] * xv.shape[2] * xv.shape[3]
            if m < 2:
                raise ValueError("train-mode batch norm needs at least 2 values per channel")
            mean, var = tensor.batch_moments(xv)
            if update_running is None or update_running:
                stats.mean *= 1.0 - momentum
                stats.mean += momentum * mean
                stats.var *= 1.0 - momentum
                stats.var += momentum * (var * (m / (m - 1.0)))
        else:
            # snapshot so later in-place updates cannot corrupt this adjoint
            mean, var = stats.mean.copy(), stats.var.copy()
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mean[None, :, None, None]) * inv[None, :, None, None]
        out = gamma.value[None, :, None, None] * xhat + beta.value[None, :, None, None]
        gval = gamma.value

        def backprop(dy):
            self._send(gamma, (dy * xhat).sum(axis=(0, 2, 3)))
            self._send(beta, dy.sum(axis=(0, 2, 3)))
            dxhat = dy * gval[None, :, None, None]
            if train:
                m = xv.shape[0] * xv.shape[2] * xv.shape[3]
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv[None, :, None, None]
            self._send(x, dx)

        return self._record(out, backprop, "batchnorm2d")

    def relu(self, x: Node) -> Node:
        out = tensor.activation(x.value, "relu")
        positive = x.value > 0

        def backprop(dy):
            self._send(x, dy * positive)

        return self._record(out, backprop, "relu")

    def sigmoid(self, x: Node) -> Node:
        out = tensor.activation(x.value, "sigmoid")

        def backprop(dy):
            self._send(x, dy * out * (1.0 - out))

        return self._record(out, backprop, "sigmoid")

    def concat_channels(self, a: Node, b: Node) -> Node:
        out = tensor.concat_channels(a.value, b.value)
        ca = a.value.shape[1]

        def backprop(dy):
            self._send(a, dy[:, :ca])
            self._send(b, dy[:, ca:])

        return self._record(out, backprop, "concat")

    def hadamard(self, a: Node, b: Node) -> Node:
        out = tensor.hadamard(a.value, b.value)
        av, bv = a.value, b.value

        def backprop(dy):
            self._send(a, dy * bv)
            self._send(b, dy * av)

        return self._record(out, backprop, "hadamard")

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise DimensionError(f"add shapes differ: {a.value.shape} vs {b.value.shape}")
        out = a.value + b.value

        def backprop(dy):
            self._send(a, dy)
            self._send(b, dy)

        return self._record(out, backprop, "add")

    def maxpool(self, x: Node, window: int, stride: int | None = None) -> Node:
        stride = window if stride is None else stride
        out = tensor.pool2d(x.value, "max", window, stride)
        windows, _ = tensor._conv_windows(x.value, window, window, stride, 0)
        n, c, oh, ow = out.shape
        winner = windows.reshape(n, c, window * window, oh, ow).argmax(axis=2)

        def backprop(dy):
            dx = np.zeros_like(x.value)
            ni, ci, oi, oj = np.indices((n, c, oh, ow))
            rows = oi * stride + winner // window
            cols = oj * stride + winner % window
            np.add.at(dx, (ni, ci, rows, cols), dy)
            self._send(x, dx)

        return self._record(out, backprop, "maxpool")

    def global_avg_pool(self, x: Node) -> Node:
        out = tensor.pool2d(x.value, "global_avg")
        _, _, h, w = x.value.shape

        def backprop(dy):
            self._send(x, np.broadcast_to(dy / (h * w), x.value.shape))

        return self._record(out, backprop, "global_avg_pool")

    def flatten(self, x: Node) -> Node:
        n = x.value.shape[0]
        out = x.value.reshape(n, -1)
        shape = x.value.shape

        def backprop(dy):
            self._send(x, dy.reshape(shape))

        return self._record(out, backprop, "flatten")

    def linear(self, x: Node, weight: Node, bias: Node) -> Node:
        out = tensor.linear(x.value, weight.value, bias.value)
        xv, wv = x.value, weight.value

        def backprop(dy):
            self._send(weight, dy.T @ xv)
            self._send(bias, dy.sum(axis=0))
            self._send(x, dy @ wv)

        return self._record(out, backprop, "linear")

    def softmax_cross_entropy(self, logits: Node, labels) -> Node:
        labels = np.asarray(labels)
        loss, probs = tensor.softmax_cross_entropy(logits.value, labels)
        n, k = logits.value.shape
        onehot = np.zeros((n, k), dtype=DEFAULT_DTYPE)
        onehot[np.arange(n), labels] = 1.0

        def backprop(dy):
            self._send(logits, float(dy) * (probs - onehot) / n)

        return self._record(np.float64(loss), backprop, "softmax_cross_entropy")

    def weighted_sum(self, x: Node, weights) -> Node:
        """Scalar probe <weights, x>; handy for exercising adjoints in isolation."""
        weights = np.asarray(weights, dtype=DEFAULT_DTYPE)
        if weights.shape != x.value.shape:
            raise DimensionError(f"weights shape {weights.shape} != value shape {x.value.shape}")
        out = np.float64((weights * x.value).sum())

        def backprop(dy):
            self._send(x, float(dy) * weights)

        return self._record(out, backprop, "weighted_sum")

    # -- backward ------------------------------------------------------------

    def backward(self, root: Node) -> GradMap:
        """Reverse sweep from a scalar ``root``; returns trainable-leaf gradients."""
        if np.size(root.value) != 1:
            raise ValueError(f"backward needs a scalar root, got shape {np.shape(root.value)}")
        for node in self._tape:
            node.grad = None
        root.grad = np.ones_like(root.value, dtype=DEFAULT_DTYPE)
        for node in reversed(self._tape):
            if node.grad is not None and node._backprop is not None:
                node._backprop(node.grad)
        grads = GradMap()
        for name, (param, node) in self._leaves.items():
            if not param.trainable:
                continue
            grads[name] = np.zeros_like(param.value) if node.grad is None else node.grad
        return grads


# -- numerical verification ---------------------------------------------------


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-12, abs(a) + abs(b))


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference sweep."""

    max_error: float = 0.0
    checked: int = 0
    per_param: dict = field(default_factory=dict)
    worst_site: tuple = ()

    def __str__(self):
        return f"grad check: {self.checked} entries, max relative error {self.max_error:.3e}"


def grad_check(make_loss, params, eps: float = 1e-5, max_entries: int | None = None,
               select=None, rng=None) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``make_loss`` builds a fresh graph from the params' *current* values and
    returns ``(graph, loss_node)``; it is re-evaluated with each entry nudged
    by +/- ``eps``. ``select`` optionally maps a param name to a boolean mask
    of entries eligible for checking (e.g. to stay away from ReLU kinks);
    ``max_entries`` caps the per-param count by random subsampling.
    """
    graph, loss = make_loss()
    analytic = graph.backward(loss)
    rng = np.random.default_rng(0) if rng is None else rng
    report = GradCheckReport()
    for param in params:
        if not param.trainable:
            continue
        grad = analytic[param.name]
        flat = param.value.reshape(-1)
        indices = np.arange(flat.size)
        if select is not None and param.name in select:
            indices = indices[np.asarray(select[param.name]).reshape(-1)]
        if max_entries is not None and indices.size > max_entries:
            indices = rng.choice(indices, size=max_entries, replace=False)
        worst = 0.0
        for idx in indices:
            saved = flat[idx]
            flat[idx] = saved + eps
            up = float(make_loss()[1].value)
            flat[idx] = saved - eps
            down = float(make_loss()[1].value)
            flat[idx] = saved
            numeric = (up - down) / (2.0 * eps)
            err = relative_error(float(grad.reshape(-1)[idx]), numeric)
            report.checked += 1
            if err > worst:
                worst = err
            if err > report.max_error:
                report.max_error = err
                report.worst_site = (param.name, int(idx), float(grad.reshape(-1)[idx]), numeric)
        report.per_param[param.name] = worst
    return report
