"""Dense NCHW tensor kernels.

Feature maps are plain numpy arrays of shape (n, c, h, w) - batch, channels,
height, width - stored row-major, float64 by default. Everything in this
module is a pure forward kernel; adjoints live in ``llanet.autodiff``.
Running batch-norm statistics are owned by the caller and passed in
explicitly, so kernels keep no hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float64

AXIS_NAMES = ("batch", "channels", "height", "width")

# Kernel names llanet.autodiff must cover with adjoints.
FORWARD_KERNELS = (
    "conv2d",
    "batchnorm2d",
    "activation",
    "concat_channels",
    "hadamard",
    "pool2d",
    "linear",
    "softmax_cross_entropy",
)


class DimensionError(ValueError):
    """An input violated a kernel's shape contract; ``axis`` names the offender."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message if axis is None else f"{message} [axis: {axis}]")
        self.axis = axis


def _require_nchw(x, name="input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"{name} must be rank-4 NCHW, got rank {x.ndim}", axis="rank")
    return x


def _mismatch_axis(a: np.ndarray, b: np.ndarray) -> str:
    if a.ndim != b.ndim:
        return "rank"
    for i, (da, db) in enumerate(zip(a.shape, b.shape)):
        if da != db:
            return AXIS_NAMES[i] if a.ndim == 4 else f"dim{i}"
    return "shape"


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-d convolution (cross-correlation, no kernel flip)."""

    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.out_channels < 1 or self.in_channels < 1:
            raise ValueError(f"channel counts must be >= 1, got {self.out_channels}x{self.in_channels}")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError(f"kernel dims must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)


def conv_output_hw(spec: ConvSpec, h: int, w: int) -> tuple[int, int]:
    """Output spatial dims for an input of h x w under ``spec``."""
    oh = (h + 2 * spec.padding - spec.kernel_h) // spec.stride + 1
    ow = (w + 2 * spec.padding - spec.kernel_w) // spec.stride + 1
    if oh < 1:
        raise DimensionError(f"kernel {spec.kernel_h} does not fit height {h} with padding {spec.padding}", axis="height")
    if ow < 1:
        raise DimensionError(f"kernel {spec.kernel_w} does not fit width {w} with padding {spec.padding}", axis="width")
    return oh, ow


def _conv_windows(x, kh, kw, stride, padding):
    """Read-only sliding-window view (n, c, kh, kw, oh, ow) over the padded input.

    Also returns the padded array shape, which the convolution adjoint needs.
    """
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return windows, x.shape


def conv2d(x, weight, bias, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate ``x`` (n, c, h, w) with ``weight`` (out, in, kh, kw)."""
    x = _require_nchw(x)
    weight = np.asarray(weight)
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"input has {x.shape[1]} channels, spec expects {spec.in_channels}", axis="channels")
    if weight.shape != spec.weight_shape:
        raise DimensionError(
            f"weight shape {weight.shape} does not match spec {spec.weight_shape}", axis="weight")
    if spec.has_bias:
        if bias is None:
            raise DimensionError("spec declares a bias but none was given", axis="bias")
        bias = np.asarray(bias)
        if bias.shape != (spec.out_channels,):
            raise DimensionError(
                f"bias shape {bias.shape} must be ({spec.out_channels},)", axis="bias")
    elif bias is not None:
        raise DimensionError("spec declares no bias but one was given", axis="bias")

    n = x.shape[0]
    oh, ow = conv_output_hw(spec, x.shape[2], x.shape[3])
    windows, _ = _conv_windows(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding)
    cols = windows.reshape(n, spec.in_channels * spec.kernel_h * spec.kernel_w, oh * ow)
    wmat = weight.reshape(spec.out_channels, -1)
    out = np.matmul(wmat, cols).reshape(n, spec.out_channels, oh, ow)
    if spec.has_bias:
        out += bias[None, :, None, None]
    return out


@dataclass
class RunningStats:
    """Per-channel running mean/variance; updated in place in train mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_moments(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance over (batch, height, width)."""
    return x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))


def batchnorm2d(x, gamma, beta, stats: RunningStats, train: bool,
                eps: float = 1e-5, momentum: float = 0.1,
                update_running: bool | None = None) -> np.ndarray:
    """Normalise per channel; train mode uses batch statistics, eval the running ones.

    In train mode the running stats are updated in place with the given
    momentum (variance with the unbiased estimate) unless ``update_running``
    is explicitly False.
    """
    x = _require_nchw(x)
    c = x.shape[1]
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if gamma.shape != (c,):
        raise DimensionError(f"gamma shape {gamma.shape} must be ({c},)", axis="channels")
    if beta.shape != (c,):
        raise DimensionError(f"beta shape {beta.shape} must be ({c},)", axis="channels")
    if train:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ValueError("train-mode batch norm needs at least 2 values per channel")
        mean, var = batch_moments(x)
        if update_running is None or update_running:
            stats.mean *= 1.0 - momentum
            stats.mean += momentum * mean
            stats.var *= 1.0 - momentum
            stats.var += momentum * (var * (m / (m - 1.0)))
    else:
        mean, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    return gamma[None, :, None, None] * ((x - mean[None, :, None, None]) * inv[None, :, None, None]) \
        + beta[None, :, None, None]


def _sigmoid(x):
    out = np.empty_like(x, dtype=DEFAULT_DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the open interval (0, 1) even when exp() underflows
    info = np.finfo(out.dtype)
    np.clip(out, info.smallest_normal, 1.0 - info.epsneg, out=out)
    return out


def activation(x, kind: str) -> np.ndarray:
    """Elementwise nonlinearity; ``kind`` is "relu" or "sigmoid"."""
    x = np.asarray(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return _sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def concat_channels(a, b) -> np.ndarray:
    """Stack ``b``'s channels after ``a``'s; batch and spatial dims must agree."""
    a = _require_nchw(a, "a")
    b = _require_nchw(b, "b")
    for axis in (0, 2, 3):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(
                f"operands disagree on {AXIS_NAMES[axis]}: {a.shape[axis]} vs {b.shape[axis]}",
                axis=AXIS_NAMES[axis])
    return np.concatenate([a, b], axis=1)


def hadamard(a, b) -> np.ndarray:
    """Elementwise product of two identically shaped arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(
            f"shapes {a.shape} and {b.shape} differ", axis=_mismatch_axis(a, b))
    return a * b


def pool2d(x, kind: str, window: int | None = None, stride: int | None = None) -> np.ndarray:
    """Spatial pooling: windowed "max" or whole-map "global_avg" (-> n, c, 1, 1)."""
    x = _require_nchw(x)
    if kind == "global_avg":
        return x.mean(axis=(2, 3), keepdims=True)
    if kind != "max":
        raise ValueError(f"unknown pool kind {kind!r}")
    if window is None or window < 1:
        raise ValueError("max pooling needs a window >= 1")
    stride = window if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    _, _, h, w = x.shape
    if window > h:
        raise DimensionError(f"window {window} exceeds height {h}", axis="height")
    if window > w:
        raise DimensionError(f"window {window} exceeds width {w}", axis="width")
    windows, _ = _conv_windows(x, window, window, stride, 0)
    return windows.max(axis=(2, 3))


def linear(x, weight, bias) -> np.ndarray:
    """Affine map: (n, d) @ (k, d)^T + (k,) -> (n, k)."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError("linear expects 2-d input and weight", axis="rank")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"input features {x.shape[1]} do not match weight features {weight.shape[1]}",
            axis="features")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"bias shape {bias.shape} must be ({weight.shape[0]},)", axis="out_features")
    return x @ weight.T + bias


def softmax(logits) -> np.ndarray:
    """Row-wise softmax of a (n, k) matrix, stabilised by max subtraction."""
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise DimensionError("logits must be 2-d (batch, classes)", axis="rank")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood plus the softmax probabilities.

    Numerically stabilised by max subtraction; probability rows sum to 1.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError("logits must be 2-d (batch, classes)", axis="rank")
    n, k = logits.shape
    if k < 2:
        raise ValueError(f"need at least 2 classes, got {k}")
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} must be ({n},)", axis="batch")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    nll = np.log(denom[:, 0]) - z[np.arange(n), labels]
    return float(nll.mean()), probs
