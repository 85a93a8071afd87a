"""Neural network operators: 2-D convolution with dilation, pooling,
batch normalization, dropout, and channel concatenation.

Every operator has a hand-derived backward pass wired into the autodiff
tape.  Convolution is implemented as cross-correlation (the usual deep
learning convention) with zero padding; the output spatial size obeys

    out = floor((in + 2*padding - dilation*(kernel-1) - 1) / stride) + 1

and the effective span of a dilated kernel is ``dilation*(kernel-1) + 1``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, ShapeError, make_result, register_op, relu, sigmoid

__all__ = [
    "Conv2dSpec",
    "BatchNormSpec",
    "conv2d",
    "conv_output_size",
    "dilate_equivalence_oracle",
    "max_pool2d",
    "avg_pool2d",
    "batch_norm",
    "dropout",
    "concat_channels",
    "he_normal_conv",
    "relu",
    "sigmoid",
]


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


@dataclass
class Conv2dSpec:
    """Parameters and weights of one 2-D convolution.

    ``weight`` has shape ``(out_channels, in_channels, kernel, kernel)``;
    ``bias``, when present, has shape ``(out_channels,)``.
    """

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    weight: Tensor | None = None
    bias: Tensor | None = None

    @property
    def kernel_span(self) -> int:
        """Receptive span of the (possibly dilated) kernel in input cells."""
        return self.dilation * (self.kernel_size - 1) + 1


def he_normal_conv(
    in_channels: int,
    out_channels: int,
    kernel_size: int,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    with_bias: bool = False,
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> Conv2dSpec:
    """Build a Conv2dSpec with He-normal weights (fan-in scaled)."""
    rng = rng or np.random.default_rng(0)
    fan_in = in_channels * kernel_size * kernel_size
    std = np.sqrt(2.0 / fan_in)
    w = rng.normal(0.0, std, size=(out_channels, in_channels, kernel_size, kernel_size))
    weight = Tensor(w.astype(dtype), requires_grad=True)
    bias = None
    if with_bias:
        bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
    return Conv2dSpec(
        in_channels,
        out_channels,
        kernel_size,
        stride=stride,
        padding=padding,
        dilation=dilation,
        weight=weight,
        bias=bias,
    )


def _conv_windows(x_pad: np.ndarray, k: int, stride: int, dilation: int, out_h: int, out_w: int):
    """Read-only strided view of shape (N, C, k, k, out_h, out_w)."""
    n, c, _, _ = x_pad.shape
    sn, sc, sh, sw = x_pad.strides
    return as_strided(
        x_pad,
        shape=(n, c, k, k, out_h, out_w),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


@register_op("conv2d")
def conv2d(x: Tensor, spec: Conv2dSpec) -> Tensor:
    """Cross-correlate ``x (N, Cin, H, W)`` with ``spec.weight``, zero padded.

    Differentiable with respect to the input, the weight, and the bias.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (N,C,H,W), got shape {x.shape}")
    weight = spec.weight
    if weight is None:
        raise ShapeError("conv2d: spec has no weight tensor")
    k, s, p, d = spec.kernel_size, spec.stride, spec.padding, spec.dilation
    n, cin, h, w = x.shape
    if weight.shape != (spec.out_channels, spec.in_channels, k, k):
        raise ShapeError(
            f"conv2d: weight shape {weight.shape} does not match spec "
            f"({spec.out_channels},{spec.in_channels},{k},{k})"
        )
    if cin != spec.in_channels:
        raise ShapeError(
            f"conv2d: input has {cin} channels, weight expects {spec.in_channels} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    out_h = conv_output_size(h, k, s, p, d)
    out_w = conv_output_size(w, k, s, p, d)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: nonpositive output size {out_h}x{out_w} for input {h}x{w}, "
            f"kernel {k}, stride {s}, padding {p}, dilation {d}"
        )

    x_pad = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    windows = _conv_windows(x_pad, k, s, d, out_h, out_w)
    # (Cout, N, out_h, out_w) <- contract (Cin, k, k)
    out = np.tensordot(weight.data, windows, axes=([1, 2, 3], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    bias = spec.bias
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    w_data = weight.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 4, 5]))
        grad_xp = np.zeros_like(x_pad)
        for ki in range(k):
            for kj in range(k):
                # (N, out_h, out_w, Cin) <- g (N,Cout,oh,ow) x w (Cout,Cin)
                tap = np.tensordot(g, w_data[:, :, ki, kj], axes=([1], [0]))
                grad_xp[
                    :,
                    :,
                    ki * d : ki * d + s * out_h : s,
                    kj * d : kj * d + s * out_w : s,
                ] += tap.transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, p : p + h, p : p + w] if p else grad_xp
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g.sum(axis=(0, 2, 3))

    return make_result("conv2d", inputs, out, grad_fn)


def dilate_equivalence_oracle(
    x: Tensor, weight: Tensor, dilation: int, tol: float = 1e-10
) -> bool:
    """Check that dilated convolution equals plain convolution with a
    zero-interleaved kernel spread to the same span.

    Intended for small tensors; this is a verification oracle, not a fast path.
    """
    cout, cin, k, _ = weight.shape
    span = dilation * (k - 1) + 1
    spread = np.zeros((cout, cin, span, span), dtype=weight.dtype)
    spread[:, :, ::dilation, ::dilation] = weight.data
    pad = dilation * (k - 1) // 2

    spec_d = Conv2dSpec(cin, cout, k, padding=pad, dilation=dilation, weight=weight.detach())
    spec_i = Conv2dSpec(cin, cout, span, padding=pad, dilation=1, weight=Tensor(spread))
    a = conv2d(x.detach(), spec_d)
    b = conv2d(x.detach(), spec_i)
    return bool(np.max(np.abs(a.data - b.data)) < tol)


def _pool_prepare(name: str, x: Tensor, window: int, stride: int | None, padding: int):
    if x.ndim != 4:
        raise ShapeError(f"{name}: input must be 4-D (N,C,H,W), got shape {x.shape}")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ShapeError(
            f"{name}: window {window} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    out_h = conv_output_size(h, window, stride, padding, 1)
    out_w = conv_output_size(w, window, stride, padding, 1)
    return stride, out_h, out_w


@register_op("max_pool2d")
def max_pool2d(x: Tensor, window: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max over each window; gradient flows to the first maximum in
    row-major scan order within the window (deterministic tie-break).
    """
    stride, out_h, out_w = _pool_prepare("max_pool2d", x, window, stride, padding)
    n, c, h, w = x.shape
    if padding:
        x_pad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                       constant_values=-np.inf)
    else:
        x_pad = x.data
    windows = _conv_windows(x_pad, window, stride, 1, out_h, out_w)
    # flatten each window in row-major order so argmax picks the first max in scan order
    flat = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, out_h, out_w, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    pad_h, pad_w = x_pad.shape[2], x_pad.shape[3]

    def grad_fn(g):
        grad_pad = np.zeros((n, c, pad_h, pad_w), dtype=g.dtype)
        oh = np.arange(out_h).reshape(1, 1, out_h, 1)
        ow = np.arange(out_w).reshape(1, 1, 1, out_w)
        rows = oh * stride + arg // window
        cols = ow * stride + arg % window
        nn = np.arange(n).reshape(n, 1, 1, 1)
        cc = np.arange(c).reshape(1, c, 1, 1)
        np.add.at(
            grad_pad,
            (
                np.broadcast_to(nn, arg.shape),
                np.broadcast_to(cc, arg.shape),
                np.broadcast_to(rows, arg.shape),
                np.broadcast_to(cols, arg.shape),
            ),
            g,
        )
        if padding:
            return (grad_pad[:, :, padding : padding + h, padding : padding + w],)
        return (grad_pad,)

    return make_result("max_pool2d", (x,), out, grad_fn)


@register_op("avg_pool2d")
def avg_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Mean over each window; gradient spreads evenly across the window."""
    stride, out_h, out_w = _pool_prepare("avg_pool2d", x, window, stride, 0)
    n, c, h, w = x.shape
    windows = _conv_windows(x.data, window, stride, 1, out_h, out_w)
    out = windows.mean(axis=(2, 3))

    def grad_fn(g):
        grad_x = np.zeros((n, c, h, w), dtype=g.dtype)
        share = g / (window * window)
        for ki in range(window):
            for kj in range(window):
                grad_x[:, :, ki : ki + stride * out_h : stride,
                       kj : kj + stride * out_w : stride] += share
        return (grad_x,)

    return make_result("avg_pool2d", (x,), out, grad_fn)


@dataclass
class BatchNormSpec:
    """Per-channel batch normalization state.

    ``mode`` selects the default behaviour: ``"train"`` normalizes with
    batch statistics and updates the running estimates, ``"eval"`` uses the
    running estimates only (deterministic).  Running variance stays strictly
    positive by construction.
    """

    channels: int
    gamma: Tensor = None
    beta: Tensor = None
    running_mean: Tensor = None
    running_var: Tensor = None
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5,
               dtype=np.float64) -> "BatchNormSpec":
        return cls(
            channels=channels,
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=Tensor(np.zeros(channels, dtype=dtype)),
            running_var=Tensor(np.ones(channels, dtype=dtype)),
            momentum=momentum,
            epsilon=epsilon,
        )


@register_op("batch_norm")
def batch_norm(x: Tensor, spec: BatchNormSpec, mode: str | None = None) -> Tensor:
    """Normalize per channel over (N, H, W).

    Train mode requires a batch of at least 2 and updates the running
    statistics with ``momentum`` (running variance uses the unbiased
    estimate).  Eval mode is an affine map defined by the running stats.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: input must be 4-D (N,C,H,W), got shape {x.shape}")
    if x.shape[1] != spec.channels:
        raise ShapeError(
            f"batch_norm: input has {x.shape[1]} channels, spec expects {spec.channels}"
        )
    mode = spec.mode if mode is None else mode
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")
    gamma, beta = spec.gamma, spec.beta
    eps = spec.epsilon
    g_col = gamma.data.reshape(1, -1, 1, 1)

    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise ValueError("batch_norm: train mode requires batch size >= 2, got 1")
        count = n * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        out = g_col * xhat + beta.data.reshape(1, -1, 1, 1)

        m = spec.momentum
        unbiased = var * (count / (count - 1))
        spec.running_mean.data = (1.0 - m) * spec.running_mean.data + m * mean
        spec.running_var.data = (1.0 - m) * spec.running_var.data + m * unbiased

        def grad_fn(g):
            sum_g = g.sum(axis=(0, 2, 3))
            sum_gx = (g * xhat).sum(axis=(0, 2, 3))
            grad_x = (g_col * inv.reshape(1, -1, 1, 1) / count) * (
                count * g
                - sum_g.reshape(1, -1, 1, 1)
                - xhat * sum_gx.reshape(1, -1, 1, 1)
            )
            return grad_x, sum_gx, sum_g

        return make_result("batch_norm", (x, gamma, beta), out, grad_fn)

    inv = 1.0 / np.sqrt(spec.running_var.data + eps)
    xhat = (x.data - spec.running_mean.data.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    out = g_col * xhat + beta.data.reshape(1, -1, 1, 1)

    def grad_fn(g):
        grad_x = g * (g_col * inv.reshape(1, -1, 1, 1))
        return grad_x, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result("batch_norm", (x, gamma, beta), out, grad_fn)


@register_op("dropout")
def dropout(x: Tensor, rate: float, mode: str = "train",
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate`` and scale survivors
    by ``1/(1-rate)`` in train mode; identity in eval mode.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: train mode with rate > 0 needs an explicit rng")
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.shape) >= rate) * scale
    return make_result("dropout", (x,), x.data * mask, lambda g: (g * mask,))


@register_op("concat_channels")
def concat_channels(xs) -> Tensor:
    """Concatenate (N, Ci, H, W) tensors along the channel axis."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels: need at least one input")
    if len(xs) == 1:
        return xs[0]
    base = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(
                "concat_channels: mismatched N/H/W among inputs: "
                + ", ".join(str(t.shape) for t in xs)
            )
    data = np.concatenate([t.data for t in xs], axis=1)
    sizes = [t.shape[1] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(xs)))

    return make_result("concat_channels", tuple(xs), data, grad_fn)
