"""Weakly supervised classification head.

The backbone's feature map is bridged by a 1x1 convolution into M sub-maps
per class.  Class-wise pooling averages each class's M sub-maps into one
heatmap, which serves double duty: it is thresholded for localization, and
it is spatially pooled into a single logit per class.

Spatial pooling differs between phases.  During training the logit is one
value drawn uniformly from the top-k heatmap cells, which keeps gradients
flowing to plausible lesion sites rather than only the argmax.  During
testing the logit is the mean of the top k+ cells plus ``bottom_weight``
times the mean of the bottom k- cells; high cells vote for presence, low
cells vote for absence.

The loss is a class-weighted binary cross entropy on the sigmoid of the
logit, evaluated in the softplus form so it is stable for any magnitude.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    _sigmoid,
    make_result,
    mul,
    neg,
    reduce_mean,
    register_op,
    softplus,
)
from .ops import Conv2dSpec, conv2d, he_normal_conv

__all__ = [
    "HeadConfig",
    "Heatmap",
    "ClassScores",
    "BridgingLayer",
    "bridging",
    "class_wise_pool",
    "spatial_pool_train",
    "spatial_pool_test",
    "weighted_bce",
    "class_weights_from_labels",
]


@dataclass(frozen=True)
class HeadConfig:
    """Head hyperparameters.

    ``submaps_per_class`` is the number of per-class sub-maps produced by
    the bridging layer; ``top_k_train`` sizes the sampling pool for the
    training logit; ``top_k_test``/``bottom_k_test``/``bottom_weight``
    parameterize the deterministic test logit.
    """

    class_names: tuple
    submaps_per_class: int = 14
    top_k_train: int = 10
    top_k_test: int = 15
    bottom_k_test: int = 15
    bottom_weight: float = 1.0

    def __post_init__(self):
        if len(self.class_names) < 1:
            raise ValueError("head needs at least one class")
        if self.submaps_per_class < 1:
            raise ValueError("submaps_per_class must be >= 1")
        for name in ("top_k_train", "top_k_test", "bottom_k_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.bottom_weight < 0:
            raise ValueError("bottom_weight must be >= 0")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_submaps(self) -> int:
        return self.submaps_per_class * self.num_classes


@dataclass
class Heatmap:
    """Per-class spatial score maps, shape (N, C, H, W)."""

    values: Tensor

    def numpy(self) -> np.ndarray:
        return self.values.data

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class ClassScores:
    """Per-class logits (N, C); probabilities are their sigmoid."""

    logits: Tensor

    @property
    def probabilities(self) -> np.ndarray:
        return _sigmoid(self.logits.data)


class BridgingLayer:
    """1x1 convolution from backbone features to M*C sub-map channels.

    Output channel ``c * M + m`` holds sub-map ``m`` of class ``c``; the
    mapping is fixed so class-wise pooling can slice by plain reshape.
    """

    def __init__(self, in_channels: int, head: HeadConfig,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        self.in_channels = in_channels
        self.head = head
        self.conv = he_normal_conv(in_channels, head.num_submaps, 1,
                                   with_bias=True, rng=rng, dtype=dtype)

    def forward(self, features: Tensor) -> Tensor:
        return conv2d(features, self.conv)

    __call__ = forward

    def named_parameters(self):
        return [("bridge.weight", self.conv.weight), ("bridge.bias", self.conv.bias)]


def bridging(features: Tensor, layer: BridgingLayer) -> Tensor:
    """Apply the bridging convolution (functional form)."""
    return layer.forward(features)


@register_op("class_wise_pool")
def class_wise_pool(submaps: Tensor, head: HeadConfig) -> Heatmap:
    """Average each class's M sub-maps into a single per-class heatmap."""
    if submaps.ndim != 4:
        raise ShapeError(f"class_wise_pool: expected (N,M*C,H,W), got {submaps.shape}")
    m = head.submaps_per_class
    channels = submaps.shape[1]
    if channels % m:
        raise ShapeError(
            f"class_wise_pool: channel count {channels} not divisible by {m} sub-maps per class"
        )
    if channels != head.num_submaps:
        raise ShapeError(
            f"class_wise_pool: got {channels} channels, head expects "
            f"{head.num_submaps} ({head.num_classes} classes x {m})"
        )
    n, _, h, w = submaps.shape
    grouped = submaps.reshape(n, head.num_classes, m, h, w)
    return Heatmap(reduce_mean(grouped, axis=2))


def _flatten_heatmap(op: str, heatmap: Heatmap) -> tuple:
    values = heatmap.values
    if values.ndim != 4:
        raise ShapeError(f"{op}: heatmap must be (N,C,H,W), got {values.shape}")
    n, c, h, w = values.shape
    cells = h * w
    if cells == 0:
        raise ShapeError(f"{op}: empty heatmap {values.shape}")
    return values, n, c, cells


def _clamp_k(op: str, k: int, cells: int, label: str) -> int:
    if k > cells:
        warnings.warn(
            f"{op}: {label}={k} exceeds {cells} heatmap cells, clamping", stacklevel=3
        )
        return cells
    return k


def spatial_pool_train(heatmap: Heatmap, head: HeadConfig,
                       rng: np.random.Generator) -> ClassScores:
    """Per class, draw the logit uniformly from the top-k heatmap cells.

    The gradient routes 1 to exactly the drawn cell.  Draws are made with
    one vectorized call in row-major (n, c) order, so results are
    reproducible from the rng state.  Ties in the top-k cutoff are broken
    by row-major cell index.
    """
    values, n, c, cells = _flatten_heatmap("spatial_pool_train", heatmap)
    k = _clamp_k("spatial_pool_train", head.top_k_train, cells, "top_k_train")
    flat = values.data.reshape(n, c, cells)
    top_idx = np.argsort(-flat, axis=-1, kind="stable")[:, :, :k]
    pick = rng.integers(0, k, size=(n, c))
    chosen = np.take_along_axis(top_idx, pick[:, :, None], axis=-1)[:, :, 0]
    out = np.take_along_axis(flat, chosen[:, :, None], axis=-1)[:, :, 0]

    in_shape = values.shape

    def grad_fn(g):
        grad = np.zeros((n, c, cells), dtype=g.dtype)
        np.put_along_axis(grad, chosen[:, :, None], g[:, :, None], axis=-1)
        return (grad.reshape(in_shape),)

    return ClassScores(make_result("spatial_pool_train", (values,), out, grad_fn))


def spatial_pool_test(heatmap: Heatmap, head: HeadConfig) -> ClassScores:
    """Deterministic test logit: mean of the top k+ cells plus
    ``bottom_weight`` times the mean of the bottom k- cells.

    The two cell sets are selected independently, so they may overlap when
    k+ + k- exceeds the number of cells.  The gradient is 1/k+ on each top
    cell plus ``bottom_weight``/k- on each bottom cell.
    """
    values, n, c, cells = _flatten_heatmap("spatial_pool_test", heatmap)
    k_top = _clamp_k("spatial_pool_test", head.top_k_test, cells, "top_k_test")
    k_bot = _clamp_k("spatial_pool_test", head.bottom_k_test, cells, "bottom_k_test")
    alpha = head.bottom_weight

    flat = values.data.reshape(n, c, cells)
    top_idx = np.argsort(-flat, axis=-1, kind="stable")[:, :, :k_top]
    bot_idx = np.argsort(flat, axis=-1, kind="stable")[:, :, :k_bot]
    top_mean = np.take_along_axis(flat, top_idx, axis=-1).mean(axis=-1)
    bot_mean = np.take_along_axis(flat, bot_idx, axis=-1).mean(axis=-1)
    out = top_mean + alpha * bot_mean

    in_shape = values.shape

    def grad_fn(g):
        grad = np.zeros((n, c, cells), dtype=g.dtype)
        np.add.at(
            grad,
            (np.arange(n)[:, None, None], np.arange(c)[None, :, None], top_idx),
            g[:, :, None] / k_top,
        )
        np.add.at(
            grad,
            (np.arange(n)[:, None, None], np.arange(c)[None, :, None], bot_idx),
            g[:, :, None] * (alpha / k_bot),
        )
        return (grad.reshape(in_shape),)

    return ClassScores(make_result("spatial_pool_test", (values,), out, grad_fn))


def weighted_bce(scores, targets, w_plus, w_minus) -> Tensor:
    """Class-weighted binary cross entropy, averaged over samples and classes.

    ``scores`` may be :class:`ClassScores` or a raw logit tensor.  Written
    in the softplus form,

        w+ * y * softplus(-z) + w- * (1-y) * softplus(z),

    which equals ``-w+ y log p - w- (1-y) log(1-p)`` with ``p = sigmoid(z)``
    but stays finite for any logit magnitude.
    """
    logits = scores.logits if isinstance(scores, ClassScores) else scores
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"weighted_bce: labels {y.shape} do not match logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("weighted_bce: labels must be binary (0 or 1)")
    wp = np.asarray(w_plus, dtype=logits.dtype).reshape(1, -1)
    wm = np.asarray(w_minus, dtype=logits.dtype).reshape(1, -1)
    if wp.shape[1] != logits.shape[1] or wm.shape[1] != logits.shape[1]:
        raise ShapeError("weighted_bce: class-weight length does not match class count")
    if np.any(wp < 0) or np.any(wm < 0):
        raise ValueError("weighted_bce: class weights must be nonnegative")

    pos_term = mul(softplus(neg(logits)), Tensor(y * wp))
    neg_term = mul(softplus(logits), Tensor((1.0 - y) * wm))
    return reduce_mean(pos_term + neg_term)


def class_weights_from_labels(labels, invert: bool = False):
    """Per-class BCE weights computed from training-split label frequencies.

    By default ``w+`` is the fraction of positive samples and ``w-`` the
    fraction of negatives, applied to the positive and negative loss terms
    respectively.  ``invert=True`` swaps them, giving the conventional
    form that up-weights the rare class.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 2:
        raise ShapeError(f"class weights need (n, C) labels, got shape {y.shape}")
    pos_frac = y.mean(axis=0)
    neg_frac = 1.0 - pos_frac
    if invert:
        return neg_frac, pos_frac
    return pos_frac, neg_frac
