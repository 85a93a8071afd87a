"""Finite-difference verification of every differentiable operator.

Each entry perturbs one input of one randomly sized instance and compares
central differences against the recorded backward pass.  Inputs that feed
order statistics (max pool, top-k pooling) or kinked activations (relu)
are drawn from a shuffled linear grid so no two values sit within the
perturbation step of each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, finite_diff_check
from . import ops
from .wsl import (
    BridgingLayer,
    HeadConfig,
    Heatmap,
    class_wise_pool,
    spatial_pool_test,
    weighted_bce,
)

__all__ = ["GradCheckResult", "run_gradient_suite", "suite_op_names"]


@dataclass
class GradCheckResult:
    op: str
    instances: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _separated(rng, shape, low=-1.0, high=1.0, exclude_zero=False):
    """Values on a shuffled linear grid: pairwise gaps far exceed the
    finite-difference step, keeping order statistics stable."""
    n = int(np.prod(shape))
    grid = np.linspace(low, high, n + (n % 2 if exclude_zero else 0) + 2)
    if exclude_zero:
        grid = grid[np.abs(grid) > 1e-2]
    vals = rng.permutation(grid[:n])
    return Tensor(vals.reshape(shape))


def _check_many(f_builders, h=1e-6):
    """Max finite-difference error over a list of (f, x) closures."""
    worst = 0.0
    for f, x in f_builders:
        worst = max(worst, finite_diff_check(f, x, h=h))
    return worst


def _elementwise_case(op, rng, exclude_zero=False):
    x = _separated(rng, (3, 5), exclude_zero=exclude_zero)
    return [(lambda t: op(t).sum(), x)]


def _add_case(rng):
    x = Tensor(rng.normal(size=(2, 3)))
    b = Tensor(rng.normal(size=(1, 3)))  # exercises broadcasting
    return [
        (lambda t: (t + b.detach()).sum(), x),
        (lambda t: (x.detach() + t).sum(), b),
    ]


def _mul_case(rng):
    x = Tensor(rng.normal(size=(2, 3)))
    b = Tensor(rng.normal(size=(2, 3)))
    return [
        (lambda t: (t * b.detach()).sum(), x),
        (lambda t: (x.detach() * t).sum(), b),
    ]


def _reductions_case(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    return [
        (lambda t: t.sum(), x),
        (lambda t: t.mean(axis=1).sum(), x),
        (lambda t: t.reshape(6, 4).mean(), x),
    ]


def _conv_case(rng, dilation):
    k = 3
    cin, cout = 2, 3
    size = 4 + dilation * (k - 1)
    x = Tensor(rng.normal(size=(1, cin, size, size)))
    w = Tensor(rng.normal(size=(cout, cin, k, k)), requires_grad=True)
    b = Tensor(rng.normal(size=(cout,)), requires_grad=True)
    pad = dilation
    stride = int(rng.integers(1, 3))

    def spec(weight, bias):
        return ops.Conv2dSpec(cin, cout, k, stride=stride, padding=pad,
                              dilation=dilation, weight=weight, bias=bias)

    return [
        (lambda t: ops.conv2d(t, spec(w.detach(), b.detach())).sum(), x),
        (lambda t: ops.conv2d(x.detach(), spec(t, b.detach())).sum(), w),
        (lambda t: ops.conv2d(x.detach(), spec(w.detach(), t)).sum(), b),
    ]


def _max_pool_case(rng):
    x = _separated(rng, (1, 2, 5, 5))
    return [(lambda t: ops.max_pool2d(t, 3, 2).sum(), x)]


def _avg_pool_case(rng):
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    return [(lambda t: ops.avg_pool2d(t, 2, 2).sum(), x)]


def _batch_norm_case(rng, mode):
    c = 2
    x = Tensor(rng.normal(size=(3, c, 3, 3)))
    spec = ops.BatchNormSpec.create(c)
    spec.gamma.data = rng.normal(1.0, 0.2, size=c)
    spec.beta.data = rng.normal(0.0, 0.2, size=c)
    spec.running_mean.data = rng.normal(0.0, 0.5, size=c)
    spec.running_var.data = rng.uniform(0.5, 2.0, size=c)
    # plain sums of normalized outputs are constant in train mode, so
    # project with fixed random weights to get a non-degenerate gradient
    proj = Tensor(rng.normal(size=x.shape))

    def run(t):
        return (ops.batch_norm(t, spec, mode) * proj).sum()

    cases = [(run, x)]
    g0 = spec.gamma

    def run_gamma(t):
        spec.gamma = t
        try:
            return (ops.batch_norm(x.detach(), spec, mode) * proj).sum()
        finally:
            spec.gamma = g0

    cases.append((run_gamma, g0))
    return cases


def _dropout_off_case(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    return [(lambda t: ops.dropout(t, 0.3, "eval").sum(), x)]


def _concat_case(rng):
    a = Tensor(rng.normal(size=(1, 2, 3, 3)))
    b = Tensor(rng.normal(size=(1, 3, 3, 3)))
    return [
        (lambda t: ops.concat_channels([t, b.detach()]).sum(), a),
        (lambda t: ops.concat_channels([a.detach(), t]).sum(), b),
    ]


def _bridging_case(rng):
    head = HeadConfig(("a", "b"), submaps_per_class=2, top_k_test=2, bottom_k_test=2)
    layer = BridgingLayer(3, head, rng=rng)
    x = Tensor(rng.normal(size=(1, 3, 3, 3)))
    w, b = layer.conv.weight, layer.conv.bias
    return [
        (lambda t: layer.forward(t).sum(), x),
        (lambda t: (setattr(layer.conv, "weight", t), layer.forward(x.detach()).sum())[1], w),
        (lambda t: (setattr(layer.conv, "bias", t), layer.forward(x.detach()).sum())[1], b),
    ]


def _class_wise_pool_case(rng):
    head = HeadConfig(("a", "b", "c"), submaps_per_class=3)
    x = Tensor(rng.normal(size=(2, 9, 3, 3)))
    return [(lambda t: class_wise_pool(t, head).values.sum(), x)]


def _spatial_pool_test_case(rng):
    head = HeadConfig(
        ("a", "b"),
        submaps_per_class=1,
        top_k_test=int(rng.integers(1, 5)),
        bottom_k_test=int(rng.integers(1, 5)),
        bottom_weight=float(rng.uniform(0.0, 1.5)),
    )
    x = _separated(rng, (2, 2, 4, 4))
    return [(lambda t: spatial_pool_test(Heatmap(t), head).logits.sum(), x)]


def _weighted_bce_case(rng):
    n, c = 3, 4
    y = (rng.random((n, c)) < 0.5).astype(float)
    wp = rng.uniform(0.1, 1.0, size=c)
    wm = rng.uniform(0.1, 1.0, size=c)
    z = Tensor(rng.normal(size=(n, c)))
    return [(lambda t: weighted_bce(t, y, wp, wm), z)]


_SUITE = [
    ("add", _add_case),
    ("mul", _mul_case),
    ("relu", lambda rng: _elementwise_case(lambda t: t.relu(), rng, exclude_zero=True)),
    ("sigmoid", lambda rng: _elementwise_case(lambda t: t.sigmoid(), rng)),
    ("softplus", lambda rng: _elementwise_case(lambda t: __import__("weakray.tensor", fromlist=["softplus"]).softplus(t), rng)),
    ("sum_mean_reshape", _reductions_case),
    ("conv2d", lambda rng: _conv_case(rng, 1)),
    ("conv2d_dilated", lambda rng: _conv_case(rng, 2)),
    ("max_pool2d", _max_pool_case),
    ("avg_pool2d", _avg_pool_case),
    ("batch_norm_train", lambda rng: _batch_norm_case(rng, "train")),
    ("batch_norm_eval", lambda rng: _batch_norm_case(rng, "eval")),
    ("dropout_off", _dropout_off_case),
    ("concat_channels", _concat_case),
    ("bridging", _bridging_case),
    ("class_wise_pool", _class_wise_pool_case),
    ("spatial_pool_test", _spatial_pool_test_case),
    ("weighted_bce", _weighted_bce_case),
]


def suite_op_names() -> list:
    return [name for name, _ in _SUITE]


def run_gradient_suite(instances: int = 20, tolerance: float = 1e-4,
                       seed: int = 0, h: float = 1e-6) -> list:
    """Run every op's finite-difference check ``instances`` times each."""
    results = []
    for name, builder in _SUITE:
        rng = np.random.default_rng((seed, hash(name) & 0xFFFF))
        worst = 0.0
        for _ in range(instances):
            worst = max(worst, _check_many(builder(rng), h=h))
        results.append(GradCheckResult(name, instances, worst, tolerance))
    return results
