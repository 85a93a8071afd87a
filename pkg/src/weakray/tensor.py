"""Dense tensors with a reverse-mode automatic differentiation engine.

A :class:`Tensor` wraps a numpy array plus an optional gradient slot.  Any
operation whose inputs require gradients records an :class:`OpNode` on a
dynamic tape; ``backward()`` replays the reachable part of the tape in exact
reverse creation order and accumulates gradients into the participating
leaves.  Gradients add up across backward calls and across multiple uses of
the same tensor, and must be cleared explicitly (``zero_grad``) between
optimization steps.

Conventions:

* image data is laid out ``(N, C, H, W)``;
* 64-bit floats are the default and are what all correctness tolerances
  assume; 32-bit is supported for training speed;
* the graph is single use: once a loss has been backpropagated, the nodes
  it visited are released and cannot be walked again.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "OpNode",
    "ShapeError",
    "GraphError",
    "no_grad",
    "set_debug_checks",
    "debug_checks_enabled",
    "register_op",
    "forward_op",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "sigmoid",
    "softplus",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested operation."""


class GraphError(RuntimeError):
    """The autodiff graph cannot support the requested backward pass."""


_grad_enabled = True
_debug_finite = False
_node_counter = itertools.count()


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf check applied to every op output (off by default)."""
    global _debug_finite
    _debug_finite = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_finite


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class OpNode:
    """One recorded operation: inputs, backward closure, creation order.

    ``grad_fn`` maps the gradient at the node's output to a tuple of
    gradients aligned with ``inputs`` (``None`` for non-differentiable
    slots).  Forward context needed by the backward pass is captured in
    the closure.
    """

    __slots__ = ("kind", "inputs", "grad_fn", "seq", "out", "spent")

    def __init__(self, kind: str, inputs: Sequence["Tensor"], grad_fn: Callable):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.grad_fn = grad_fn
        self.seq = next(_node_counter)
        self.out: "Tensor | None" = None
        self.spent = False


class Tensor:
    """N-dimensional array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: OpNode | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements, expected 1")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph.

        Every ``requires_grad`` leaf reachable from this tensor receives
        ``d(self)/d(leaf)`` added into its ``grad``.  The visited subgraph
        is released afterwards; a second backward through it raises
        :class:`GraphError` (higher-order derivatives are unsupported).
        """
        if self.data.size != 1:
            raise GraphError(f"backward: loss must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward: tensor does not require gradients")
        if self.node is None:
            # a bare leaf: d(self)/d(self) == 1
            seed = np.ones_like(self.data)
            self.grad = seed if self.grad is None else self.grad + seed
            return
        if self.node.spent:
            raise GraphError(
                "backward: graph already consumed (double backward is unsupported)"
            )

        # collect the subgraph rooted at this tensor
        nodes: list[OpNode] = []
        stack = [self.node]
        seen = {id(self.node)}
        while stack:
            node = stack.pop()
            if node.spent:
                raise GraphError(
                    f"backward: op {node.kind!r} was already backpropagated through"
                )
            nodes.append(node)
            for t in node.inputs:
                if t.node is not None and id(t.node) not in seen:
                    seen.add(id(t.node))
                    stack.append(t.node)
        nodes.sort(key=lambda n: n.seq, reverse=True)

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in nodes:
            out = node.out
            grad_out = pending.pop(id(out), None)
            node.spent = True
            if grad_out is None:
                continue  # not on a path to the loss
            input_grads = node.grad_fn(grad_out)
            for t, g in zip(node.inputs, input_grads):
                if g is None or not t.requires_grad:
                    continue
                if t.node is None:
                    t.grad = g if t.grad is None else t.grad + g
                else:
                    key = id(t)
                    if key in pending:
                        pending[key] = pending[key] + g
                    else:
                        pending[key] = g
        # release closures so intermediate buffers can be reclaimed
        for node in nodes:
            node.grad_fn = None
            node.inputs = ()


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def make_result(
    kind: str,
    inputs: Sequence[Tensor],
    data: np.ndarray,
    grad_fn: Callable,
) -> Tensor:
    """Wrap an op's forward result, recording a graph node when needed.

    This is the single entry point every differentiable operation funnels
    through, including those defined in other modules.
    """
    if _debug_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{kind}: non-finite values in op output")
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = OpNode(kind, inputs, grad_fn)
        node.out = out
        out.node = node
    return out


# ---------------------------------------------------------------------------
# op registry

_OP_REGISTRY: dict[str, Callable] = {}


def register_op(kind: str):
    """Decorator registering a callable under ``kind`` for :func:`forward_op`."""

    def deco(fn):
        if kind in _OP_REGISTRY:
            raise ValueError(f"op kind {kind!r} already registered")
        _OP_REGISTRY[kind] = fn
        return fn

    return deco


def forward_op(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Dispatch an operation by name. Raises for unknown kinds."""
    try:
        fn = _OP_REGISTRY[kind]
    except KeyError:
        raise ValueError(f"forward_op: unknown op kind {kind!r}") from None
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def _broadcast_or_raise(kind: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{kind}: operands are not broadcastable, shapes {a.shape} vs {b.shape}"
        ) from None


@register_op("add")
def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _broadcast_or_raise("add", a, b)
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", (a, b), data, grad_fn)


@register_op("sub")
def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _broadcast_or_raise("sub", a, b)
    data = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result("sub", (a, b), data, grad_fn)


@register_op("mul")
def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _broadcast_or_raise("mul", a, b)
    data = a.data * b.data
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return make_result("mul", (a, b), data, grad_fn)


@register_op("neg")
def neg(a: Tensor) -> Tensor:
    return make_result("neg", (a,), -a.data, lambda g: (-g,))


@register_op("mul_scalar")
def mul_scalar(a: Tensor, value: float) -> Tensor:
    return mul(a, float(value))


@register_op("add_scalar")
def add_scalar(a: Tensor, value: float) -> Tensor:
    return add(a, float(value))


@register_op("relu")
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@register_op("sigmoid")
def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_result("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


@register_op("softplus")
def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def grad_fn(g):
        return (g * _sigmoid(x),)

    return make_result("softplus", (a,), data, grad_fn)


def _normalize_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@register_op("sum")
def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def grad_fn(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, in_shape).copy(),)

    return make_result("sum", (a,), data, grad_fn)


@register_op("mean")
def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    data = a.data.mean(axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def grad_fn(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, in_shape).copy(),)

    return make_result("mean", (a,), data, grad_fn)


@register_op("sum_all")
def sum_all(a: Tensor) -> Tensor:
    return reduce_sum(a, axis=None)


@register_op("mean_all")
def mean_all(a: Tensor) -> Tensor:
    return reduce_mean(a, axis=None)


@register_op("reshape")
def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(
            f"reshape: cannot view shape {a.shape} as {shape}"
        ) from None
    in_shape = a.shape

    def grad_fn(g):
        return (g.reshape(in_shape),)

    return make_result("reshape", (a,), data, grad_fn)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-6,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of ``f`` at ``x`` against central differences.

    Returns the maximum over checked elements of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    A NaN anywhere in the evaluation is reported as ``inf`` (a failure).

    ``f`` must be deterministic and map a tensor to a scalar tensor.  By
    default every element of ``x`` is perturbed; ``sample`` limits the check
    to a random subset of elements, which keeps large end-to-end checks
    affordable.
    """
    probe = Tensor(np.array(x.data, dtype=np.float64, copy=True), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise GraphError(f"finite_diff_check: f returned shape {out.shape}, expected scalar")
    if not np.all(np.isfinite(out.data)):
        return math.inf
    out.backward()
    if probe.grad is None:
        raise GraphError("finite_diff_check: f does not depend on x")
    analytic = probe.grad.reshape(-1).copy()

    flat = probe.data.reshape(-1)
    indices = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(flat.size, size=sample, replace=False)

    worst = 0.0
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(probe).data.reshape(()))
            flat[i] = orig - h
            f_minus = float(f(probe).data.reshape(()))
            flat[i] = orig
            if math.isnan(f_plus) or math.isnan(f_minus):
                return math.inf
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
