"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the transformer and the training objectives need are
provided. Every op records a closure that maps the output gradient to
gradients for its inputs; :func:`backward` walks the recorded graph in
reverse topological order.

Recording is skipped when no input requires a gradient, or inside
:func:`no_grad`, so inference code pays only the numpy cost.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "GradientError",
    "NonDeterministicError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "swap_last",
    "reshape",
    "concat",
    "exp",
    "log",
    "relu",
    "minimum",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "take_along_axis",
    "masked_fill",
    "tsum",
    "mean",
    "l2_normalize",
    "cosine_similarity",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class DomainError(ValueError):
    """An operand lies outside the domain of the operation (log, division)."""

    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class GradientError(RuntimeError):
    pass


class NonDeterministicError(RuntimeError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording for the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array with an accumulated gradient of the same shape.

    Leaves are created directly (``Tensor(values, requires_grad=True)``);
    every other tensor is the output of a recorded op and keeps references
    to its inputs until the graph is dropped.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_grad_fn", "op", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, *, _parents=(), _grad_fn=None, op: str = "leaf"):
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._grad_fn = _grad_fn
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError("item", self.shape, ())
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(values, requires_grad=True, _parents=tuple(parents), _grad_fn=grad_fn, op=op)
    return Tensor(values, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.values + b.values, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.values - b.values, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make(a.values * b.values, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.values == 0):
        raise DomainError("div", "division by zero")
    out = a.values / b.values

    def grad_fn(g):
        ga = _unbroadcast(g / b.values, a.shape)
        gb = _unbroadcast(-g * out / b.values, b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.values <= 0):
        raise DomainError("log", "non-positive operand")
    return _make(np.log(a.values), (a,), lambda g: (g / a.values,), "log")


def relu(a) -> Tensor:
    """max(0, a); the subgradient at 0 is taken as 0."""
    a = _as_tensor(a)
    on = a.values > 0
    return _make(np.where(on, a.values, 0.0), (a,), lambda g: (g * on,), "relu")


def minimum(a, bound: float) -> Tensor:
    """Clamp from above by a constant; no gradient where the clamp is active."""
    a = _as_tensor(a)
    keep = a.values < bound
    return _make(np.where(keep, a.values, bound), (a,), lambda g: (g * keep,), "minimum")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = _as_tensor(a)
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _make(out, (a,), grad_fn, "gelu")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.values, b.values)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.values, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.values.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(a) -> Tensor:
    a = _as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    out = a.values[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def grad_fn(g):
        full = np.zeros_like(a.values)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), grad_fn, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", ())
    ref = list(ts[0].shape)
    ax = axis % len(ref)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(ref, other)) if i != ax):
            raise ShapeError("concat", ts[0].shape, t.shape)
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.values for t in ts], axis=ax), ts, grad_fn, "concat")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.values.mean(axis=axis, keepdims=keepdims)
    count = a.values.size / max(out.size, 1)

    def grad_fn(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _make(out, (a,), grad_fn, "mean")


# ---------------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), grad_fn, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), grad_fn, "log_softmax")


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
    mu = a.values.mean(axis=-1, keepdims=True)
    xc = a.values - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def grad_fn(g):
        ga = None
        if a.requires_grad:
            dxhat = g * gain.values
            ga = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = g.reshape(-1, d)
        return ga, (lead * xhat.reshape(-1, d)).sum(axis=0), lead.sum(axis=0)

    return _make(out, (a, gain, bias), grad_fn, "layer_norm")


def embedding(weight, ids) -> Tensor:
    """Row gather ``weight[ids]``; ids may have any shape."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError("embedding", weight.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DomainError("embedding", f"ids must lie in [0, {weight.shape[0]})")

    def grad_fn(g):
        full = np.zeros_like(weight.values)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _make(weight.values[ids], (weight,), grad_fn, "embedding")


def take_along_axis(a, indices, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with a scatter-add backward (duplicates accumulate)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    if idx.ndim != a.ndim:
        raise ShapeError("take_along_axis", a.shape, idx.shape)
    try:
        out = np.take_along_axis(a.values, idx, axis=ax)
    except (ValueError, IndexError):
        raise ShapeError("take_along_axis", a.shape, idx.shape) from None

    def grad_fn(g):
        full = np.zeros_like(a.values)
        grids = list(np.indices(g.shape, sparse=True))
        grids = [np.broadcast_to(x, g.shape) for x in grids]
        grids[ax] = np.broadcast_to(idx, g.shape)
        np.add.at(full, tuple(grids), g)
        return (full,)

    return _make(out, (a,), grad_fn, "take_along_axis")


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, a.shape)
    except ValueError:
        raise ShapeError("masked_fill", a.shape, mask.shape) from None
    keep = ~mask
    return _make(np.where(mask, value, a.values), (a,), lambda g: (_unbroadcast(g * keep, a.shape),), "masked_fill")


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit length; zero vectors stay zero."""
    a = _as_tensor(a)
    norm = np.sqrt((a.values * a.values).sum(axis=axis, keepdims=True))
    nonzero = norm > 0
    safe = np.where(nonzero, norm, 1.0)
    out = a.values / safe

    def grad_fn(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(nonzero, (g - out * proj) / safe, 0.0),)

    return _make(out, (a,), grad_fn, "l2_normalize")


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine along ``axis`` with broadcasting; 0 when either vector is zero."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    _broadcast_shape("cosine_similarity", a, b)
    return tsum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


# ---------------------------------------------------------------------------
# reverse pass and verification
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires-grad leaf.

    Intermediate tensors get their gradient for this pass assigned (not
    accumulated), so calling twice without zeroing doubles only leaf grads.
    """
    if root.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GradientError("backward through a tensor with no recorded computation")
    grads = {id(root): np.ones_like(root.values)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)


def grad_check(f: Callable[[], Tensor], leaves: Iterable[Tensor], epsilon: float = 1e-5, floor: float = 1e-12) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` is re-evaluated after in-place perturbation of each leaf element,
    so it must read the leaves' current values on every call. Gradients
    smaller than ``floor`` are compared on the absolute scale ``floor``,
    which keeps finite-difference roundoff on near-zero entries from
    dominating.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    leaves = list(leaves)
    with no_grad():
        first, second = f().item(), f().item()
    if first != second and not (np.isnan(first) and np.isnan(second)):
        raise NonDeterministicError(f"f returned {first!r} then {second!r}")

    for leaf in leaves:
        leaf.zero_grad()
    backward(f())
    analytic = [leaf.grad.copy() for leaf in leaves]

    worst = 0.0
    with no_grad():
        for leaf, ana in zip(leaves, analytic):
            flat = leaf.values.reshape(-1)
            ana_flat = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                hi, lo = orig + epsilon, orig - epsilon
                flat[i] = hi
                up = f().item()
                flat[i] = lo
                down = f().item()
                flat[i] = orig
                # divide by the step actually taken, not the nominal 2 * epsilon
                num = (up - down) / (hi - lo)
                denom = max(abs(ana_flat[i]), abs(num), floor)
                worst = max(worst, abs(ana_flat[i] - num) / denom)
    return worst
