"""Minimal reverse-mode autodiff over numpy arrays.

Every operation the backbone, decoder, projection heads and losses need is
implemented here as a differentiable function over :class:`DiffTensor`.
The engine is deliberately small: dense arrays, eager evaluation, a tape
rebuilt from parent links on every ``backward()``.

Conventions
-----------
- float32 is the working precision for training; float64 is supported and
  used by the finite-difference gradient checks.
- Leaves created with ``requires_grad=True`` carry a zero-initialised
  ``grad`` accumulator. Repeated ``backward()`` calls accumulate into leaf
  grads; intermediate nodes get their grad assigned per call.
- ``fd_gradient`` is the independent oracle: central differences, never
  touching the backward rules it is used to check.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

Array = np.ndarray

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_node_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (used for evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> Array:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class DiffTensor:
    """Dense numeric array participating in reverse-mode differentiation.

    ``values`` live in ``.data``; the gradient accumulator ``.grad`` is
    present on tracked leaves from construction and on interior nodes
    after a backward pass. ``node_id`` identifies the node inside the
    computation record built from ``_parents``/``_vjp`` links.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data: Array = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = np.zeros_like(self.data) if requires_grad else None
        self.node_id = next(_node_ids)
        self.op: str = "leaf"
        self._parents: tuple[DiffTensor, ...] = ()
        self._vjp: Optional[Callable[[Array], Sequence[Optional[Array]]]] = None

    # -- convenience ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffTensor(shape={self.shape}, op={self.op!r}{flags})"

    # -- autograd ---------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` of every tracked node with d(self)/d(node).

        ``self`` must be scalar. Leaf grads accumulate across calls;
        interior grads (including this node's own, which becomes 1) are
        assigned per call.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor with no computation record")

        topo: list[DiffTensor] = []
        seen: set[int] = set()
        stack: list[tuple[DiffTensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))

        grads: dict[int, Array] = {self.node_id: np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node.is_leaf():
                node.grad += g
            else:
                node.grad = g
                contribs = node._vjp(g)
                for parent, pg in zip(node._parents, contribs):
                    if pg is None or not parent.requires_grad:
                        continue
                    acc = grads.get(parent.node_id)
                    grads[parent.node_id] = pg if acc is None else acc + pg

    # -- operator sugar ----------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def asdiff(x, dtype=None) -> DiffTensor:
    """Wrap ``x`` as a constant DiffTensor (pass-through when already one)."""
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x, dtype=dtype)


def _make(data: Array, op: str, parents: tuple[DiffTensor, ...], vjp) -> DiffTensor:
    """Build a graph node; collapses to a constant when recording is off."""
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        out = DiffTensor(data)
        out.op = op
        return out
    out = DiffTensor(data)
    out.requires_grad = True
    out.grad = None  # interior node; grad assigned by backward
    out.op = op
    out._parents = parents
    out._vjp = vjp
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to ``shape`` (trailing-dim rules)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: DiffTensor, b: DiffTensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> DiffTensor:
    a, b = asdiff(a), asdiff(b)
    _check_broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> DiffTensor:
    a, b = asdiff(a), asdiff(b)
    _check_broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> DiffTensor:
    """Elementwise (or scalar) product; ``x * c`` is the engine's scale op."""
    a, b = asdiff(a), asdiff(b)
    _check_broadcast("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), vjp)


def div(a, b) -> DiffTensor:
    a, b = asdiff(a), asdiff(b)
    _check_broadcast("div", a, b)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, "div", (a, b), vjp)


def power(x, p: float) -> DiffTensor:
    """Raise to a fixed scalar exponent."""
    x = asdiff(x)
    p = float(p)

    def vjp(g):
        return (g * p * np.power(x.data, p - 1.0),)

    return _make(np.power(x.data, p), "power", (x,), vjp)


def exp(x) -> DiffTensor:
    x = asdiff(x)
    out_data = np.exp(x.data)

    def vjp(g):
        return (g * out_data,)

    return _make(out_data, "exp", (x,), vjp)


def log(x) -> DiffTensor:
    x = asdiff(x)

    def vjp(g):
        return (g / x.data,)

    return _make(np.log(x.data), "log", (x,), vjp)


def clip(x, lo: Optional[float], hi: Optional[float]) -> DiffTensor:
    """Clamp to [lo, hi]; gradient is zero wherever the clamp is active."""
    x = asdiff(x)
    out_data = np.clip(x.data, lo, hi)
    inside = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi

    def vjp(g):
        return (g * inside,)

    return _make(out_data, "clip", (x,), vjp)


# -- nonlinearities and normalisation ----------------------------------------


def gelu(x) -> DiffTensor:
    """Exact GELU: 0.5 x (1 + erf(x / sqrt 2))."""
    x = asdiff(x)
    e = erf(x.data * _INV_SQRT2)
    out_data = 0.5 * x.data * (1.0 + e)

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (0.5 * (1.0 + e) + x.data * pdf),)

    return _make(out_data, "gelu", (x,), vjp)


def layernorm(x, eps: float = 1e-5) -> DiffTensor:
    """Normalize the trailing (channel) axis to zero mean, unit variance.

    Affine scale/shift is composed outside with ``mul``/``add`` so this op
    stays parameter-free.
    """
    x = asdiff(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def vjp(g):
        # d/dx of (x - mu) * inv with mu, var functions of x:
        # inv * (g - mean(g) - y * mean(g * y)) per normalisation group
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y, "layernorm", (x,), vjp)


def softmax(x, axis: int) -> DiffTensor:
    x = asdiff(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), vjp)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> DiffTensor:
    """Matrix product with numpy stacking semantics; operands need ndim >= 2."""
    a, b = asdiff(a), asdiff(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), vjp)


# -- reductions --------------------------------------------------------------


def _expand_reduced(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape).copy()
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def sum_(x, axis=None, keepdims: bool = False) -> DiffTensor:
    x = asdiff(x)

    def vjp(g):
        return (_expand_reduced(np.asarray(g), x.shape, axis, keepdims),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), "sum", (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> DiffTensor:
    x = asdiff(x)
    count = x.size if axis is None else np.prod(
        [x.shape[a % x.ndim] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        return (_expand_reduced(np.asarray(g), x.shape, axis, keepdims) / count,)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), "mean", (x,), vjp)


# -- shape manipulation ------------------------------------------------------


def reshape(x, shape) -> DiffTensor:
    x = asdiff(x)
    shape = tuple(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), "reshape", (x,), vjp)


def transpose(x, axes) -> DiffTensor:
    x = asdiff(x)
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _make(x.data.transpose(axes), "transpose", (x,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> DiffTensor:
    tensors = [asdiff(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), vjp)


def gather_rows(x, indices) -> DiffTensor:
    """Select rows along axis 0; backward scatter-adds (indices may repeat)."""
    x = asdiff(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ValueError(f"gather_rows: index out of range for first extent {x.shape[0]}")

    def vjp(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _make(x.data[idx], "gather_rows", (x,), vjp)


# -- spatial ops (trailing layout ..., H, W, C) -------------------------------


def avg_pool2x2(x) -> DiffTensor:
    """Non-overlapping 2x2 spatial mean over the (-3, -2) axes."""
    x = asdiff(x)
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x2: spatial extents must be even, got {x.shape}")
    blocked = x.data.reshape(*lead, h // 2, 2, w // 2, 2, c)
    out_data = blocked.mean(axis=(-4, -2))

    def vjp(g):
        g4 = np.expand_dims(np.expand_dims(g, -2), -4) / 4.0
        return (np.broadcast_to(g4, (*lead, h // 2, 2, w // 2, 2, c)).reshape(x.shape).copy(),)

    return _make(out_data, "avg_pool2x2", (x,), vjp)


def _shift_sum(arr: Array, h: int, w: int) -> Array:
    """Sum of the 3x3 neighbourhood (zero beyond borders) via shifted adds."""
    padded = np.pad(arr, [(0, 0)] * (arr.ndim - 3) + [(1, 1), (1, 1), (0, 0)])
    out = np.zeros_like(arr)
    for di in range(3):
        for dj in range(3):
            out += padded[..., di:di + h, dj:dj + w, :]
    return out


def avg_pool3x3(x) -> DiffTensor:
    """Stride-1 3x3 spatial mean, border windows averaged over valid cells only.

    The valid-cell normalisation keeps a constant input exactly constant,
    which the pooling token mixer relies on.
    """
    x = asdiff(x)
    *_, h, w, c = x.shape
    ones = np.ones((h, w, 1), dtype=x.dtype)
    counts = _shift_sum(ones, h, w)  # (h, w, 1) valid-cell counts in 4..9
    out_data = _shift_sum(x.data, h, w) / counts

    def vjp(g):
        # the neighbourhood-sum stencil is self-adjoint
        return (_shift_sum(g / counts, h, w),)

    return _make(out_data, "avg_pool3x3", (x,), vjp)


def upsample2x(x) -> DiffTensor:
    """Nearest-neighbour 2x upsample over the (-3, -2) spatial axes."""
    x = asdiff(x)
    *lead, h, w, c = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=-3), 2, axis=-2)

    def vjp(g):
        return (g.reshape(*lead, h, 2, w, 2, c).sum(axis=(-4, -2)),)

    return _make(out_data, "upsample2x", (x,), vjp)


# -- finite-difference oracle -------------------------------------------------


def fd_gradient(f: Callable[[DiffTensor], DiffTensor], x: DiffTensor, eps: float = 1e-3) -> Array:
    """Central-difference gradient estimate of a scalar function.

    Evaluates ``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`` per element,
    entirely independent of the backward rules.
    """
    if eps <= 0:
        raise ValueError("fd_gradient: eps must be positive")
    base = x.data
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += eps
        hi = float(f(DiffTensor(bumped.reshape(base.shape))).data)
        bumped = base.copy().reshape(-1)
        bumped[i] -= eps
        lo = float(f(DiffTensor(bumped.reshape(base.shape))).data)
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad.astype(base.dtype)


def relative_error(a: Array, b: Array) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, 1e-6)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))
