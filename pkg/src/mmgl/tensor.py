"""Dense tensors with reverse-mode automatic differentiation.

Eager numpy-backed execution: every primitive computes its value
immediately and, when gradients are enabled, records a backward closure.
``backward()`` on a scalar walks the recorded nodes once, in reverse
execution order, accumulating gradients into the ``grad`` buffer of every
leaf created with ``requires_grad=True``.

Two precisions are supported per tensor: float32 (training default) and
float64 (used by the finite-difference gradient checks, which are not
reliable in single precision). Operands of a binary op must share dtype.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "DegenerateVectorError",
    "NonFiniteError",
    "no_grad",
    "set_finite_checks",
    "finite_checks_enabled",
    "set_gradient_corruption",
    "matmul",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "concatenate",
    "trace",
    "exp",
    "log",
    "sqrt",
    "relu",
    "take_rows",
]


class ShapeError(ValueError):
    """Operand shapes (or dtypes) violate a primitive's contract."""


class GraphError(RuntimeError):
    """Misuse of the gradient graph (non-scalar loss, double backward, ...)."""


class DegenerateVectorError(ValueError):
    """A vector slice with near-zero norm was fed to l2_normalize."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf while finite checks were enabled."""


_seq_counter = itertools.count()

# Process-wide switches. Training is confined to one logical thread (see the
# concurrency notes in the trainer), so plain module globals suffice.
_GRAD_ENABLED = True
_FINITE_CHECKS = True

# Name of a primitive whose analytic backward is deliberately scaled by 1.01.
# Testing seam for the gradcheck CLI's sensitivity contract; never set in
# normal operation.
_CORRUPT_PRIMITIVE: str | None = None


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf assertion that runs after every primitive."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


def set_gradient_corruption(name: str | None) -> None:
    global _CORRUPT_PRIMITIVE
    _CORRUPT_PRIMITIVE = name


@contextmanager
def no_grad():
    """Disable graph recording inside the block (outputs are detached)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _corruption_factor(op: str) -> float:
    return 1.01 if _CORRUPT_PRIMITIVE == op else 1.0


class Tensor:
    """A dense n-d array that participates in a reverse-mode gradient graph.

    Tensors are immutable after creation except for ``grad`` (and the
    trainer's in-place parameter updates between steps). ``data`` is always
    a contiguous float32 or float64 array.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrapping a Tensor in a Tensor is not supported; use detach()")
        if dtype is None:
            dtype = np.float32
        arr = np.ascontiguousarray(data, dtype=dtype)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._seq = next(_seq_counter)

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward_fn is None and not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array. Callers must not mutate it."""
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- gradient machinery ---------------------------------------------

    def detach(self) -> "Tensor":
        """A view of the same data cut out of the graph.

        Anything computed from the detached tensor treats it as a constant;
        backward silently stops there.
        """
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward_fn = None
        out._seq = next(_seq_counter)
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from here.

        The node list is traversed exactly once, in reverse execution order.
        Contributions to the same buffer sum. Unless ``retain_graph`` is set
        the graph is consumed: a second backward raises ``GraphError``.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_fn is None:
            raise GraphError(
                "loss is not attached to a graph (leaf, detached, or already consumed)"
            )

        # Collect reachable recorded nodes; reverse execution order is a
        # topological order because a node is always created after its inputs.
        visited: set[int] = set()
        nodes: list[Tensor] = []
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in visited:
                continue
            visited.add(id(t))
            nodes.append(t)
            for p in t._parents:
                if id(p) not in visited:
                    stack.append(p)
        nodes.sort(key=lambda t: t._seq, reverse=True)

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is not None:
                contribs = node._backward_fn(g)
                for parent, contrib in zip(node._parents, contribs):
                    if contrib is None or not parent.requires_grad:
                        continue
                    buf = grads.get(id(parent))
                    if buf is None:
                        grads[id(parent)] = contrib.copy() if contrib is g else contrib
                    else:
                        buf += contrib
            elif node.requires_grad and not node._parents:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g

        if not retain_graph:
            for node in nodes:
                if node._backward_fn is not None:
                    node._backward_fn = None
                    node._parents = ()

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap a primitive's result, recording the node when gradients flow."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq_counter)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _check_dtypes(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype.name} vs {b.data.dtype.name}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes("add", a, b)
    out = a.data + b.data
    f = _corruption_factor("add")

    def bw(g):
        return (_unbroadcast(g, a.shape) * f, _unbroadcast(g, b.shape))

    return _make(out, "add", (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes("sub", a, b)
    out = a.data - b.data

    def bw(g):
        return (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape))

    return _make(out, "sub", (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes("mul", a, b)
    out = a.data * b.data
    f = _corruption_factor("mul")

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) * f,
            _unbroadcast(g * a.data, b.shape),
        )

    return _make(out, "mul", (a, b), bw)


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return _make(out, "div", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    f = _corruption_factor("exp")

    def bw(g):
        return (g * out * f,)

    return _make(out, "exp", (a,), bw)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _make(out, "log", (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        return (g / (2.0 * out),)

    return _make(out, "sqrt", (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bw(g):
        return (g * (a.data > 0),)

    return _make(out, "relu", (a,), bw)


def cast(a: Tensor, dtype) -> Tensor:
    """Precision change with an identity (re-cast) gradient."""
    dtype = np.dtype(dtype)
    if dtype == a.data.dtype:
        return a
    out = a.data.astype(dtype)

    def bw(g):
        return (g.astype(a.data.dtype),)

    return _make(out, "cast", (a,), bw)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, optionally stacked over identical leading batch dims."""
    _check_dtypes("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    f = _corruption_factor("matmul")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) * f if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (ga, gb)

    return _make(out, "matmul", (a, b), bw)


def trace(a: Tensor) -> Tensor:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"trace needs a square matrix, got {a.shape}")
    out = np.trace(a.data).reshape(())

    def bw(g):
        return (np.eye(a.shape[0], dtype=a.data.dtype) * g,)

    return _make(out, "trace", (a,), bw)


# -- normalizations ----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction for stability."""
    ax = axis if axis >= 0 else x.ndim + axis
    if ax < 0 or ax >= x.ndim or x.shape[ax] == 0:
        raise ShapeError(f"softmax: invalid or empty axis {axis} for shape {x.shape}")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)
    f = _corruption_factor("softmax")

    def bw(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return ((g - dot) * out * f,)

    return _make(out, "softmax", (x,), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale each slice along ``axis`` to unit Euclidean norm.

    A slice whose norm falls below ``eps`` signals a collapsed embedding and
    raises ``DegenerateVectorError`` instead of dividing by almost-zero.
    """
    ax = axis if axis >= 0 else x.ndim + axis
    if ax < 0 or ax >= x.ndim:
        raise ShapeError(f"l2_normalize: invalid axis {axis} for shape {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=ax, keepdims=True))
    if (norm < eps).any():
        raise DegenerateVectorError(
            f"l2_normalize: slice norm below {eps:g} (min {norm.min():.3e})"
        )
    out = x.data / norm
    f = _corruption_factor("l2_normalize")

    def bw(g):
        # Quotient rule: d(x/n)/dx = I/n - x x^T / n^3, applied slice-wise.
        dot = (g * x.data).sum(axis=ax, keepdims=True)
        return ((g / norm - x.data * (dot / norm**3)) * f,)

    return _make(out, "l2_normalize", (x,), bw)


# -- reductions --------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a if a >= 0 else ndim + a for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes or None, keepdims=keepdims)
    f = _corruption_factor("sum")

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype) * f,)

    return _make(np.asarray(out), "sum", (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes or None, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return ((np.broadcast_to(g, x.shape) / count).astype(x.data.dtype),)

    return _make(np.asarray(out), "mean", (x,), bw)


# -- shape manipulation -------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(out, "reshape", (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _make(out, "transpose", (x,), bw)


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concatenate of empty sequence")
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError("concatenate: mixed dtypes")
    ax = axis if axis >= 0 else tensors[0].ndim + axis
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        pieces = []
        for i in range(len(sizes)):
            key = [slice(None)] * g.ndim
            key[ax] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(key)])
        return tuple(pieces)

    return _make(out, "concatenate", tuple(tensors), bw)


def tslice(x: Tensor, key) -> Tensor:
    """Basic slicing (slices and ints only; no boolean/array indexing)."""
    out = np.ascontiguousarray(x.data[key])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _make(out, "slice", (x,), bw)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; repeated indices sum their gradients."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.ascontiguousarray(x.data[idx])

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, "take_rows", (x,), bw)


def im2col(x: Tensor, kernel: int, stride: int, pad: int) -> Tensor:
    """Unfold [B, C, H, W] into convolution patches [B, H_o, W_o, k*k*C].

    Patch columns are ordered offset-major (kernel offset, then channel),
    matching the weight layout of the conv blocks. Zero padding is applied
    symmetrically before unfolding. One fused node keeps the backward pass
    to a single scatter-add buffer.
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col expects [B, C, H, W], got {x.shape}")
    b, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = h + 2 * pad, w + 2 * pad
    h_o = (hp - kernel) // stride + 1
    w_o = (wp - kernel) // stride + 1
    if h_o < 1 or w_o < 1:
        raise ShapeError(f"im2col output empty for input {x.shape}, kernel {kernel}, stride {stride}")
    out = np.empty((b, h_o, w_o, kernel * kernel * c), dtype=x.data.dtype)
    for off, (di, dj) in enumerate((i, j) for i in range(kernel) for j in range(kernel)):
        view = xp[:, :, di : di + stride * (h_o - 1) + 1 : stride,
                  dj : dj + stride * (w_o - 1) + 1 : stride]
        out[..., off * c : (off + 1) * c] = view.transpose(0, 2, 3, 1)

    def bw(g):
        gxp = np.zeros((b, c, hp, wp), dtype=x.data.dtype)
        for off, (di, dj) in enumerate((i, j) for i in range(kernel) for j in range(kernel)):
            gxp[:, :, di : di + stride * (h_o - 1) + 1 : stride,
                dj : dj + stride * (w_o - 1) + 1 : stride] += g[
                ..., off * c : (off + 1) * c
            ].transpose(0, 3, 1, 2)
        return (gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp,)

    return _make(out, "im2col", (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax composed from primitives.

    The max shift enters as a detached constant, which leaves the gradient
    exact while keeping exp in range.
    """
    ax = axis if axis >= 0 else x.ndim + axis
    if ax < 0 or ax >= x.ndim or x.shape[ax] == 0:
        raise ShapeError(f"log_softmax: invalid or empty axis {axis} for shape {x.shape}")
    shift = Tensor(x.data.max(axis=ax, keepdims=True), dtype=x.dtype)
    centered = x - shift
    return centered - log(tsum(exp(centered), axis=ax, keepdims=True))
