"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every primitive records its parents and a backward closure on the output
tensor. ``backward`` sorts the recorded graph topologically and runs each
closure exactly once, accumulating into ``.grad``.

Only the primitives needed by the positioning network are provided. There is
no implicit broadcasting: elementwise ops need identical shapes, and the only
broadcast is ``add_bias`` over the trailing axis.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from this scalar node into every recorded ancestor."""
        if self.data.size != 1:
            raise ShapeError("backward(non-scalar loss)", self.shape)
        order = _topo_order(self)
        for node in order:
            if node is not self:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    def __radd__(self, other):
        return add(_lift(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)


def _lift(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.full(shape, float(x)))
    return Tensor(x)


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; deep graphs would overflow the recursion limit
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# elementwise ------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a._accumulate(g * c)

    return _make(a.data * c, "scale", (a,), bw)


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """``x + b`` with the 1-D ``b`` laid along ``axis`` and broadcast elsewhere."""
    axis = axis % max(x.data.ndim, 1)
    if b.data.ndim != 1 or x.data.ndim == 0 or x.shape[axis] != b.shape[0]:
        raise ShapeError("add_bias", x.shape, b.shape)
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)
    bshape = [1] * x.data.ndim
    bshape[axis] = b.shape[0]
    bb = b.data.reshape(bshape)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=reduce_axes))

    return _make(x.data + bb, "add_bias", (x, b), bw)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)

    def bw(g):
        x._accumulate(g * (x.data > 0))

    return _make(y, "relu", (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(g):
        x._accumulate(g * y)

    return _make(y, "exp", (x,), bw)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")

    def bw(g):
        x._accumulate(g / x.data)

    return _make(np.log(x.data), "log", (x,), bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(2.0 * g * x.data)

    return _make(x.data * x.data, "square", (x,), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside the range."""
    inside = (x.data > lo) & (x.data < hi)

    def bw(g):
        x._accumulate(g * inside)

    return _make(np.clip(x.data, lo, hi), "clip", (x,), bw)


# reductions and shape ops ---------------------------------------------------------

def sum_(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), "sum", (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean(empty)", x.shape)

    def bw(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(x.data.mean()), "mean", (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(y, "reshape", (x,), bw)


def slice_(x: Tensor, idx) -> Tensor:
    y = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] += g
        x._accumulate(full)

    return _make(np.array(y, copy=True), "slice", (x,), bw)


def concat(xs: Iterable[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    ref = list(xs[0].shape)
    for t in xs[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(s)) if i != axis % len(s)):
            raise ShapeError("concat", xs[0].shape, t.shape)
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        for t, part in zip(xs, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _make(np.concatenate([t.data for t in xs], axis=axis), "concat", xs, bw)


# linear algebra ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Valid-padding, stride-1 convolution.

    ``x`` is NCHW ``(batch, c_in, height, width)`` and ``w`` is
    ``(c_out, c_in, kh, kw)``. Output is ``(batch, c_out, height-kh+1, width-kw+1)``.
    Cross-correlation (no kernel flip), as in every DL framework.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d(kernel larger than input)", x.shape, w.shape)
    # im2col rows ordered (c_in, kh, kw) to match w's memory layout
    cols = np.stack([x.data[:, :, i:i + ho, j:j + wo] for i in range(kh) for j in range(kw)], axis=2)
    cols = cols.reshape(n, cin * kh * kw, ho * wo)
    w2 = w.data.reshape(cout, cin * kh * kw)
    y = np.matmul(w2, cols).reshape(n, cout, ho, wo)

    def bw(g):
        g3 = g.reshape(n, cout, ho * wo)
        if w.requires_grad:
            w._accumulate(np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g3).reshape(n, cin, kh * kw, ho, wo)
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, i * kw + j]
            x._accumulate(dx)

    return _make(y, "conv2d", (x, w), bw)


def _window_views(x: np.ndarray, window: tuple[int, int]):
    ph, pw = window
    ho, wo = x.shape[2] // ph, x.shape[3] // pw
    return [(slice(None), slice(None), slice(i, ho * ph, ph), slice(j, wo * pw, pw))
            for i in range(ph) for j in range(pw)]


def pool_argmax(x: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    """Row-major window offset of the first maximum, per output cell."""
    views = _window_views(x, window)
    best = x[views[0]].copy()
    arg = np.zeros(best.shape, dtype=np.int64)
    for k, sl in enumerate(views[1:], start=1):
        v = x[sl]
        better = v > best
        np.copyto(best, v, where=better)
        np.copyto(arg, k, where=better)
    return arg


def maxpool2d(x: Tensor, window: tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling over the last two axes of NCHW input.

    Trailing rows/columns that do not fill a whole window are dropped. Ties
    route the gradient to the first maximum in row-major window order.
    """
    ph, pw = window
    if x.data.ndim != 4 or ph < 1 or pw < 1 or x.shape[2] < ph or x.shape[3] < pw:
        raise ShapeError("maxpool2d", x.shape, window)
    views = _window_views(x.data, window)
    best = x.data[views[0]].copy()
    for sl in views[1:]:
        np.maximum(best, x.data[sl], out=best)

    def bw(g):
        dx = np.zeros_like(x.data)
        free = np.ones(best.shape, dtype=bool)
        hit = np.empty(best.shape, dtype=bool)
        for sl in views:
            np.equal(x.data[sl], best, out=hit)
            hit &= free
            free &= ~hit
            np.copyto(dx[sl], g, where=hit)
        x._accumulate(dx)

    return _make(best, "maxpool2d", (x,), bw)


def grad(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` w.r.t. each named parameter.

    Parameters not reachable from the loss get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError("grad(non-scalar loss)", loss.shape)
    for p in params.values():
        p.grad = None
    if loss.requires_grad:
        loss.backward()
    return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
