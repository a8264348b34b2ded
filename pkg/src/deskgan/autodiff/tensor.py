"""Dense tensors with reverse-mode differentiation.

Every op records a :class:`Node` holding its parents and a vector-Jacobian
product.  The vjps of the critic-path ops are written in terms of other
tensor ops, so running a backward pass with ``create_graph=True`` records
the backward computation itself and the resulting gradients can be
differentiated again (needed for the gradient penalty).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or inf.

    Raised eagerly so the trainer can roll back instead of silently
    propagating garbage.
    """

    def __init__(self, op: str):
        super().__init__(f"non-finite result in '{op}'")
        self.op = op


class DoubleBackwardError(RuntimeError):
    """A first-order-only op was traversed while recording a backward pass."""


_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def set_grad_enabled(flag: bool):
    prev = is_grad_enabled()
    _mode.enabled = flag
    try:
        yield
    finally:
        _mode.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Node:
    __slots__ = ("op", "parents", "vjp", "higher_order")

    def __init__(self, op, parents, vjp, higher_order=True):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.higher_order = higher_order


class Tensor:
    """Immutable dense array with optional gradient tracking.

    ``data`` is never modified in place after construction; ops always
    allocate new buffers.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm)

    @property
    def T(self):
        return transpose(self, (1, 0))


def _raise_not_scalar():
    raise ShapeError("item() requires a single-element tensor")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(op: str, data: np.ndarray, parents: tuple, vjp: Callable, higher_order: bool = True) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if track:
        out.requires_grad = True
        out.node = Node(op, parents, vjp, higher_order)
    return out


def _const_like(value: np.ndarray, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=ref.dtype))


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return add_scalar(a, b)
    _check_same(a, b, "add")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make("add_scalar", a.data + c, (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (neg(g),))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return add_scalar(a, -b)
    _check_same(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, neg(g)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make("scale", a.data * c, (a,), lambda g: (scale(g, c),))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    return _make("mul", a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)))


def div(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / b)
    _check_same(a, b, "div")

    def vjp(g):
        ga = div(g, b)
        return ga, neg(div(mul(ga, a), b))

    return _make("div", a.data / b.data, (a, b), vjp)


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (mul(g, scale(a, 2.0)),))


def sqrt(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        raise NonFiniteError("sqrt")
    out_data = np.sqrt(a.data)

    def vjp(g):
        return (div(g, scale(out, 2.0)),)

    out = _make("sqrt", out_data, (a,), vjp)
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    mask = np.where(pos, 1.0, slope).astype(a.dtype)
    return _make("leaky_relu", a.data * mask, (a,), lambda g: (mul(g, _const_like(mask, g)),))


# first-order only: their vjps are computed outside the graph


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    s = s.astype(a.dtype)
    return _make("sigmoid", s, (a,), lambda g: (_const_like(g.data * s * (1 - s), g),), higher_order=False)


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NonFiniteError("log")
    return _make("log", np.log(a.data), (a,), lambda g: (_const_like(g.data / a.data, g),), higher_order=False)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _make("exp", e, (a,), lambda g: (_const_like(g.data * e, g),), higher_order=False)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    data = a.data.sum(axis=axes, keepdims=keepdims, dtype=a.dtype)

    def vjp(g):
        return (expand(reshape(g, kept_shape), a.shape),)

    return _make("sum", np.asarray(data), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    src = a.shape
    return _make("reshape", data, (a,), lambda g: (reshape(g, src),))


def transpose(a: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))
    return _make("transpose", a.data.transpose(perm), (a,), lambda g: (transpose(g, inv),))


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast singleton axes of ``a`` up to ``shape`` (same rank)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    if a.ndim != len(shape) or any(s != 1 and s != t for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _make("expand", data, (a,), lambda g: (tsum(g, axes, keepdims=True),))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis %= a.ndim
    full = a.shape[axis]
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    data = np.ascontiguousarray(a.data[tuple(idx)])
    return _make("slice", data, (a,), lambda g: (embed_axis(g, axis, start, full),))


def embed_axis(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Zero-pad ``a`` along ``axis`` so it occupies ``[start, start+n)`` of ``length``."""
    axis %= a.ndim
    n = a.shape[axis]
    shape = list(a.shape)
    shape[axis] = length
    data = np.zeros(shape, dtype=a.dtype)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + n)
    data[tuple(idx)] = a.data
    return _make("embed", data, (a,), lambda g: (slice_axis(g, axis, start, start + n),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    axis %= tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            i != axis and s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape))
        ):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(slice_axis(g, axis, int(bounds[i]), int(bounds[i + 1])) for i in range(len(tensors)))

    return _make("concat", data, tensors, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ {a.shape} @ {b.shape}")

    def vjp(g):
        return matmul(g, transpose(b, (1, 0))), matmul(transpose(a, (1, 0)), g)

    return _make("matmul", a.data @ b.data, (a, b), vjp)


# ---------------------------------------------------------------------------
# image ops


def _unfold_np(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))  # n c h w k k
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * h * w)


def _fold_np(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    n, c, h, w = shape
    p = k // 2
    g = cols.reshape(c, k, k, n, h, w)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + h, j:j + w] += g[:, i, j].transpose(1, 0, 2, 3)
    return out[:, :, p:p + h, p:p + w] if p else out


def unfold(x: Tensor, k: int) -> Tensor:
    """Zero-padded ``k x k`` patch matrix of shape ``(C*k*k, N*H*W)``."""
    if x.ndim != 4:
        raise ShapeError("unfold expects NCHW input")
    if k % 2 != 1:
        raise ShapeError("kernel size must be odd")
    shape = x.shape
    return _make("unfold", _unfold_np(x.data, k), (x,), lambda g: (fold(g, shape, k),))


def fold(cols: Tensor, shape, k: int) -> Tensor:
    """Adjoint of :func:`unfold`: scatter-add patches back into an image."""
    shape = tuple(shape)
    return _make("fold", _fold_np(cols.data, shape, k), (cols,), lambda g: (unfold(g, k),))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded, stride-1 cross-correlation of NCHW input with (Cout,Cin,k,k)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    n, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if k != k2:
        raise ShapeError("conv2d: kernel must be square")
    if k == 1:
        cols = reshape(transpose(x, (1, 0, 2, 3)), (cin, n * h * w))
    else:
        cols = unfold(x, k)
    out = matmul(reshape(kernel, (cout, cin * k * k)), cols)
    if bias is not None:
        out = add(out, expand(reshape(bias, (cout, 1)), out.shape))
    return transpose(reshape(out, (cout, n, h, w)), (1, 0, 2, 3))


def _up2_np(x):
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def _down2_np(x):
    return (x[..., 0::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 0::2] + x[..., 1::2, 1::2]) * x.dtype.type(0.25)


def up2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    return _make("up2", _up2_np(x.data), (x,), lambda g: (scale(down2(g), 4.0),))


def down2(x: Tensor) -> Tensor:
    """2x2 mean pooling of the last two axes."""
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"down2 needs even spatial extents, got {x.shape[-2:]}")
    return _make("down2", _down2_np(x.data), (x,), lambda g: (scale(up2(g), 0.25),))


def resample(x: Tensor, mode: str) -> Tensor:
    if mode == "up2":
        return up2(x)
    if mode == "down2":
        return down2(x)
    raise ValueError(f"unknown resample mode {mode!r}")


def pixelnorm(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalise each pixel's channel vector to unit RMS."""
    ms = mean(square(a), axis=1, keepdims=True)
    return div(a, expand(sqrt(add_scalar(ms, eps)), a.shape))


def minibatch_stddev(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Append a feature map holding the average across-batch (population) stddev."""
    n, c, h, w = a.shape
    mu = mean(a, axis=0, keepdims=True)
    var = mean(square(sub(a, expand(mu, a.shape))), axis=0, keepdims=True)
    sd = sqrt(add_scalar(var, eps))
    stat = mean(sd, axis=(1, 2, 3), keepdims=True)
    return concat([a, expand(stat, (n, 1, h, w))], axis=1)


# ---------------------------------------------------------------------------
# backward


class Tape:
    """The recorded computation reachable from an output, in topological order.

    Nodes are linked through their parents, so the order is recovered from
    the output on demand; the references can only point backwards.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.order: list[Tensor] = []
        self.leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.order.append(t)
                continue
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            if t.node is None:
                self.leaves.append(t)
                continue
            stack.append((t, True))
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.order]

    def run(self, seed: Tensor, create_graph: bool) -> dict[int, Tensor]:
        grads: dict[int, Tensor] = {id(self.output): seed}
        with set_grad_enabled(create_graph):
            for t in reversed(self.order):
                g = grads.pop(id(t), None)
                if g is None:
                    continue
                node = t.node
                if create_graph and not node.higher_order:
                    raise DoubleBackwardError(f"op '{node.op}' does not support double backprop")
                for p, gp in zip(node.parents, node.vjp(g)):
                    if gp is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = gp if prev is None else add(prev, gp)
        return grads


def _seed_for(output: Tensor) -> Tensor:
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    return Tensor(np.ones(output.shape, dtype=output.dtype))


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``output`` w.r.t. ``inputs``.

    Inputs not reached by the graph get zero gradients.  With
    ``create_graph`` the returned tensors are themselves differentiable.
    """
    inputs = list(inputs)
    if not output.requires_grad:
        return [Tensor(np.zeros_like(x.data)) for x in inputs]
    tape = Tape(output)
    grads = tape.run(_seed_for(output), create_graph)
    out = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            g = Tensor(np.zeros_like(x.data))
        elif not create_graph:
            g = g.detach()
        out.append(g)
    return out


def backward(output: Tensor, create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Gradient for every grad-enabled leaf reachable from ``output``.

    Also accumulates into each leaf's ``.grad``.
    """
    tape = Tape(output)
    if not output.requires_grad:
        return {}
    grads = tape.run(_seed_for(output), create_graph)
    result = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = Tensor(np.zeros_like(leaf.data))
        if not create_graph:
            g = g.detach()
        leaf.grad = g if leaf.grad is None else add(leaf.grad, g)
        result[leaf] = g
    return result
