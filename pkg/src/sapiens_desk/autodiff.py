"""Reverse-mode automatic differentiation over dense float tensors.

A Tensor wraps a numpy array plus an optional gradient buffer. Ops build a
computational graph; backward() walks it once in reverse topological order
and accumulates gradients by summation, so shared subexpressions and
broadcasting behave correctly. numpy supplies the array storage and the
inner arithmetic kernels; the graph, the backward rules, and the checking
machinery live entirely in this module.

Precision is selectable per tensor ("f32" or "f64"); gradients are kept in
the dtype of the tensor they belong to.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    NonFiniteError,
    NotScalarError,
    ShapeMismatchError,
    UnsupportedOpError,
)

__all__ = [
    "Tensor",
    "apply_op",
    "no_grad",
    "set_default_dtype",
    "get_default_dtype",
    "set_strict_nonfinite",
    "add", "sub", "mul", "div", "matmul", "power",
    "exp", "log", "sqrt", "gelu", "softmax", "layer_norm", "clamp_min",
    "reshape", "transpose", "concat", "slice_", "index_select",
    "sum_", "mean_", "l1_norm", "l2_norm", "channel_dot", "masked_select",
    "conv2d", "conv_transpose2d", "bilinear_resize",
]

DTYPES = {"f32": np.float32, "f64": np.float64}

_default_dtype = np.float32
_strict_nonfinite = False
_grad_enabled = True


def set_default_dtype(kind: str) -> None:
    """Set the dtype used when tensors are built from non-float data."""
    global _default_dtype
    if kind not in DTYPES:
        raise UnsupportedOpError(f"unknown precision {kind!r}, want f32 or f64")
    _default_dtype = DTYPES[kind]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_strict_nonfinite(flag: bool) -> None:
    """When enabled, any op producing NaN/Inf raises NonFiniteError."""
    global _strict_nonfinite
    _strict_nonfinite = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Context that skips graph construction (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- basic introspection ------------------------------------------------

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise NotScalarError(f"expected a single element, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar. Gradients accumulate by summation."""
        if self.size != 1:
            self._not_scalar()
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:  # iterative DFS, deep graphs must not hit the recursion limit
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
        # op closures capture their output node, so every graph is a ref
        # cycle; break it here or freeing waits on the cyclic collector
        # (training at realistic batch sizes then peaks gigabytes of dead
        # graphs). A graph is single-use: rebuild it to backprop again.
        for node in topo:
            node._backward = None
            node._parents = ()

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axes=None, keepdims=False):
        return sum_(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return mean_(self, axes, keepdims)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Assemble an op output node; skips graph bookkeeping under no_grad."""
    if _strict_nonfinite and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by op {op!r}")
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = rg
    out._parents = tuple(parents) if rg else ()
    out._backward = backward if rg else None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting: reduce g by summation down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    for x, y in zip(reversed(a), reversed(b)):
        if x != y and x != 1 and y != 1:
            return False
    return True


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatchError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def bwd():
        _accumulate(a, _sum_to_shape(out.grad, a.shape))
        _accumulate(b, _sum_to_shape(out.grad, b.shape))

    out = _node(out_data, (a, b), bwd, "add")
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def bwd():
        _accumulate(a, _sum_to_shape(out.grad, a.shape))
        _accumulate(b, _sum_to_shape(-out.grad, b.shape))

    out = _node(out_data, (a, b), bwd, "sub")
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def bwd():
        _accumulate(a, _sum_to_shape(out.grad * b.data, a.shape))
        _accumulate(b, _sum_to_shape(out.grad * a.data, b.shape))

    out = _node(out_data, (a, b), bwd, "mul")
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def bwd():
        with np.errstate(divide="ignore", invalid="ignore"):
            _accumulate(a, _sum_to_shape(out.grad / b.data, a.shape))
            _accumulate(b, _sum_to_shape(-out.grad * a.data / (b.data * b.data), b.shape))

    out = _node(out_data, (a, b), bwd, "div")
    return out


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a python scalar exponent."""
    p = float(p)
    with np.errstate(invalid="ignore", divide="ignore"):
        out_data = a.data ** p

    def bwd():
        with np.errstate(invalid="ignore", divide="ignore"):
            _accumulate(a, out.grad * p * a.data ** (p - 1.0))

    out = _node(out_data, (a,), bwd, "power")
    return out


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd():
        _accumulate(a, out.grad * out_data)

    out = _node(out_data, (a,), bwd, "exp")
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def bwd():
        _accumulate(a, out.grad / a.data)

    out = _node(out_data, (a,), bwd, "log")
    return out


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(a.data)

    def bwd():
        _accumulate(a, out.grad * 0.5 / out_data)

    out = _node(out_data, (a,), bwd, "sqrt")
    return out


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes through where a >= floor."""
    floor = float(floor)
    out_data = np.maximum(a.data, floor)

    def bwd():
        _accumulate(a, out.grad * (a.data >= floor))

    out = _node(out_data, (a,), bwd, "clamp_min")
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    out_data = 0.5 * x * (1.0 + t)

    def bwd():
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        g = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        _accumulate(a, out.grad * g)

    out = _node(out_data, (a,), bwd, "gelu")
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd():
        g = out.grad
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    out = _node(out_data, (a,), bwd, "softmax")
    return out


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bwd():
        g = out.grad
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g - gm - y * gy))

    out = _node(y, (a,), bwd, "layer_norm")
    return out


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out_data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeMismatchError(f"reshape: {a.shape} -> {shape}: {e}") from None

    def bwd():
        _accumulate(a, out.grad.reshape(a.shape))

    out = _node(out_data, (a,), bwd, "reshape")
    return out


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatchError(f"transpose: axes {axes} invalid for rank {a.ndim}")
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes) if axes is not None else None

    def bwd():
        _accumulate(a, np.transpose(out.grad, inv))

    out = _node(out_data, (a,), bwd, "transpose")
    return out


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    try:
        out_data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeMismatchError(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd():
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, out.grad[tuple(idx)])

    out = _node(out_data, ts, bwd, "concat")
    return out


def slice_(a: Tensor, bounds: Sequence[tuple[int | None, int | None]]) -> Tensor:
    """Slice with unit step; bounds is one (start, stop) pair per leading axis."""
    if len(bounds) > a.ndim:
        raise ShapeMismatchError(f"slice: {len(bounds)} bounds for rank {a.ndim}")
    sl = tuple(slice(lo, hi) for lo, hi in bounds)
    out_data = a.data[sl]

    def bwd():
        g = np.zeros_like(a.data)
        g[sl] = out.grad
        _accumulate(a, g)

    out = _node(out_data, (a,), bwd, "slice")
    return out


def index_select(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along an axis; `indices` must have the same rank as `a`
    (take_along_axis semantics). Backward scatter-adds, so duplicate
    indices accumulate."""
    idx = np.asarray(indices)
    if idx.ndim != a.ndim:
        raise ShapeMismatchError(
            f"index_select: indices rank {idx.ndim} != tensor rank {a.ndim}")
    out_data = np.take_along_axis(a.data, idx, axis=axis)

    def bwd():
        g = np.zeros_like(a.data)
        grids = list(np.indices(idx.shape, sparse=True))
        grids[axis] = idx
        np.add.at(g, tuple(grids), out.grad)
        _accumulate(a, g)

    out = _node(out_data, (a,), bwd, "index_select")
    return out


def masked_select(a: Tensor, mask: np.ndarray) -> Tensor:
    """Select elements where a boolean mask is true; returns a 1-D tensor."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ShapeMismatchError(f"masked_select: mask {m.shape} vs tensor {a.shape}")
    out_data = a.data[m]

    def bwd():
        g = np.zeros_like(a.data)
        g[m] = out.grad
        _accumulate(a, g)

    out = _node(out_data, (a,), bwd, "masked_select")
    return out


# -- reductions ---------------------------------------------------------------


def _norm_axes(axes, ndim):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def sum_(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd():
        g = out.grad
        if not keepdims:
            g = np.reshape(g, _keepdims_shape(a.shape, axes))
        _accumulate(a, np.broadcast_to(g, a.shape))

    out = _node(out_data, (a,), bwd, "sum")
    return out


def mean_(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    out_data = a.data.mean(axis=axes, keepdims=keepdims)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))

    def bwd():
        g = out.grad
        if not keepdims:
            g = np.reshape(g, _keepdims_shape(a.shape, axes))
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    out = _node(out_data, (a,), bwd, "mean")
    return out


def _keepdims_shape(shape, axes):
    if axes is None:
        return (1,) * len(shape)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def l1_norm(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum of absolute values. Subgradient at 0 is taken as 0."""
    axes = _norm_axes(axes, a.ndim)
    out_data = np.abs(a.data).sum(axis=axes, keepdims=keepdims)

    def bwd():
        g = out.grad
        if not keepdims:
            g = np.reshape(g, _keepdims_shape(a.shape, axes))
        _accumulate(a, np.broadcast_to(g, a.shape) * np.sign(a.data))

    out = _node(out_data, (a,), bwd, "l1_norm")
    return out


def l2_norm(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm over the given axes. Gradient at exactly 0 is 0."""
    axes = _norm_axes(axes, a.ndim)
    sq = (a.data * a.data).sum(axis=axes, keepdims=True)
    root = np.sqrt(sq)
    out_data = root if keepdims else root.reshape(
        a.data.sum(axis=axes, keepdims=keepdims).shape)

    def bwd():
        g = out.grad
        if not keepdims:
            g = np.reshape(g, _keepdims_shape(a.shape, axes))
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(root > 0.0, np.broadcast_to(g, root.shape) / root, 0.0)
        _accumulate(a, a.data * np.broadcast_to(scale, a.shape))

    out = _node(out_data, (a,), bwd, "l2_norm")
    return out


def channel_dot(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    """Dot product over one axis: sum(a * b, axis). Shapes must match."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"channel_dot: {a.shape} vs {b.shape}")
    axis = axis % a.ndim
    out_data = (a.data * b.data).sum(axis=axis)

    def bwd():
        g = np.expand_dims(out.grad, axis)
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    out = _node(out_data, (a, b), bwd, "channel_dot")
    return out


# -- matrix product -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul: operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dims {a.shape} @ {b.shape}")
    if not _broadcastable(a.shape[:-2], b.shape[:-2]):
        raise ShapeMismatchError(f"matmul: batch dims {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bwd():
        ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
        _accumulate(a, _sum_to_shape(ga, a.shape))
        _accumulate(b, _sum_to_shape(gb, b.shape))

    out = _node(out_data, (a, b), bwd, "matmul")
    return out


# -- convolution --------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            ph: int, pw: int) -> tuple[np.ndarray, int, int]:
    """Unfold NCHW into [N, C*kh*kw, OH*OW] patch columns."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]  # [N, C, OH, OW, kh, kw]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols: np.ndarray, n: int, c: int, h: int, w: int, kh: int, kw: int,
            sh: int, sw: int, ph: int, pw: int, oh: int, ow: int) -> np.ndarray:
    """Fold [N, C*kh*kw, OH*OW] columns back onto an NCHW canvas, summing
    overlaps. (h, w) is the unpadded canvas size; (oh, ow) the column grid."""
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    g = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += g[:, :, i, j]
    if ph or pw:
        out = out[:, :, ph:ph + h, pw:pw + w]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """2-D convolution on NCHW input; weight is [C_out, C_in, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError("conv2d: input and weight must be rank 4")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(
            f"conv2d: {x.shape[1]} input channels vs weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    co, _, kh, kw = weight.shape
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeMismatchError(f"conv2d: kernel {kh}x{kw} exceeds padded input")
    cols, oh, ow = _im2col(x.data, kh, kw, sh, sw, ph, pw)
    wf = weight.data.reshape(co, -1)
    out_data = np.matmul(wf, cols).reshape(n, co, oh, ow)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, co, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd():
        go = out.grad.reshape(n, co, oh * ow)
        gw = np.einsum("nol,nkl->ok", go, cols).reshape(weight.shape)
        _accumulate(weight, gw)
        if bias is not None:
            _accumulate(bias, out.grad.sum(axis=(0, 2, 3)))
        gcols = np.matmul(wf.T, go)
        _accumulate(x, _col2im(gcols, n, c, h, w, kh, kw, sh, sw, ph, pw, oh, ow))

    out = _node(out_data, parents, bwd, "conv2d")
    return out


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride=1, padding=0) -> Tensor:
    """Transposed 2-D convolution (the adjoint of conv2d with the same
    stride/padding); weight is [C_in, C_out, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError("conv_transpose2d: input and weight must be rank 4")
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatchError(
            f"conv_transpose2d: {x.shape[1]} input channels vs weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, ci, h, w = x.shape
    _, co, kh, kw = weight.shape
    oh = (h - 1) * sh - 2 * ph + kh
    ow = (w - 1) * sw - 2 * pw + kw
    if oh <= 0 or ow <= 0:
        raise ShapeMismatchError("conv_transpose2d: non-positive output size")
    xf = x.data.reshape(n, ci, h * w)
    wf = weight.data.reshape(ci, co * kh * kw)
    cols = np.einsum("ck,ncl->nkl", wf, xf)
    out_data = _col2im(cols, n, co, oh, ow, kh, kw, sh, sw, ph, pw, h, w)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, co, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd():
        gcols, _, _ = _im2col(out.grad, kh, kw, sh, sw, ph, pw)
        _accumulate(x, np.einsum("ck,nkl->ncl", wf, gcols).reshape(x.shape))
        gw = np.einsum("ncl,nkl->ck", xf, gcols).reshape(weight.shape)
        _accumulate(weight, gw)
        if bias is not None:
            _accumulate(bias, out.grad.sum(axis=(0, 2, 3)))

    out = _node(out_data, parents, bwd, "conv_transpose2d")
    return out


# -- resampling ---------------------------------------------------------------


def _bilinear_plan(src: int, dst: int):
    """Sample positions for half-pixel-centre bilinear resize, edge-clamped."""
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo0 = np.clip(lo, 0, src - 1)
    lo1 = np.clip(lo + 1, 0, src - 1)
    return lo0, lo1, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of NCHW maps. Identity when sizes match, and constant
    inputs stay constant (weights are convex)."""
    if x.ndim != 4:
        raise ShapeMismatchError("bilinear_resize: input must be rank 4 (NCHW)")
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError("bilinear_resize: output size must be positive")
    n, c, h, w = x.shape
    y0, y1, fy = _bilinear_plan(h, out_h)
    x0, x1, fx = _bilinear_plan(w, out_w)
    fy = fy.astype(x.data.dtype)[None, None, :, None]
    fx = fx.astype(x.data.dtype)[None, None, None, :]
    d = x.data
    tl = d[:, :, y0][:, :, :, x0]
    tr = d[:, :, y0][:, :, :, x1]
    bl = d[:, :, y1][:, :, :, x0]
    br = d[:, :, y1][:, :, :, x1]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    out_data = top + (bot - top) * fy

    def bwd():
        g = out.grad
        w_tl = (1 - fy) * (1 - fx)
        w_tr = (1 - fy) * fx
        w_bl = fy * (1 - fx)
        w_br = fy * fx
        gx = np.zeros_like(x.data)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        yy0 = y0[None, None, :, None]
        yy1 = y1[None, None, :, None]
        xx0 = x0[None, None, None, :]
        xx1 = x1[None, None, None, :]
        np.add.at(gx, (ni, ci, yy0, xx0), g * w_tl)
        np.add.at(gx, (ni, ci, yy0, xx1), g * w_tr)
        np.add.at(gx, (ni, ci, yy1, xx0), g * w_bl)
        np.add.at(gx, (ni, ci, yy1, xx1), g * w_br)
        _accumulate(x, gx)

    out = _node(out_data, (x,), bwd, "bilinear_resize")
    return out


# -- dispatch table -----------------------------------------------------------

_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "power": power,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "clamp_min": clamp_min,
    "gelu": gelu,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "slice": slice_,
    "index_select": index_select,
    "masked_select": masked_select,
    "sum": sum_,
    "mean": mean_,
    "l1_norm": l1_norm,
    "l2_norm": l2_norm,
    "channel_dot": channel_dot,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "bilinear_resize": bilinear_resize,
}


def apply_op(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Dispatch an op by name. Unknown kinds raise UnsupportedOpError."""
    fn = _OPS.get(kind)
    if fn is None:
        raise UnsupportedOpError(f"unknown op kind {kind!r}")
    attrs = attrs or {}
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
