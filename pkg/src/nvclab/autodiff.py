"""Dense tensors with reverse-mode differentiation on marked leaves.

Only tensors created with ``requires_grad=True`` (and the results computed
from them) enter the graph; everything else is a constant.  Network
parameters are therefore frozen unless explicitly marked, which is exactly
what latent refinement needs.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

__all__ = [
    "Tensor",
    "Graph",
    "NonFiniteError",
    "precision",
    "get_dtype",
    "as_tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "leaky_relu",
    "square",
    "atanh",
    "exp",
    "log",
    "clamp",
    "abs_",
    "sigmoid",
    "softplus",
    "ndtr",
    "maximum_const",
    "tsum",
    "tmean",
    "concat",
    "conv2d",
]

_DTYPE = np.float32
_SEQ = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch working precision ("float32" or "float64")."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unknown precision {name!r}")
    old = _DTYPE
    _DTYPE = np.dtype(name).type
    try:
        yield
    finally:
        _DTYPE = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "seq")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray):
            arr = np.asarray(data, dtype=_DTYPE)
            if not arr.flags.c_contiguous:
                arr = arr.copy()
        else:
            arr = np.array(data, dtype=_DTYPE)
        if arr.ndim and min(arr.shape) == 0:
            raise ValueError(f"empty extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.parents: tuple = ()
        self.backward_fn = None
        self.op = "leaf"
        self.seq = next(_SEQ)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    data = np.asarray(data)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), bw)


# ----------------------------------------------------------------- unary ops

def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = _DTYPE(c)
    return _result(x.data * c, "scale", (x,), lambda g: (g * c,))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _result(-x.data, "neg", (x,), lambda g: (-g,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    slope = _DTYPE(slope)
    pos = x.data > 0
    return _result(np.where(pos, x.data, slope * x.data), "leaky_relu", (x,),
                   lambda g: (np.where(pos, g, slope * g),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, "square", (x,), lambda g: (2 * x.data * g,))


def atanh(x) -> Tensor:
    x = as_tensor(x)
    if np.any(np.abs(x.data) >= 1):
        raise ValueError("atanh argument outside (-1, 1)")
    return _result(np.arctanh(x.data), "atanh", (x,), lambda g: (g / (1 - x.data * x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    return _result(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def clamp(x, lo=None, hi=None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    passed = out == x.data
    return _result(out, "clamp", (x,), lambda g: (np.where(passed, g, 0),))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sgn = np.sign(x.data)
    return _result(np.abs(x.data), "abs", (x,), lambda g: (g * sgn,))


def maximum_const(x, floor: float) -> Tensor:
    """``max(x, floor)`` with a constant floor."""
    x = as_tensor(x)
    above = x.data > floor
    out = np.where(above, x.data, _DTYPE(floor))
    return _result(out, "maximum_const", (x,), lambda g: (np.where(above, g, 0),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = special.expit(x.data)
    return _result(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0, x.data)
    return _result(out, "softplus", (x,), lambda g: (g * special.expit(x.data),))


_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def ndtr(x) -> Tensor:
    """Standard normal CDF."""
    x = as_tensor(x)
    return _result(special.ndtr(x.data), "ndtr", (x,),
                   lambda g: (g * _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data),))


# ---------------------------------------------------------------- reductions

def tsum(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.sum(x.data), "sum", (x,), lambda g: (np.broadcast_to(g, x.shape),))


def tmean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _result(np.mean(x.data), "mean", (x,),
                   lambda g: (np.broadcast_to(g / _DTYPE(n), x.shape),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=axis), "concat", parts, bw)


# --------------------------------------------------------------- convolution

def _im2col(x: np.ndarray, k: int, stride: int, out_hw: tuple) -> np.ndarray:
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    ho, wo = out_hw
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    c = x.shape[0]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)


def _col2im(cols: np.ndarray, channels: int, hw: tuple, k: int, stride: int,
            out_hw: tuple) -> np.ndarray:
    p = (k - 1) // 2
    h, w = hw
    ho, wo = out_hw
    xp = np.zeros((channels, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    cols = cols.reshape(channels, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    return xp[:, p:p + h, p:p + w]


def conv2d(x, kernel, bias=None, stride: int = 1, transposed: bool = False) -> Tensor:
    """Zero-padded 2-D cross-correlation on a ``[C, H, W]`` input.

    ``kernel`` is ``[C_out, C_in, k, k]`` in both modes.  The transposed form is
    the exact adjoint of the strided convolution mapping ``H*stride`` back to
    ``H``, so it upsamples by ``stride``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    bias = None if bias is None else as_tensor(bias)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError(f"shape mismatch: input {x.shape}, kernel {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kernel.shape}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.shape[0] != c_in:
        raise ValueError(f"shape mismatch: input has {x.shape[0]} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"shape mismatch: bias {bias.shape} for {c_out} outputs")
    _, h, w = x.shape
    kmat = kernel.data.reshape(c_out, c_in * k * k)

    if not transposed:
        ho, wo = -(-h // stride), -(-w // stride)
        cols = _im2col(x.data, k, stride, (ho, wo))
        out = (kmat @ cols).reshape(c_out, ho, wo)

        def bw(g):
            gm = g.reshape(c_out, ho * wo)
            gx = _col2im(kmat.T @ gm, c_in, (h, w), k, stride, (ho, wo)) if x.requires_grad else None
            gk = (gm @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
            gb = gm.sum(axis=1) if bias is not None and bias.requires_grad else None
            return gx, gk, gb
    else:
        ho, wo = h * stride, w * stride
        # adjoint of a stride-s conv [c_out, ho, wo] -> [c_in, h, w]
        adj = kernel.data.transpose(1, 0, 2, 3).reshape(c_in, c_out * k * k)
        xm = x.data.reshape(c_in, h * w)
        out = _col2im(adj.T @ xm, c_out, (ho, wo), k, stride, (h, w))

        def bw(g):
            gcols = _im2col(g, k, stride, (h, w))
            gx = (adj @ gcols).reshape(x.shape) if x.requires_grad else None
            gk = None
            if kernel.requires_grad:
                gk = (xm @ gcols.T).reshape(c_in, c_out, k, k).transpose(1, 0, 2, 3)
            gb = g.reshape(c_out, -1).sum(axis=1) if bias is not None and bias.requires_grad else None
            return gx, gk, gb

    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    backward_fn = bw if bias is not None else (lambda g: bw(g)[:2])
    return _result(out.astype(_DTYPE, copy=False), "conv2d_t" if transposed else "conv2d",
                   parents, backward_fn)


# ------------------------------------------------------------------ backward

@dataclass
class Graph:
    """Operations reachable from an output, in topological (creation) order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen, stack, nodes = set(), [out], []
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t.parents)
        nodes.sort(key=lambda t: t.seq)
        return cls(nodes)

    @property
    def ops(self) -> list:
        return [t.op for t in self.nodes if not t.is_leaf]

    @property
    def leaves(self) -> list:
        return [t for t in self.nodes if t.is_leaf]


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict:
    """Fill ``leaf.grad`` with d(loss)/d(leaf) and return ``{id(leaf): grad}``."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    graph = Graph.from_output(loss)
    in_graph = {id(t) for t in graph.leaves}
    if leaves is None:
        leaves = graph.leaves
    leaves = list(leaves)
    for leaf in leaves:
        if id(leaf) not in in_graph:
            raise ValueError("leaf did not participate in the graph producing loss")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None) if not node.is_leaf else None
        if node.is_leaf or g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=parent.data.dtype)

    out = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.data.dtype).reshape(leaf.shape)
        out[id(leaf)] = leaf.grad
    return out
