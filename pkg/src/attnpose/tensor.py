"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (attention encoders, losses, the training loop) is
built on this module. Design points:

* Data lives in row-major (C-order) float64 numpy arrays.
* Every differentiable op records itself on its output tensor: the op name,
  references to the input tensors, and a vector-Jacobian closure. ``backward``
  walks this record in reverse topological order and replays the adjoints,
  which is exactly the chain rule for each primitive.
* Gradients accumulate across ``backward`` calls until ``zero_grad`` is
  called, mirroring the usual training-loop contract.
* Tensors are treated as immutable after construction except for their
  ``grad`` buffer.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tensor",
    "add",
    "mul",
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "sqrt",
    "exp",
    "conv2d",
    "concat",
    "gather_rows",
    "dropout",
    "backward",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, *, _op=None, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op = _op
        self._parents = _parents
        self._vjp = _vjp

    # ---- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # ---- graph plumbing --------------------------------------------------------

    def _make(self, data, op, parents, vjp) -> "Tensor":
        req = any(p.requires_grad for p in parents)
        if not req:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _op=op, _parents=tuple(parents), _vjp=vjp)

    def backward(self, seed: np.ndarray | None = None) -> None:
        backward(self, seed)

    # ---- arithmetic --------------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    # convenience wrappers
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

    def matmul(self, other):
        return matmul(self, other)


# ---- elementwise ops ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return a._make(out, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return a._make(out, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return a._make(out, "mul", (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return a._make(out, "div", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return a._make(-a.data, "neg", (a,), lambda g: (-g,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return a._make(out, "pow", (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return a._make(out, "exp", (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root with subgradient 0 at zero."""
    out = np.sqrt(a.data)

    def vjp(g):
        ga = np.zeros_like(a.data)
        nz = out > 0.0
        ga[nz] = g[nz] * 0.5 / out[nz]
        return (ga,)

    return a._make(out, "sqrt", (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact gelu: x * Phi(x) with Phi the standard normal CDF (erf form)."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return a._make(out, "gelu", (a,), vjp)


# ---- reductions and reshaping ----------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return a._make(out, "sum", (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return a._make(out, "reshape", (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return a._make(out, "transpose", (a,), vjp)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return a._make(out, "getitem", (a,), vjp)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows (axis 0) by an integer index array; repeats allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return a._make(out, "gather_rows", (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    req = any(t.requires_grad for t in tensors)
    if not req:
        return Tensor(out)
    return Tensor(out, requires_grad=True, _op="concat", _parents=tuple(tensors), _vjp=vjp)


# ---- linear algebra -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:  # batch extents not broadcastable
        raise ShapeError(f"matmul batch extents incompatible: {a.shape} vs {b.shape}") from e

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return a._make(out, "matmul", (a, b), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return a._make(out, "softmax", (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis {d}")
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(Tensor(1.0), sqrt(add(var, Tensor(eps))))
    return add(mul(mul(xc, inv), gain), bias)


# ---- convolution --------------------------------------------------------------------


def _conv_geometry(h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return ho, wo


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """[C, H, W] -> [C*kh*kw, Ho*Wo] patch matrix."""
    c, h, w = x.shape
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, ho, wo), dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, dy, dx] = x[:, dy : dy + ho * stride : stride, dx : dx + wo * stride : stride]
    return cols.reshape(c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh, kw, stride, padding) -> np.ndarray:
    c, h, w = shape
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)
    buf = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    cols = cols.reshape(c, kh, kw, ho, wo)
    for dy in range(kh):
        for dx in range(kw):
            buf[:, dy : dy + ho * stride : stride, dx : dx + wo * stride : stride] += cols[:, dy, dx]
    if padding:
        buf = buf[:, padding:-padding, padding:-padding]
    return buf


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate [C_in, H, W] with [C_out, C_in, kh, kw] kernels."""
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] and [Co,Ci,kh,kw], got {x.shape} and {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if c_in != x.shape[0]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    h, w = x.shape[1:]
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {kernels.shape}")
    cols = _im2col(x.data, kh, kw, stride, padding)
    kmat = kernels.data.reshape(c_out, -1)
    out = (kmat @ cols).reshape(c_out, ho, wo)

    def vjp(g):
        gmat = g.reshape(c_out, -1)
        gk = (gmat @ cols.T).reshape(kernels.shape)
        gcols = kmat.T @ gmat
        gx = _col2im(gcols, x.shape, kh, kw, stride, padding)
        return gx, gk

    return x._make(out, "conv2d", (x, kernels), vjp)


# ---- dropout --------------------------------------------------------------------------


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: scale survivors by 1/(1-p) at train time, identity at eval."""
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng stream")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


# ---- backward -----------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    """Tensors reachable from root, ordered so parents precede children."""
    order, seen, stack = [], set(), [(root, False)]
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


def backward(loss: Tensor, seed: np.ndarray | None = None) -> None:
    """Populate ``grad`` on every reachable tensor with ``requires_grad``.

    Gradients accumulate across calls; use ``zero_grad`` to reset.
    """
    if seed is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ValueError("backward called on a tensor that does not require grad")
    adjoint = {id(loss): np.array(seed, dtype=np.float64).reshape(loss.shape)}
    for node in reversed(_topo_order(loss)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = adjoint.get(id(p))
            # out-of-place accumulation: vjps may return views or shared buffers
            adjoint[id(p)] = pg if acc is None else acc + pg
