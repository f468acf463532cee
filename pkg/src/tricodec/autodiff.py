"""Minimal reverse-mode automatic differentiation on numpy arrays.

Provides exactly the operators the codec graph needs: matmul (dense and
batched), 1-D convolutions, the usual pointwise nonlinearities, softmax,
layer norm, reductions, indexing, rotary-position attention, and a
straight-through passthrough for the quantizer. The graph is the implicit
DAG linking each result tensor to its parents; ``backward`` walks it in
exact reverse topological order. Graphs are confined to the context that
built them; distinct graphs may run concurrently.

Every op checks its output for NaN/Inf and raises ``NonFiniteError``
rather than propagating poison through training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "backward",
    "grad_check",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tabs",
    "texp",
    "tlog",
    "tsqrt",
    "tanh",
    "sigmoid",
    "gelu",
    "softmax",
    "tsum",
    "tmean",
    "matmul",
    "reshape",
    "transpose",
    "concatenate",
    "gather_rows",
    "masked_fill_rows",
    "linear",
    "layer_norm",
    "cosine_similarity",
    "logsumexp",
    "conv1d",
    "conv1d_transpose",
    "rope_attention",
    "rope_cos_sin",
    "stop_gradient",
    "passthrough",
    "zero_grads",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError):
    """Operands have incompatible shapes; message lists both."""


class NonFiniteError(AutodiffError):
    """An op produced NaN or Inf."""


class Tensor:
    """A shaped numeric array participating in reverse-mode differentiation.

    ``data`` is always an ``np.ndarray``. ``grad`` is populated by
    ``backward`` for tensors with ``requires_grad`` and matches ``data``
    in shape. Op results record their parents and a backward rule; leaf
    tensors have neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor '{name or '<leaf>'}' contains NaN/Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operators
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def tensor(data, requires_grad: bool = False, dtype=None, name: Optional[str] = None) -> Tensor:
    arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced NaN/Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# pointwise and arithmetic ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} vs {b.shape}") from None
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} vs {b.shape}") from None
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} vs {b.shape}") from None

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: incompatible shapes {a.shape} vs {b.shape}") from None

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def tabs(a: Tensor) -> Tensor:
    # subgradient 0 at 0
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,), "exp")


def tlog(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make(data, (a,), lambda g: (g / a.data,), "log")


def tsqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * (0.5 / data),), "sqrt")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: (g * (1.0 - data * data),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # exp(-|x|) never overflows; both branches share it
    e = np.exp(-np.abs(a.data))
    data = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(data, (a,), bwd, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _make(data, (a,), bwd, "softmax")


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(data), (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(data), (a,), bwd, "mean")


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim >= 3 or b.ndim >= 3:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if b.ndim == 1:
            ga = np.outer(g, b.data) if a.ndim > 1 else g * b.data
            gb = a.data.T @ g if a.ndim > 1 else a.data * g
            return ga.reshape(a.shape), gb.reshape(b.shape)
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return _make(data, (a, b), bwd, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    data = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _make(data, (a,), bwd, "transpose")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), bwd, "concatenate")


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of ``a`` along axis 0; ``idx`` may be any integer array."""
    idx = np.asarray(idx)
    data = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(data, (a,), bwd, "gather_rows")


def _getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _make(np.asarray(data), (a,), bwd, "getitem")


def masked_fill_rows(x: Tensor, mask: np.ndarray, v: Tensor) -> Tensor:
    """Replace rows of ``x`` where ``mask`` is True by the vector ``v``.

    Unmasked rows pass through bit-exactly (no arithmetic touches them).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x.shape[0],):
        raise ShapeError(f"masked_fill_rows: mask {mask.shape} vs rows {x.shape}")
    if v.shape != x.shape[1:]:
        raise ShapeError(f"masked_fill_rows: fill {v.shape} vs row shape {x.shape[1:]}")
    data = x.data.copy()
    data[mask] = v.data
    n_masked = int(mask.sum())

    def bwd(g):
        gx = g.copy()
        gx[mask] = 0.0
        gv = g[mask].sum(axis=0) if n_masked else np.zeros_like(v.data)
        return gx, gv

    return _make(data, (x, v), bwd, "masked_fill_rows")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


def passthrough(x: Tensor, y: Tensor) -> Tensor:
    """Identity-gradient passthrough: forwards ``y``, routes the upstream
    gradient unchanged to both ``x`` and ``y``.

    This is the straight-through estimator the quantizer composes: the
    discrete selection is treated as identity so encoder frames and the
    selected codewords both see the downstream gradient.
    """
    if x.shape != y.shape:
        raise ShapeError(f"passthrough: shapes differ, {x.shape} vs {y.shape}")
    return _make(y.data, (x, y), lambda g: (g, g), "passthrough")


# ---------------------------------------------------------------------------
# composites


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w.T (+ b). ``w`` is (out_features, in_features)."""
    if x.shape[-1] != w.shape[-1]:
        raise ShapeError(f"linear: input dim {x.shape} vs weight {w.shape}")
    out = matmul(x, transpose(w))
    if b is not None:
        out = add(out, b)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(_as_tensor(1.0, x.dtype), tsqrt(add(var, _as_tensor(eps, x.dtype))))
    return add(mul(mul(centered, inv), gain), bias)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """a.b / (|a||b|) along ``axis``; norms floored at 1e-12."""
    dot = tsum(mul(a, b), axis=axis)
    na = tsqrt(add(tsum(mul(a, a), axis=axis), _as_tensor(1e-24, a.dtype)))
    nb = tsqrt(add(tsum(mul(b, b), axis=axis), _as_tensor(1e-24, b.dtype)))
    return div(dot, mul(na, nb))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(x.data, axis=axis, keepdims=True)
    shifted = sub(x, _as_tensor(shift, x.dtype))
    lse = tlog(tsum(texp(shifted), axis=axis))
    return add(lse, _as_tensor(np.squeeze(shift, axis=axis), x.dtype))


# ---------------------------------------------------------------------------
# convolutions (time-major: x is (T, C))


def _pad_pair(padding) -> tuple:
    if isinstance(padding, tuple):
        return padding
    return (int(padding), int(padding))


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding=0) -> Tensor:
    """1-D convolution over time-major input.

    x: (T, C_in), w: (C_out, C_in, K), output (T', C_out) with
    T' = floor((T + pad_l + pad_r - K) / stride) + 1.
    """
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected x (T,C), w (O,C,K); got {x.shape} vs {w.shape}")
    c_out, c_in, k = w.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d: channel mismatch, input {x.shape} vs weight {w.shape}")
    pl, pr = _pad_pair(padding)
    t_in = x.shape[0] + pl + pr
    if t_in < k:
        raise ShapeError(f"conv1d: padded length {t_in} shorter than kernel {k}")
    t_out = (t_in - k) // stride + 1

    xp = np.pad(x.data, ((pl, pr), (0, 0)))
    win_idx = (np.arange(t_out)[:, None] * stride + np.arange(k)[None, :])
    windows = xp[win_idx]                                  # (T', K, C_in)
    wmat = w.data.transpose(2, 1, 0).reshape(k * c_in, c_out)
    data = windows.reshape(t_out, k * c_in) @ wmat
    if b is not None:
        data = data + b.data

    def bwd(g):
        gw_flat = windows.reshape(t_out, k * c_in).T @ g   # (K*C_in, C_out)
        gw = gw_flat.reshape(k, c_in, c_out).transpose(2, 1, 0)
        gwin = (g @ wmat.T).reshape(t_out, k, c_in)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j : j + stride * t_out : stride] += gwin[:, j, :]
        gx = gxp[pl : pl + x.shape[0]]
        if b is not None:
            return gx, gw, g.sum(axis=0)
        return gx, gw

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, bwd, "conv1d")


def conv1d_transpose(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Transposed 1-D convolution (full output, no cropping).

    x: (T, C_in), w: (C_in, C_out, K), output ((T-1)*stride + K, C_out).
    """
    if stride < 1:
        raise ShapeError(f"conv1d_transpose: stride must be >= 1, got {stride}")
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(
            f"conv1d_transpose: expected x (T,C), w (C,O,K); got {x.shape} vs {w.shape}"
        )
    c_in, c_out, k = w.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d_transpose: channel mismatch, {x.shape} vs {w.shape}")
    t = x.shape[0]
    t_out = (t - 1) * stride + k

    contrib = np.einsum("tc,cok->tok", x.data, w.data)     # (T, C_out, K)
    data = np.zeros((t_out, c_out), dtype=contrib.dtype)
    for j in range(k):
        data[j : j + stride * t : stride] += contrib[:, :, j]
    if b is not None:
        data = data + b.data

    def bwd(g):
        win_idx = (np.arange(t)[:, None] * stride + np.arange(k)[None, :])
        gwin = g[win_idx]                                  # (T, K, C_out)
        gx = np.einsum("tko,cok->tc", gwin, w.data)
        gw = np.einsum("tc,tko->cok", x.data, gwin)
        if b is not None:
            return gx, gw, g.sum(axis=0)
        return gx, gw

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, bwd, "conv1d_transpose")


# ---------------------------------------------------------------------------
# rotary-position attention


def rope_cos_sin(t: int, head_dim: int, dtype, offset: int = 0, base: float = 10000.0):
    """cos/sin tables for rotary embedding, positions offset..offset+t-1."""
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.outer(np.arange(offset, offset + t, dtype=np.float64), inv_freq)
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1).astype(dtype)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1).astype(dtype)
    return cos, sin


def _rotate_half(x: Tensor) -> Tensor:
    half = x.shape[-1] // 2
    a = x[..., :half]
    b = x[..., half:]
    return concatenate([neg(b), a], axis=-1)


def rope_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
    pos_offset: int = 0,
) -> Tensor:
    """Multi-head self-attention with rotary position rotation of q and k.

    x: (T, hidden); all weights (hidden, hidden); full (non-causal)
    attention. ``pos_offset`` shifts the rotary positions, which leaves
    relative-offset attention scores unchanged.
    """
    t, hidden = x.shape
    if hidden % heads != 0:
        raise ShapeError(f"rope_attention: hidden {hidden} not divisible by heads {heads}")
    hd = hidden // heads
    if hd % 2 != 0:
        raise ShapeError(f"rope_attention: head_dim {hd} must be even for rotary pairs")

    def split_heads(y):
        return transpose(reshape(y, (t, heads, hd)), (1, 0, 2))  # (H, T, hd)

    q = split_heads(linear(x, wq))
    k = split_heads(linear(x, wk))
    v = split_heads(linear(x, wv))

    cos_np, sin_np = rope_cos_sin(t, hd, x.dtype, offset=pos_offset)
    cos = Tensor(cos_np[None, :, :])
    sin = Tensor(sin_np[None, :, :])
    q = add(mul(q, cos), mul(_rotate_half(q), sin))
    k = add(mul(k, cos), mul(_rotate_half(k), sin))

    scores = mul(matmul(q, transpose(k, (0, 2, 1))), _as_tensor(1.0 / math.sqrt(hd), x.dtype))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)                                   # (H, T, hd)
    ctx = reshape(transpose(ctx, (1, 0, 2)), (t, hidden))
    return linear(ctx, wo)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list:
    """Topological order of the op DAG reachable from ``root``."""
    order: list = []
    seen = set()
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar. Gradients accumulate, so call
    ``zero_grads`` on the leaves between passes.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("backward on a tensor with no grad-requiring ancestors")

    order = _topo_order(loss)
    grads: dict = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._backward is None:
            # leaf
            node.grad = g if node.grad is None else node.grad + g
            continue
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg)
            if p._backward is None:
                p.grad = pg if p.grad is None else p.grad + pg
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of analytic and central-difference grads."""

    max_rel_err: float
    passed: bool
    tol: float
    h: float
    num_coords: int
    kink_coords: list = field(default_factory=list)
    rel_errs: np.ndarray = field(default=None, repr=False)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f", {len(self.kink_coords)} kink coords excluded" if self.kink_coords else ""
        return (
            f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} "
            f"(tol={self.tol:.1e}, h={self.h:.1e}, {self.num_coords} coords{extra})"
        )


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    tol: float = 1e-4,
    denom_floor: float = 1e-6,
    kink_tol: Optional[float] = 1e-2,
) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` at ``x`` against
    central finite differences.

    Coordinates whose second difference |f(x+h)+f(x-h)-2f(x)|/(2h) exceeds
    ``kink_tol`` are flagged as nondifferentiable points and excluded from
    the pass/fail decision (e.g. a top-k gate at a near-tie). Use 64-bit
    inputs; float32 cannot support tol=1e-4 at h=1e-4.
    """
    base = x.data.astype(np.float64).copy()
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise AutodiffError(f"grad_check requires scalar f, got shape {out.shape}")
    backward(out)
    analytic = xt.grad.reshape(-1).copy() if xt.grad is not None else np.zeros(base.size)
    f0 = float(out.data)

    flat = base.reshape(-1)
    numeric = np.zeros_like(flat)
    curvature = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
        curvature[i] = abs(fp + fm - 2.0 * f0) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), denom_floor)
    rel = np.abs(analytic - numeric) / denom
    kinks = []
    if kink_tol is not None:
        kinks = list(np.nonzero(curvature > kink_tol)[0])
        if kinks:
            rel = rel.copy()
            rel[kinks] = 0.0
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(
        max_rel_err=max_rel,
        passed=max_rel < tol,
        tol=tol,
        h=h,
        num_coords=int(flat.size),
        kink_coords=kinks,
        rel_errs=rel,
    )
