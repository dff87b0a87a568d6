"""Dense float32 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small. A :class:`Tensor` wraps a contiguous
float32 numpy array; every op computes its forward value eagerly and, when
a :class:`Tape` is active and an input requires gradients, appends a node
holding a backward closure. ``Tape.backward`` walks the node list in
reverse append order, which is a valid topological order because nodes are
appended in execution order.

Broadcasting follows numpy's trailing-axis rules and nothing more; any
other alignment must be spelled out with ``reshape``. All tensor data is
float32. Set the environment variable ``SPXMAMBA_DEBUG_FINITE=1`` (or call
:func:`set_debug_finite`) to make every op and every backward step raise
:class:`NumericError` on non-finite values.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

_DEBUG_FINITE = os.environ.get("SPXMAMBA_DEBUG_FINITE", "0") not in ("", "0")


def set_debug_finite(enabled: bool) -> None:
    """Toggle per-op finite checks (also settable via SPXMAMBA_DEBUG_FINITE)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


def debug_finite_enabled() -> bool:
    return _DEBUG_FINITE


class Tensor:
    """A float32 array plus optional gradient storage.

    ``grad`` is populated by ``Tape.backward`` and has the same shape as
    ``data``. Tensors that never require gradients are treated as
    immutable constants and may be shared freely.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- convenience method forms of the core ops
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def __getitem__(self, key) -> "Tensor":
        return slice_view(self, key)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def parameter(data) -> Tensor:
    """A tensor that collects gradients (a trainable leaf)."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

class Tape:
    """Append-only op record; reverse walk computes exact gradients.

    Use as a context manager around the forward pass::

        with Tape() as tape:
            loss = model(...)
            tape.backward(loss)

    A tape is confined to one logical worker. ``backward`` consumes the
    tape: the node list is cleared after the walk.
    """

    def __init__(self):
        # each node: (output tensor, input tensors, backward closure)
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if _TAPE_STACK and _TAPE_STACK[-1] is self:
            _TAPE_STACK.pop()

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from loss."""
        if loss.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise RuntimeError("backward on an empty tape")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, bwd in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = bwd(g)
            for t, gi in zip(inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if _DEBUG_FINITE and not np.all(np.isfinite(gi)):
                    raise NumericError("non-finite gradient in backward pass")
                if t.grad is None:
                    t.grad = gi.astype(np.float32, copy=False)
                else:
                    t.grad = t.grad + gi
        self.nodes.clear()


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Run backward on the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward called with no active tape")
    tape.backward(loss)


def apply_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Register a custom op: forward value plus a backward closure.

    ``backward_fn(g)`` must return one gradient array (or None) per input,
    in order. This is how fused ops (selective scan, superpixel pooling)
    plug into the tape.
    """
    if _DEBUG_FINITE and not np.all(np.isfinite(out_data)):
        raise NumericError("non-finite op output")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, tuple(inputs), backward_fn))
    return out


# --------------------------------------------------------------------------
# broadcasting helpers
# --------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} vs {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` (inverse of trailing-axis broadcast)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return apply_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return apply_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return apply_op(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    return apply_op(
        ad / bd, (a, b),
        lambda g: (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,))


# --------------------------------------------------------------------------
# elementwise nonlinearities
# --------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return apply_op(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return apply_op(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return apply_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    ad = a.data
    return apply_op(ad * s, (a,), lambda g: (g * (s * (1.0 + ad * (1.0 - s))),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(np.float32(0.0), a.data)
    s = _sigmoid(a.data)
    return apply_op(out, (a,), lambda g: (g * s,))


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...],
                    keepdims: bool) -> np.ndarray:
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes if axes else None, keepdims=keepdims)
    out = np.asarray(out, dtype=np.float32)
    shape = a.shape
    return apply_op(
        out, (a,),
        lambda g: (_expand_reduced(g, shape, axes, keepdims).astype(np.float32, copy=False),),
    )


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes if axes else None, keepdims=keepdims)
    out = np.asarray(out, dtype=np.float32)
    shape = a.shape
    inv = np.float32(1.0 / count)
    return apply_op(
        out, (a,),
        lambda g: (_expand_reduced(g * inv, shape, axes, keepdims).astype(np.float32, copy=False),),
    )


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    out = a.data.reshape(shape)
    return apply_op(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return apply_op(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(offs[i], offs[i + 1]), axis=axis)
            for i in range(len(sizes))
        )

    return apply_op(out, tuple(tensors), bwd)


def slice_view(a: Tensor, key) -> Tensor:
    """Basic slicing (ints and slices); backward scatters into zeros."""
    out = np.ascontiguousarray(a.data[key])
    shape = a.shape

    def bwd(g):
        gz = np.zeros(shape, dtype=np.float32)
        gz[key] += g
        return (gz,)

    return apply_op(out, (a,), bwd)


def pad_zeros(a: Tensor, pad: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad per axis; ``pad`` is a (before, after) pair for every axis."""
    pad = tuple((int(b), int(e)) for b, e in pad)
    if len(pad) != a.ndim:
        raise ShapeError(f"pad_zeros: {len(pad)} pad pairs for {a.ndim}-d tensor")
    out = np.pad(a.data, pad)
    crop = tuple(slice(b, b + s) for (b, _), s in zip(pad, a.shape))
    return apply_op(out, (a,), lambda g: (g[crop],))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of ``a`` along axis 0; backward sums duplicate rows."""
    idx = np.asarray(idx)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows expects 1-d indices, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def bwd(g):
        gz = np.zeros(shape, dtype=np.float32)
        np.add.at(gz, idx, g)
        return (gz,)

    return apply_op(a.data[idx], (a,), bwd)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bwd(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return apply_op(out, (a, b), bwd)


# --------------------------------------------------------------------------
# softmax family
# --------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return apply_op(y, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return apply_op(y, (a,), bwd)


# --------------------------------------------------------------------------
# convolutions
# --------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """2-d convolution, stride 1, same padding, odd kernel sizes.

    x: [B, Cin, H, W]; w: [Cout, Cin, kh, kw]; b: [Cout] or None.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and w, got {x.shape} and {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cw, kh, kw = w.shape
    if Cw != Cin:
        raise ShapeError(f"conv2d: channel mismatch, x {x.shape} vs w {w.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d supports odd kernels only, got {(kh, kw)}")
    ph, pw = kh // 2, kw // 2
    xd, wd = x.data, w.data

    def im2col(arr):
        ap = np.pad(arr, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win = sliding_window_view(ap, (kh, kw), axis=(2, 3))  # [B,Cin,H,W,kh,kw]
        return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            B * H * W, Cin * kh * kw)

    cols = im2col(xd)
    wmat = wd.reshape(Cout, Cin * kh * kw)
    y = cols @ wmat.T
    if b is not None:
        y = y + b.data
    y = np.ascontiguousarray(y.reshape(B, H, W, Cout).transpose(0, 3, 1, 2))

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * H * W, Cout)
        gw = (gmat.T @ im2col(xd)).reshape(Cout, Cin, kh, kw)
        gb = gmat.sum(axis=0) if b is not None else None
        gxp = np.zeros((B, Cin, H + 2 * ph, W + 2 * pw), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                # [B,H,W,Cin] contribution of kernel tap (i, j)
                t = np.tensordot(g, wd[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i:i + H, j:j + W] += t.transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph:ph + H, pw:pw + W]
        if b is not None:
            return gx, gw, gb
        return gx, gw

    inputs = (x, w) if b is None else (x, w, b)
    return apply_op(y, inputs, bwd)


def depthwise_conv1d_causal(x: Tensor, kern: Tensor) -> Tensor:
    """Per-channel causal 1-d convolution over the sequence axis.

    x: [B, L, D]; kern: [D, k]. Output position t only sees inputs <= t
    (left zero-padding of k-1), so stacking this before a forward scan
    preserves causality.
    """
    if x.ndim != 3 or kern.ndim != 2:
        raise ShapeError(f"depthwise_conv1d: expected [B,L,D] and [D,k], got {x.shape}, {kern.shape}")
    B, L, D = x.shape
    Dk, k = kern.shape
    if Dk != D:
        raise ShapeError(f"depthwise_conv1d: channel mismatch {x.shape} vs {kern.shape}")
    xd, kd = x.data, kern.data
    y = np.zeros((B, L, D), dtype=np.float32)
    for j in range(k):
        s = k - 1 - j  # tap j reads the input s steps back
        if s >= L:
            continue
        y[:, s:, :] += xd[:, :L - s, :] * kd[:, j]

    def bwd(g):
        gx = np.zeros_like(xd)
        gk = np.zeros_like(kd)
        for j in range(k):
            s = k - 1 - j
            if s >= L:
                continue
            gx[:, :L - s, :] += g[:, s:, :] * kd[:, j]
            gk[:, j] = np.einsum("bld,bld->d", g[:, s:, :], xd[:, :L - s, :])
        return gx, gk

    return apply_op(y, (x, kern), bwd)
