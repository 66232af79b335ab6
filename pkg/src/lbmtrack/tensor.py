"""Dense tensor kernels with reverse-mode automatic differentiation.

Every differentiable operation used by the tracker lives here. Forward math is
plain numpy; each op appends a backward closure to the active tape when any
operand requires gradients. Working precision is float32; float64 is supported
so finite-difference gradient checks can run at full accuracy.

Broadcasting is deliberately restricted: a binary op either takes two tensors
of identical shape, or one operand whose shape is a trailing suffix of the
other's (leading-batch broadcast, e.g. a (d,) bias against an (N, d) matrix).
Anything else raises ShapeError.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "no_grad", "finite_checks", "active_tape", "backward",
    "TensorError", "ShapeError", "NonFiniteError", "TapeError",
    "add", "sub", "mul", "scale", "matmul", "linear",
    "relu", "gelu", "sigmoid", "layer_norm", "softmax", "rsqrt",
    "tsum", "tmean", "reshape", "transpose", "concat", "repeat_axis1", "narrow",
    "clamp",
    "bilinear_sample", "conv2d", "unstack", "slot_attention", "point_attention",
    "gelu_mlp", "residual_layer_norm", "deformable_attention",
    "memory_block", "block_tail", "map_correlation", "cell_gather_project",
    "cross_entropy", "binary_cross_entropy", "l1_loss",
    "iter_named_tensors", "zero_grads",
]

GELU_TANH_COEFF = 0.044715


class TensorError(ValueError):
    """Base error for tensor-kernel misuse."""


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class TapeError(TensorError):
    pass


import threading


class _State(threading.local):
    """Per-thread recording state: tapes in one thread never observe another
    thread's graph construction."""

    def __init__(self):
        self.grad_enabled = True
        self.finite_checks = True
        self.tape_stack: list["Tape"] = []


_STATE = _State()


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class finite_checks:
    """Context manager toggling the NaN/Inf output checks."""

    def __init__(self, enabled: bool):
        self._enabled = enabled

    def __enter__(self):
        self._prev = _STATE.finite_checks
        _STATE.finite_checks = self._enabled
        return self

    def __exit__(self, *exc):
        _STATE.finite_checks = self._prev
        return False


class Tape:
    """Ordered record of op nodes; creation order is the topological order.

    One tape is single-threaded. Independent tapes may run concurrently from
    separate threads: the active-tape stack and recording flags are
    thread-local, so nothing mutable is shared between them.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _STATE.tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _STATE.tape_stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        self._nodes.clear()
        self._used = False


def active_tape() -> Tape:
    if not _STATE.tape_stack:
        _STATE.tape_stack.append(Tape())
    return _STATE.tape_stack[-1]


class Tensor:
    """Dense n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                arr = data
            else:
                arr = np.asarray(data, dtype=np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if _STATE.finite_checks and not np.isfinite(arr).all():
            raise NonFiniteError("tensor constructed with non-finite values")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

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
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    return t


def _out(data: np.ndarray, opname: str) -> Tensor:
    if _STATE.finite_checks and not np.isfinite(data).all():
        raise NonFiniteError(f"{opname}: non-finite values in output")
    return _wrap(data)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _STATE.grad_enabled:
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                active_tape()._nodes.append((out, backward_fn))
                break
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Run the tape backward from a scalar loss, populating .grad buffers."""
    tp = tape if tape is not None else active_tape()
    if tp._used:
        raise TapeError("backward() already ran on this tape; reset() it first")
    if loss.shape != ():
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss is not connected to any tensor requiring grad")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for out, fn in reversed(tp._nodes):
        g = out.grad
        if g is not None:
            fn(g)
    tp._used = True


# ---------------------------------------------------------------------------
# shape / dtype plumbing


def _check_dtypes(opname: str, *ts: Tensor) -> None:
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"{opname}: dtype mismatch {dt} vs {t.data.dtype}")


def _check_suffix_broadcast(opname: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ShapeError(f"{opname}: shapes {sa} and {sb} do not conform "
                         "(only leading-batch broadcast is allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    _check_suffix_broadcast("add", a, b)
    out = _out(a.data + b.data, "add")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("sub", a, b)
    _check_suffix_broadcast("sub", a, b)
    out = _out(a.data - b.data, "sub")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, -_unbroadcast(g, b.shape))

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    _check_suffix_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    out = _out(ad * bd, "mul")

    def bw(g):
        _acc(a, _unbroadcast(g * bd, a.shape))
        _acc(b, _unbroadcast(g * ad, b.shape))

    return _record(out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _out(a.data * np.asarray(s, dtype=a.data.dtype), "scale")

    def bw(g):
        _acc(a, g * np.asarray(s, dtype=a.data.dtype))

    return _record(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} do not conform")
    ad, bd = a.data, b.data
    out = _out(ad @ bd, "matmul")

    def bw(g):
        _acc(a, g @ bd.T)
        _acc(b, ad.T @ g)

    return _record(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Fused x @ w + b for a 2-D x of shape (rows, d_in)."""
    _check_dtypes("linear", x, w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: shapes {x.shape} @ {w.shape} do not conform")
    xd, wd = x.data, w.data
    y = xd @ wd
    if b is not None:
        _check_dtypes("linear", x, b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} vs {w.shape[1]}")
        y = y + b.data
    out = _out(y, "linear")
    operands = (x, w) if b is None else (x, w, b)

    def bw(g):
        _acc(x, g @ wd.T)
        _acc(w, xd.T @ g)
        if b is not None:
            _acc(b, g.sum(axis=0))

    return _record(out, operands, bw)


# Pure data-movement ops (and relu/clamp, which only zero or copy values)
# cannot introduce NaN/Inf from finite inputs, so they skip the output check.


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = _wrap(np.where(mask, x.data, x.data.dtype.type(0)))

    def bw(g):
        _acc(x, g * mask)

    return _record(out, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form:
    0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))."""
    xd = x.data
    c = xd.dtype.type(math.sqrt(2.0 / math.pi))
    k = xd.dtype.type(GELU_TANH_COEFF)
    u = c * (xd + k * xd * xd * xd)
    t = np.tanh(u)
    half = xd.dtype.type(0.5)
    out = _out(half * xd * (1 + t), "gelu")

    def bw(g):
        du = c * (1 + 3 * k * xd * xd)
        d = half * (1 + t) + half * xd * (1 - t * t) * du
        _acc(x, g * d)

    return _record(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    s = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd)))).astype(xd.dtype)
    out = _out(s, "sigmoid")

    def bw(g):
        _acc(x, g * s * (1 - s))

    return _record(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned gain and shift."""
    _check_dtypes("layer_norm", x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/shift must be ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = (xd - mu) * inv
    out = _out(gamma.data * xhat + beta.data, "layer_norm")

    def bw(g):
        red = tuple(range(g.ndim - 1))
        _acc(gamma, (g * xhat).sum(axis=red))
        _acc(beta, g.sum(axis=red))
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _acc(x, (dxhat - m1 - xhat * m2) * inv)

    return _record(out, (x, gamma, beta), bw)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically-stable softmax along one axis (max-subtraction applied)."""
    if x.shape == () or x.shape[axis] == 0:
        raise ShapeError("softmax: empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _out(y, "softmax")

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _acc(x, y * (g - dot))

    return _record(out, (x,), bw)


def rsqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    """Elementwise 1/sqrt(x + eps); inputs must keep x + eps > 0."""
    xd = x.data + x.data.dtype.type(eps)
    if np.any(xd <= 0):
        raise TensorError("rsqrt: non-positive input")
    y = 1.0 / np.sqrt(xd)
    out = _out(y.astype(x.data.dtype), "rsqrt")

    def bw(g):
        _acc(x, g * (-0.5 * y * y * y))

    return _record(out, (x,), bw)


def tsum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = _out(x.data.sum(axis=axis, keepdims=keepdims), "tsum")

    def bw(g):
        if axis is None:
            _acc(x, np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _acc(x, np.broadcast_to(ge, x.shape).astype(x.data.dtype, copy=True))

    return _record(out, (x,), bw)


def tmean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError("tmean: empty axis")
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = _wrap(x.data.reshape(tuple(shape)))

    def bw(g):
        _acc(x, g.reshape(x.shape))

    return _record(out, (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _wrap(x.data.transpose(axes))

    def bw(g):
        _acc(x, g.transpose(inv))

    return _record(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no operands")
    _check_dtypes("concat", *tensors)
    out = _wrap(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(t, g[tuple(idx)])

    return _record(out, tuple(tensors), bw)


def repeat_axis1(x: Tensor, reps: int) -> Tensor:
    """Repeat each axis-1 slot of a 3-D tensor `reps` consecutive times."""
    if x.ndim != 3:
        raise ShapeError(f"repeat_axis1: need 3-D input, got {x.shape}")
    out = _wrap(np.repeat(x.data, reps, axis=1))
    a, b, c = x.shape

    def bw(g):
        _acc(x, g.reshape(a, b, reps, c).sum(axis=2))

    return _record(out, (x,), bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis "
                         f"of size {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _wrap(x.data[idx].copy())

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _acc(x, full)

    return _record(out, (x,), bw)


def clamp(x: Tensor, lo, hi) -> Tensor:
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi, else zero."""
    lod = np.asarray(lo, dtype=x.data.dtype)
    hid = np.asarray(hi, dtype=x.data.dtype)
    out = _wrap(np.clip(x.data, lod, hid))
    gate = (x.data >= lod) & (x.data <= hid)

    def bw(g):
        _acc(x, g * gate)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# sampling and convolution kernels


def bilinear_sample(featmap: Tensor, coords: Tensor) -> Tensor:
    """Sample a (C, H, W) map at continuous (x, y) locations, shape (N, 2).

    Coordinates are clamped to [0, W-1] x [0, H-1] before interpolation
    (clamp-to-border), then the four neighboring cells are blended. The result
    (N, C) is differentiable w.r.t. both the map and the coordinates; clamped
    coordinates receive zero gradient.
    """
    _check_dtypes("bilinear_sample", featmap, coords)
    if featmap.ndim != 3 or 0 in featmap.shape:
        raise ShapeError(f"bilinear_sample: empty or non-3D feature map {featmap.shape}")
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: coords must be (N, 2), got {coords.shape}")
    C, H, W = featmap.shape
    dt = featmap.data.dtype
    xr = coords.data[:, 0]
    yr = coords.data[:, 1]
    x = np.clip(xr, 0, W - 1)
    y = np.clip(yr, 0, H - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    tx = (x - x0).astype(dt)
    ty = (y - y0).astype(dt)

    n = coords.shape[0]
    fm = featmap.data.reshape(C, H * W)
    idx4 = np.concatenate([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1])
    v4 = fm[:, idx4]                     # (C, 4N): corners 00, 01, 10, 11
    v00, v01, v10, v11 = v4[:, :n], v4[:, n:2 * n], v4[:, 2 * n:3 * n], v4[:, 3 * n:]
    w00 = (1 - tx) * (1 - ty)
    w01 = tx * (1 - ty)
    w10 = (1 - tx) * ty
    w11 = tx * ty
    out = _out((v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11).T, "bilinear_sample")

    xgate = ((xr >= 0) & (xr <= W - 1)).astype(dt)
    ygate = ((yr >= 0) & (yr <= H - 1)).astype(dt)

    def bw(g):
        gT = g.T  # (C, N)
        if featmap.requires_grad:
            contrib = (g[None, :, :] * np.stack([w00, w01, w10, w11])[:, :, None]) \
                .reshape(4 * n, C)
            order = np.argsort(idx4, kind="stable")
            sidx = idx4[order]
            starts = np.concatenate(([0], np.flatnonzero(np.diff(sidx)) + 1))
            sums = np.add.reduceat(contrib[order], starts, axis=0)
            dhw = np.zeros((H * W, C), dtype=dt)
            dhw[sidx[starts]] = sums
            _acc(featmap, dhw.T.reshape(C, H, W))
        if coords.requires_grad:
            dx = ((v01 - v00) * (1 - ty) + (v11 - v10) * ty) * gT
            dy = ((v10 - v00) * (1 - tx) + (v11 - v01) * tx) * gT
            dc = np.stack([dx.sum(axis=0) * xgate, dy.sum(axis=0) * ygate], axis=1)
            _acc(coords, dc)

    return _record(out, (featmap, coords), bw)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, padding: int) -> Tensor:
    """2-D convolution via im2col, on a (C_in, H, W) image or a batched
    (B, C_in, H, W) stack sharing the same weights."""
    _check_dtypes("conv2d", x, w)
    batched = x.ndim == 4
    if (x.ndim not in (3, 4)) or w.ndim != 4 or w.shape[1] != x.shape[-3]:
        raise ShapeError(f"conv2d: shapes {x.shape} / {w.shape} do not conform")
    xd = x.data if batched else x.data[None]
    bsz, ci, H, W = xd.shape
    co, _, kh, kw = w.shape
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d: kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                 # (B, ci, ho, wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, ci * kh * kw)
    wflat = w.data.reshape(co, ci * kh * kw)
    y = cols @ wflat.T
    if b is not None:
        _check_dtypes("conv2d", x, b)
        if b.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {b.shape} vs ({co},)")
        y += b.data
    y4 = y.reshape(bsz, ho, wo, co).transpose(0, 3, 1, 2)
    out = _out(y4 if batched else y4[0], "conv2d")
    operands = (x, w) if b is None else (x, w, b)
    i0 = np.arange(ho) * stride
    j0 = np.arange(wo) * stride

    def bw(g):
        g4 = g if batched else g[None]
        g2 = g4.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, co)
        _acc(w, (g2.T @ cols).reshape(w.shape))
        if b is not None:
            _acc(b, g2.sum(axis=0))
        if x.requires_grad:
            dcols = g2 @ wflat                          # (B*ho*wo, ci*kh*kw)
            dpat = dcols.reshape(bsz, ho, wo, ci, kh, kw)
            dxp = np.zeros_like(xp)
            for a in range(kh):
                for c in range(kw):
                    # output positions map to distinct input cells per (a, c)
                    dxp[:, :, i0[:, None] + a, j0[None, :] + c] += \
                        dpat[:, :, :, :, a, c].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + H, padding:padding + W]
            _acc(x, dxp if batched else dxp[0])

    return _record(out, operands, bw)


def unstack(x: Tensor) -> list[Tensor]:
    """Split a tensor along axis 0 into per-slice tensors (shared storage).

    Gradients accumulate directly into the parent's buffer, so splitting a
    large batch does not allocate one full-size gradient per slice.
    """
    if x.ndim < 2:
        raise ShapeError("unstack: need at least 2 dims")
    outs = []
    for i in range(x.shape[0]):
        out = _wrap(x.data[i])

        def bw(g, i=i):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[i] += g

        outs.append(_record(out, (x,), bw))
    return outs


# ---------------------------------------------------------------------------
# fused network blocks
#
# These fuse common op chains into single tape nodes to keep the tape short;
# their backward passes are hand-derived chain rules over the same math as the
# primitive ops above (the unfused compositions serve as test oracles).


def gelu_mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer MLP with a gelu in between: (x @ w1 + b1) -> gelu -> @ w2 + b2."""
    _check_dtypes("gelu_mlp", x, w1, b1, w2, b2)
    if x.ndim != 2 or x.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ShapeError(f"gelu_mlp: shapes {x.shape}/{w1.shape}/{w2.shape}")
    xd = x.data
    dt = xd.dtype
    h = xd @ w1.data + b1.data
    c = dt.type(math.sqrt(2.0 / math.pi))
    k = dt.type(GELU_TANH_COEFF)
    u = c * (h + k * h * h * h)
    t = np.tanh(u)
    half = dt.type(0.5)
    a = half * h * (1 + t)
    out = _out(a @ w2.data + b2.data, "gelu_mlp")

    def bw(g):
        _acc(w2, a.T @ g)
        _acc(b2, g.sum(axis=0))
        da = g @ w2.data.T
        du = c * (1 + 3 * k * h * h)
        dh = da * (half * (1 + t) + half * h * (1 - t * t) * du)
        _acc(w1, xd.T @ dh)
        _acc(b1, dh.sum(axis=0))
        _acc(x, dh @ w1.data.T)

    return _record(out, (x, w1, b1, w2, b2), bw)


def residual_layer_norm(x: Tensor, y: Tensor, gamma: Tensor, beta: Tensor,
                        eps: float = 1e-5) -> Tensor:
    """layer_norm(x + y) over the last axis, fused."""
    _check_dtypes("residual_layer_norm", x, y, gamma, beta)
    if x.shape != y.shape:
        raise ShapeError(f"residual_layer_norm: shapes {x.shape} vs {y.shape}")
    s = x.data + y.data
    d = s.shape[-1]
    mu = s.sum(axis=-1, keepdims=True) * (1.0 / d)
    diff = s - mu
    var = (diff * diff).sum(axis=-1, keepdims=True) * (1.0 / d)
    inv = 1.0 / np.sqrt(var + s.dtype.type(eps))
    xhat = diff * inv
    out = _out(gamma.data * xhat + beta.data, "residual_layer_norm")

    def bw(g):
        red = tuple(range(g.ndim - 1))
        _acc(gamma, (g * xhat).sum(axis=red))
        _acc(beta, g.sum(axis=red))
        dxhat = g * gamma.data
        m1 = dxhat.sum(axis=-1, keepdims=True) * (1.0 / d)
        m2 = (dxhat * xhat).sum(axis=-1, keepdims=True) * (1.0 / d)
        ds = (dxhat - m1 - xhat * m2) * inv
        _acc(x, ds)
        _acc(y, ds)

    return _record(out, (x, y, gamma, beta), bw)


def deformable_attention(f: Tensor, featmap: Tensor, base: Tensor, reps: int,
                         wq: Tensor, bq: Tensor, w_off: Tensor, b_off: Tensor,
                         w_wgt: Tensor, b_wgt: Tensor, wv: Tensor, bv: Tensor,
                         wo: Tensor, bo: Tensor,
                         info: Optional[dict] = None) -> Tensor:
    """Fused deformable attention.

    From the projected query u = f @ wq + bq, predict per-point sampling
    offsets (offset head zero-init keeps them at 0 initially) and attention
    logits; sample the (C, H, W) map at base-point + offset locations
    (clamp-to-border bilinear); softmax the logits over the points; aggregate
    value-projected samples convexly; project the aggregate out.

    base is (N, B, 2) in map units; each base point is repeated `reps` times
    for P = B * reps sampling points total. When `info` is given, copies of
    the weights, values, pre-projection aggregate and sample locations are
    stored for instrumentation.
    """
    _check_dtypes("deformable_attention", f, featmap, base, wq, w_off, w_wgt, wv, wo)
    n, d = f.shape
    C, H, W = featmap.shape
    p_total = w_off.shape[1] // 2
    if base.ndim != 3 or base.shape[0] != n or base.shape[2] != 2 \
            or base.shape[1] * reps != p_total or w_wgt.shape[1] != p_total:
        raise ShapeError(f"deformable_attention: base {base.shape} / reps {reps} "
                         f"do not give {p_total} points")
    dt = f.data.dtype

    u = f.data @ wq.data + bq.data
    off = (u @ w_off.data + b_off.data).reshape(n, p_total, 2)
    if base.shape[1] == 1:
        locs = base.data + off                       # broadcast over points
    else:
        locs = np.repeat(base.data, reps, axis=1) + off
    if _STATE.finite_checks and not np.isfinite(locs).all():
        raise NonFiniteError("deformable_attention: non-finite sampling offsets")

    # clamp-to-border bilinear sampling at locs
    flat = locs.reshape(n * p_total, 2)
    hi = np.array([W - 1, H - 1], dtype=dt)
    cl = np.clip(flat, 0.0, hi)
    c0 = np.floor(cl)
    frac = cl - c0
    c0i = c0.astype(np.int64)
    x0, y0 = c0i[:, 0], c0i[:, 1]
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    tx, ty = frac[:, 0], frac[:, 1]
    fm2 = featmap.data.reshape(C, H * W)
    npts = n * p_total
    idx4 = np.concatenate([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1])
    v4 = fm2[:, idx4]
    v00, v01 = v4[:, :npts], v4[:, npts:2 * npts]
    v10, v11 = v4[:, 2 * npts:3 * npts], v4[:, 3 * npts:]
    w00 = (1 - tx) * (1 - ty)
    w01 = tx * (1 - ty)
    w10 = (1 - tx) * ty
    w11 = tx * ty
    samples = (v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11).T   # (NP, C)

    vals = (samples @ wv.data + bv.data).reshape(n, p_total, C)
    wl = u @ w_wgt.data + b_wgt.data
    wl = wl - wl.max(axis=1, keepdims=True)
    e = np.exp(wl)
    w = e / e.sum(axis=1, keepdims=True)
    agg = np.einsum("np,npc->nc", w, vals)
    out = _out(agg @ wo.data + bo.data, "deformable_attention")
    if info is not None:
        info["weights"] = w.copy()
        info["values"] = vals.copy()
        info["aggregate"] = agg.copy()
        info["locations"] = locs.copy()

    xgate = ((flat[:, 0] >= 0) & (flat[:, 0] <= W - 1)).astype(dt)
    ygate = ((flat[:, 1] >= 0) & (flat[:, 1] <= H - 1)).astype(dt)

    def bw(g):
        _acc(wo, agg.T @ g)
        _acc(bo, g.sum(axis=0))
        dagg = g @ wo.data.T                                      # (N, C)
        dw = np.einsum("nc,npc->np", dagg, vals)
        dvals = w[:, :, None] * dagg[:, None, :]
        dwl = w * (dw - (w * dw).sum(axis=1, keepdims=True))
        _acc(w_wgt, u.T @ dwl)
        _acc(b_wgt, dwl.sum(axis=0))
        du = dwl @ w_wgt.data.T

        dval_flat = dvals.reshape(npts, C)
        _acc(wv, samples.T @ dval_flat)
        _acc(bv, dval_flat.sum(axis=0))
        dsamp = (dval_flat @ wv.data.T).T                         # (C, NP)

        if featmap.requires_grad:
            contrib = (dsamp.T[None, :, :]
                       * np.stack([w00, w01, w10, w11])[:, :, None]).reshape(4 * npts, C)
            order = np.argsort(idx4, kind="stable")
            sidx = idx4[order]
            starts = np.concatenate(([0], np.flatnonzero(np.diff(sidx)) + 1))
            sums = np.add.reduceat(contrib[order], starts, axis=0)
            dhw = np.zeros((H * W, C), dtype=dt)
            dhw[sidx[starts]] = sums
            _acc(featmap, dhw.T.reshape(C, H, W))

        dx = (((v01 - v00) * (1 - ty) + (v11 - v10) * ty) * dsamp).sum(axis=0) * xgate
        dy = (((v10 - v00) * (1 - tx) + (v11 - v01) * tx) * dsamp).sum(axis=0) * ygate
        dlocs = np.stack([dx, dy], axis=1).reshape(n, p_total, 2)
        if base.requires_grad:
            _acc(base, dlocs.reshape(n, base.shape[1], reps, 2).sum(axis=2))
        doff_flat = dlocs.reshape(n, p_total * 2)
        _acc(w_off, u.T @ doff_flat)
        _acc(b_off, doff_flat.sum(axis=0))
        du += doff_flat @ w_off.data.T

        _acc(wq, f.data.T @ du)
        _acc(bq, du.sum(axis=0))
        _acc(f, du @ wq.data.T)

    return _record(out, (f, featmap, base, wq, bq, w_off, b_off, w_wgt, b_wgt,
                         wv, bv, wo, bo), bw)


def memory_block(query: Tensor, mem: Sequence[Tensor],
                 wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                 wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
                 ln_g: Tensor, ln_b: Tensor,
                 w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                 info: Optional[dict] = None, eps: float = 1e-5) -> Tensor:
    """Fused memory cross-attention block over per-query slots.

    h = layer_norm(query + Wo * attend(q=Wq query, k/v=Wk/Wv mem)), followed by
    a residual two-layer gelu MLP. mem is a non-empty list of (N, d) slot
    tensors (oldest first); gradients flow into every slot.
    """
    if not mem:
        raise ShapeError("memory_block: empty memory")
    mem = tuple(mem)   # snapshot: the caller's ring buffer mutates later
    _check_dtypes("memory_block", query, mem[0], wq, wk, wv, wo, ln_g, w1, w2)
    n, d = query.shape
    s = len(mem)
    dt = query.data.dtype
    stacked = np.stack([m.data for m in mem], axis=1)        # (N, S, d)
    flat = stacked.reshape(n * s, d)
    q = query.data @ wq.data + bq.data
    k = (flat @ wk.data + bk.data).reshape(n, s, d)
    v = (flat @ wv.data + bv.data).reshape(n, s, d)
    sc = dt.type(1.0 / math.sqrt(d))
    scores = np.einsum("nd,nsd->ns", q, k) * sc
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    w = e / e.sum(axis=1, keepdims=True)
    ctx = np.einsum("ns,nsd->nd", w, v)
    attn = ctx @ wo.data + bo.data

    res = query.data + attn
    mu = res.sum(axis=-1, keepdims=True) * (1.0 / d)
    diff = res - mu
    var = (diff * diff).sum(axis=-1, keepdims=True) * (1.0 / d)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = diff * inv
    h = ln_g.data * xhat + ln_b.data

    h1 = h @ w1.data + b1.data
    c = dt.type(math.sqrt(2.0 / math.pi))
    kg = dt.type(GELU_TANH_COEFF)
    ug = c * (h1 + kg * h1 * h1 * h1)
    tg = np.tanh(ug)
    half = dt.type(0.5)
    a = half * h1 * (1 + tg)
    out = _out(h + (a @ w2.data + b2.data), "memory_block")
    if info is not None:
        info["weights"] = w.copy()

    def bw(g):
        # mlp residual
        _acc(w2, a.T @ g)
        _acc(b2, g.sum(axis=0))
        da = g @ w2.data.T
        dug = c * (1 + 3 * kg * h1 * h1)
        dh1 = da * (half * (1 + tg) + half * h1 * (1 - tg * tg) * dug)
        _acc(w1, h.T @ dh1)
        _acc(b1, dh1.sum(axis=0))
        dh = g + dh1 @ w1.data.T
        # layer norm
        _acc(ln_g, (dh * xhat).sum(axis=0))
        _acc(ln_b, dh.sum(axis=0))
        dxhat = dh * ln_g.data
        m1 = dxhat.sum(axis=-1, keepdims=True) * (1.0 / d)
        m2 = (dxhat * xhat).sum(axis=-1, keepdims=True) * (1.0 / d)
        dres = (dxhat - m1 - xhat * m2) * inv
        # attention projections
        _acc(wo, ctx.T @ dres)
        _acc(bo, dres.sum(axis=0))
        dctx = dres @ wo.data.T
        dv = w[:, :, None] * dctx[:, None, :]
        dw = np.einsum("nd,nsd->ns", dctx, v)
        dscores = w * (dw - (w * dw).sum(axis=1, keepdims=True))
        dq = np.einsum("ns,nsd->nd", dscores, k) * sc
        dk = dscores[:, :, None] * q[:, None, :] * sc
        _acc(wq, query.data.T @ dq)
        _acc(bq, dq.sum(axis=0))
        dquery = dq @ wq.data.T + dres
        dkf = dk.reshape(n * s, d)
        dvf = dv.reshape(n * s, d)
        _acc(wk, flat.T @ dkf)
        _acc(bk, dkf.sum(axis=0))
        _acc(wv, flat.T @ dvf)
        _acc(bv, dvf.sum(axis=0))
        dflat = dkf @ wk.data.T + dvf @ wv.data.T
        dstack = dflat.reshape(n, s, d)
        for i, m in enumerate(mem):
            _acc(m, dstack[:, i, :])
        _acc(query, dquery)

    return _record(out, (query, *mem, wq, bq, wk, bk, wv, bv, wo, bo,
                         ln_g, ln_b, w1, b1, w2, b2), bw)


def block_tail(x: Tensor, attn: Tensor, ln_g: Tensor, ln_b: Tensor,
               w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
               residual: bool = True, eps: float = 1e-5) -> Tensor:
    """Fused transformer tail: h = layer_norm(x + attn); gelu MLP on h.

    With residual=True returns h + mlp(h) (square MLP); with residual=False
    returns mlp(h) alone (head readout, output width may differ)."""
    _check_dtypes("block_tail", x, attn, ln_g, w1, w2)
    if x.shape != attn.shape:
        raise ShapeError(f"block_tail: shapes {x.shape} vs {attn.shape}")
    dt = x.data.dtype
    d = x.shape[-1]
    res = x.data + attn.data
    mu = res.sum(axis=-1, keepdims=True) * (1.0 / d)
    diff = res - mu
    var = (diff * diff).sum(axis=-1, keepdims=True) * (1.0 / d)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = diff * inv
    h = ln_g.data * xhat + ln_b.data
    h1 = h @ w1.data + b1.data
    c = dt.type(math.sqrt(2.0 / math.pi))
    kg = dt.type(GELU_TANH_COEFF)
    ug = c * (h1 + kg * h1 * h1 * h1)
    tg = np.tanh(ug)
    half = dt.type(0.5)
    a = half * h1 * (1 + tg)
    m = a @ w2.data + b2.data
    out = _out(h + m if residual else m, "block_tail")

    def bw(g):
        _acc(w2, a.T @ g)
        _acc(b2, g.sum(axis=0))
        da = g @ w2.data.T
        dug = c * (1 + 3 * kg * h1 * h1)
        dh1 = da * (half * (1 + tg) + half * h1 * (1 - tg * tg) * dug)
        _acc(w1, h.T @ dh1)
        _acc(b1, dh1.sum(axis=0))
        dh = dh1 @ w1.data.T
        if residual:
            dh = dh + g
        _acc(ln_g, (dh * xhat).sum(axis=0))
        _acc(ln_b, dh.sum(axis=0))
        dxhat = dh * ln_g.data
        m1 = dxhat.sum(axis=-1, keepdims=True) * (1.0 / d)
        m2 = (dxhat * xhat).sum(axis=-1, keepdims=True) * (1.0 / d)
        dres = (dxhat - m1 - xhat * m2) * inv
        _acc(x, dres)
        _acc(attn, dres)

    return _record(out, (x, attn, ln_g, ln_b, w1, b1, w2, b2), bw)


def map_correlation(f: Tensor, featmap: Tensor, s: float) -> Tensor:
    """Scaled correlation of row features against every map cell:
    out[n, y*W + x] = s * <f[n], featmap[:, y, x]>."""
    _check_dtypes("map_correlation", f, featmap)
    if f.ndim != 2 or featmap.ndim != 3 or f.shape[1] != featmap.shape[0]:
        raise ShapeError(f"map_correlation: shapes {f.shape} / {featmap.shape}")
    d, H, W = featmap.shape
    o2 = featmap.data.reshape(d, H * W)
    sd = f.data.dtype.type(s)
    out = _out((f.data @ o2) * sd, "map_correlation")

    def bw(g):
        gs = g * sd
        _acc(f, gs @ o2.T)
        _acc(featmap, (f.data.T @ gs).reshape(d, H, W))

    return _record(out, (f, featmap), bw)


def cell_gather_project(featmap: Tensor, cells: np.ndarray,
                        w: Tensor, b: Tensor) -> Tensor:
    """Gather feature columns at flattened integer cells (N, K) and apply a
    linear head (d -> 1), giving (N, K) logits.

    Equivalent to bilinear sampling at exact cell centers followed by the
    projection, fused into one node.
    """
    _check_dtypes("cell_gather_project", featmap, w, b)
    d, H, W = featmap.shape
    idx = np.asarray(cells, dtype=np.int64)
    n, k = idx.shape
    if idx.size and (idx.min() < 0 or idx.max() >= H * W):
        raise ShapeError("cell_gather_project: cell index out of range")
    fm2 = featmap.data.reshape(d, H * W)
    flat = idx.reshape(-1)
    feats = fm2[:, flat].T                                  # (N*K, d)
    out = _out((feats @ w.data + b.data).reshape(n, k), "cell_gather_project")

    def bw(g):
        g2 = g.reshape(n * k, 1)
        _acc(w, feats.T @ g2)
        _acc(b, g2.sum(axis=0))
        if featmap.requires_grad:
            contrib = g2 @ w.data.T                         # (N*K, d)
            order = np.argsort(flat, kind="stable")
            sidx = flat[order]
            starts = np.concatenate(([0], np.flatnonzero(np.diff(sidx)) + 1))
            sums = np.add.reduceat(contrib[order], starts, axis=0)
            dhw = np.zeros((H * W, d), dtype=featmap.data.dtype)
            dhw[sidx[starts]] = sums
            _acc(featmap, dhw.T.reshape(d, H, W))

    return _record(out, (featmap, w, b), bw)


# ---------------------------------------------------------------------------
# attention kernels


def slot_attention(q: Tensor, k: Tensor, v: Tensor,
                   info: Optional[dict] = None) -> Tensor:
    """Per-row single-head scaled dot-product attention over memory slots.

    q: (N, d); k, v: (N, S, d). Row n attends only over its own S slots.
    When `info` is given, a copy of the attention weights is stored under
    info["weights"].
    """
    _check_dtypes("slot_attention", q, k, v)
    if q.ndim != 2 or k.ndim != 3 or v.ndim != 3 or k.shape != v.shape \
            or k.shape[0] != q.shape[0] or k.shape[2] != q.shape[1]:
        raise ShapeError(f"slot_attention: shapes {q.shape}/{k.shape}/{v.shape}")
    if k.shape[1] == 0:
        raise ShapeError("slot_attention: zero slots")
    dt = q.data.dtype
    sc = dt.type(1.0 / math.sqrt(q.shape[1]))
    s = np.einsum("nd,nsd->ns", q.data, k.data) * sc
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    w = e / e.sum(axis=1, keepdims=True)
    ctx = np.einsum("ns,nsd->nd", w, v.data)
    out = _out(ctx, "slot_attention")
    if info is not None:
        info["weights"] = w.copy()

    def bw(g):
        dv = w[:, :, None] * g[:, None, :]
        dw = np.einsum("nd,nsd->ns", g, v.data)
        ds = w * (dw - (w * dw).sum(axis=1, keepdims=True))
        _acc(q, np.einsum("ns,nsd->nd", ds, k.data) * sc)
        _acc(k, ds[:, :, None] * q.data[:, None, :] * sc)
        _acc(v, dv)

    return _record(out, (q, k, v), bw)


def point_attention(w: Tensor, v: Tensor) -> Tensor:
    """Convex aggregation of per-point values: (N, P) weights x (N, P, d)."""
    _check_dtypes("point_attention", w, v)
    if w.ndim != 2 or v.ndim != 3 or v.shape[:2] != w.shape:
        raise ShapeError(f"point_attention: shapes {w.shape}/{v.shape}")
    out = _out(np.einsum("np,npd->nd", w.data, v.data), "point_attention")

    def bw(g):
        _acc(w, np.einsum("nd,npd->np", g, v.data))
        _acc(v, w.data[:, :, None] * g[:, None, :])

    return _record(out, (w, v), bw)


# ---------------------------------------------------------------------------
# loss kernels


def _masked_count(mask: Optional[np.ndarray], lead: int) -> np.ndarray:
    if mask is None:
        return np.ones(lead, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != (lead,):
        raise ShapeError(f"loss mask shape {m.shape}, expected ({lead},)")
    return m


def _zero_scalar(dt) -> Tensor:
    return _wrap(np.zeros((), dtype=dt))


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean CE over masked rows; targets are class indices into the last axis."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (n,):
        raise ShapeError(f"cross_entropy: targets shape {tgt.shape} vs ({n},)")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= c):
        raise ShapeError("cross_entropy: index target out of class range")
    m = _masked_count(mask, n)
    cnt = int(m.sum())
    dt = logits.data.dtype
    if cnt == 0:
        return _zero_scalar(dt)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -(logp[rows, tgt] * m).sum() / cnt
    out = _out(np.asarray(loss, dtype=dt), "cross_entropy")

    def bw(g):
        p = np.exp(logp)
        p[rows, tgt] -= 1
        _acc(logits, p * (m.astype(dt) * float(g) / cnt)[:, None])

    return _record(out, (logits,), bw)


def binary_cross_entropy(logits: Tensor, targets: np.ndarray,
                         mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean sigmoid cross-entropy over masked elements, computed from logits.

    Stable form: max(z, 0) - z*t + log1p(exp(-|z|)). `mask`, when given, has
    the leading shape of the logits and selects whole rows.
    """
    zd = logits.data
    t = np.asarray(targets, dtype=zd.dtype)
    if t.shape != zd.shape:
        raise ShapeError(f"binary_cross_entropy: target shape {t.shape} vs {zd.shape}")
    if logits.ndim == 0:
        raise ShapeError("binary_cross_entropy: scalar logits unsupported")
    m = _masked_count(mask, zd.shape[0])
    mfull = m.reshape((zd.shape[0],) + (1,) * (zd.ndim - 1))
    mfull = np.broadcast_to(mfull, zd.shape)
    cnt = int(mfull.sum())
    if cnt == 0:
        return _zero_scalar(zd.dtype)
    ew = np.maximum(zd, 0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    out = _out(np.asarray((ew * mfull).sum() / cnt, dtype=zd.dtype), "binary_cross_entropy")

    def bw(g):
        s = np.where(zd >= 0, 1.0 / (1.0 + np.exp(-np.abs(zd))),
                     np.exp(-np.abs(zd)) / (1.0 + np.exp(-np.abs(zd)))).astype(zd.dtype)
        _acc(logits, (s - t) * mfull * (float(g) / cnt))

    return _record(out, (logits,), bw)


def l1_loss(pred: Tensor, target: np.ndarray,
            mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean absolute error over masked elements; mask selects leading rows."""
    pd = pred.data
    t = np.asarray(target, dtype=pd.dtype)
    if t.shape != pd.shape:
        raise ShapeError(f"l1_loss: target shape {t.shape} vs {pd.shape}")
    if pred.ndim == 0:
        raise ShapeError("l1_loss: scalar input unsupported")
    m = _masked_count(mask, pd.shape[0])
    mfull = np.broadcast_to(m.reshape((pd.shape[0],) + (1,) * (pd.ndim - 1)), pd.shape)
    cnt = int(mfull.sum())
    if cnt == 0:
        return _zero_scalar(pd.dtype)
    diff = pd - t
    out = _out(np.asarray((np.abs(diff) * mfull).sum() / cnt, dtype=pd.dtype), "l1_loss")

    def bw(g):
        _acc(pred, np.sign(diff) * mfull * (float(g) / cnt))

    return _record(out, (pred,), bw)


# ---------------------------------------------------------------------------
# parameter-tree utilities


def iter_named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses / lists / dicts and yield (dotted-name, Tensor) pairs.

    Traversal order is deterministic (field order, list order, dict insertion
    order), which checkpointing and the optimizer both rely on.
    """
    if isinstance(obj, Tensor):
        yield prefix or "param", obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            sub = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_named_tensors(sub, name)
    elif isinstance(obj, (list, tuple)):
        for i, sub in enumerate(obj):
            yield from iter_named_tensors(sub, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for k, sub in obj.items():
            yield from iter_named_tensors(sub, f"{prefix}.{k}" if prefix else str(k))
    # scalars/None/ndarray config fields are not parameters


def zero_grads(obj) -> None:
    for _, t in iter_named_tensors(obj):
        t.grad = None
