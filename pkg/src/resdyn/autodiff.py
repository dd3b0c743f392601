"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the kernels the residual network needs are provided; each op computes
its forward value eagerly and, when a tape is active, records a closure
holding the analytic backward pass.  ``backward`` replays the closures in
exact reverse recording order.  There is no general broadcasting beyond
what the listed ops define.

Typical use::

    with Tape() as tape:
        y = linear(x, w, b)
        loss = mean(smooth_l1(y))
    backward(tape, loss)        # populates .grad on every input

Ops called without an active tape are plain forward computations, which is
how evaluation and finite-difference probes run.
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Sequence

import numpy as np

_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "resdyn_tape", default=None)


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of backward closures for one forward pass.

    Single-owner: enter, run the forward, call ``backward`` once.  A second
    backward on the same tape raises.
    """

    def __init__(self) -> None:
        self.ops: list[Callable[[], None]] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if _TAPE.get() is not None:
            raise TapeError("a tape is already active")
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._token)


class Tensor:
    """Array plus optional gradient of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        if dtype is not None:
            self.data = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def _emit(out: Tensor, bw: Callable[[], None]) -> None:
    tape = _TAPE.get()
    if tape is not None:
        tape.ops.append(bw)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate gradients of everything the scalar ``loss`` depends on."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; re-record first")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for bw in reversed(tape.ops):
        bw()


# --------------------------------------------------------------- primitives

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b over the last axis; x may carry leading batch axes."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"linear: x last dim {x.data.shape[-1]} "
                         f"!= w first dim {w.data.shape[0]}")
    if b.data.shape != (w.data.shape[1],):
        raise ValueError(f"linear: bias shape {b.data.shape} != ({w.data.shape[1]},)")
    lead = x.data.shape[:-1]
    xf = x.data.reshape(-1, x.data.shape[-1])
    out = Tensor(xf @ w.data + b.data)
    out.data = out.data.reshape(*lead, w.data.shape[1])

    def bw():
        if out.grad is None:
            return
        gf = out.grad.reshape(-1, w.data.shape[1])
        x.accumulate((gf @ w.data.T).reshape(x.data.shape))
        w.accumulate(xf.T @ gf)
        b.accumulate(gf.sum(axis=0))

    _emit(out, bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; both operands 2-D, or batched with equal leading dims."""
    if a.data.ndim != b.data.ndim:
        raise ValueError("matmul: operands must have equal ndim")
    if a.data.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError("matmul: leading batch dims must match")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: inner dims {a.data.shape[-1]} != {b.data.shape[-2]}")
    out = Tensor(a.data @ b.data)

    def bw():
        if out.grad is None:
            return
        a.accumulate(out.grad @ np.swapaxes(b.data, -1, -2))
        b.accumulate(np.swapaxes(a.data, -1, -2) @ out.grad)

    _emit(out, bw)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy suffix broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum; y may broadcast against x from the trailing axes."""
    out = Tensor(x.data + y.data)
    if out.data.shape != x.data.shape:
        raise ValueError(f"add: broadcast must preserve x shape {x.data.shape}")

    def bw():
        if out.grad is None:
            return
        x.accumulate(out.grad)
        y.accumulate(_unbroadcast(out.grad, y.data.shape))

    _emit(out, bw)
    return out


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if x.data.shape != y.data.shape:
        raise ValueError("mul: shapes must match")
    out = Tensor(x.data * y.data)

    def bw():
        if out.grad is None:
            return
        x.accumulate(out.grad * y.data)
        y.accumulate(out.grad * x.data)

    _emit(out, bw)
    return out


def mul_const(x: Tensor, c) -> Tensor:
    """Product with a constant scalar/array (no gradient into the constant)."""
    c = np.asarray(c, dtype=x.data.dtype)
    out = Tensor(x.data * c)

    def bw():
        if out.grad is None:
            return
        x.accumulate(_unbroadcast(out.grad * c, x.data.shape))

    _emit(out, bw)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bw():
        if out.grad is None:
            return
        x.accumulate(out.grad.reshape(x.data.shape))

    _emit(out, bw)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def bw():
        if out.grad is None:
            return
        x.accumulate(out.grad.transpose(inverse))

    _emit(out, bw)
    return out


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    base = xs[0].data.shape
    for t in xs[1:]:
        if (t.data.shape[:axis] + t.data.shape[axis:][1:]
                != base[:axis] + base[axis:][1:]):
            raise ValueError("concat: non-axis dims must match")
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis))
    sizes = [t.data.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def bw():
        if out.grad is None:
            return
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate(out.grad[tuple(idx)])

    _emit(out, bw)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(x.data * mask)

    def bw():
        if out.grad is None:
            return
        x.accumulate(out.grad * mask)

    _emit(out, bw)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; rows sum to one."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))

    def bw():
        if out.grad is None:
            return
        y = out.data
        g = out.grad
        x.accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    _emit(out, bw)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ValueError("layer_norm: gamma/beta must match last dim")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bw():
        if out.grad is None:
            return
        g = out.grad
        lead = tuple(range(g.ndim - 1))
        gamma.accumulate((g * xhat).sum(axis=lead))
        beta.accumulate(g.sum(axis=lead))
        gx = g * gamma.data
        mean_gx = gx.mean(axis=-1, keepdims=True)
        mean_gx_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
        x.accumulate(inv * (gx - mean_gx - xhat * mean_gx_xhat))

    _emit(out, bw)
    return out


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Mean over one axis, or over all elements when axis is None."""
    out = Tensor(x.data.mean(axis=axis))
    n = x.data.size if axis is None else x.data.shape[axis]

    def bw():
        if out.grad is None:
            return
        if axis is None:
            x.accumulate(np.full_like(x.data, out.grad / n))
        else:
            x.accumulate(np.expand_dims(out.grad, axis) / n
                         * np.ones_like(x.data))

    _emit(out, bw)
    return out


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over all elements when axis is None."""
    out = Tensor(x.data.sum(axis=axis))

    def bw():
        if out.grad is None:
            return
        if axis is None:
            x.accumulate(np.full_like(x.data, out.grad))
        else:
            x.accumulate(np.expand_dims(out.grad, axis)
                         * np.ones_like(x.data))

    _emit(out, bw)
    return out


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth L1: 0.5 x^2 / beta inside |x| < beta, |x| - beta/2 outside."""
    if beta <= 0:
        raise ValueError("smooth_l1: beta must be positive")
    a = np.abs(x.data)
    inside = a < beta
    out = Tensor(np.where(inside, 0.5 * x.data * x.data / beta, a - 0.5 * beta))

    def bw():
        if out.grad is None:
            return
        x.accumulate(out.grad * np.where(inside, x.data / beta, np.sign(x.data)))

    _emit(out, bw)
    return out


# --------------------------------------------------------------- attention

def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int = 1) -> Tensor:
    """Scaled dot-product attention softmax(q k^T / sqrt(d_head)) v.

    Accepts [N, d] or batched [B, N, d] operands; with ``num_heads`` > 1
    the feature axis is split into heads, attended per head, and
    re-concatenated.  Built from taped primitives, so the backward pass
    is the composition of theirs.
    """
    if q.data.shape[-1] != k.data.shape[-1] or k.data.shape != v.data.shape:
        raise ValueError("attention: q/k/v feature dims must agree and k, v "
                         "must be the same shape")
    if q.data.ndim == 2:
        qb = reshape(q, (1,) + q.data.shape)
        kb = reshape(k, (1,) + k.data.shape)
        vb = reshape(v, (1,) + v.data.shape)
        out = attention(qb, kb, vb, num_heads=num_heads)
        return reshape(out, out.data.shape[1:])
    if q.data.ndim != 3:
        raise ValueError("attention: operands must be 2-D or 3-D")

    bsz, n_q, d = q.data.shape
    n_k = k.data.shape[1]
    if d % num_heads:
        raise ValueError(f"attention: dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def split(t: Tensor, n: int) -> Tensor:
        return transpose(reshape(t, (bsz, n, num_heads, dh)), (0, 2, 1, 3))

    qh = split(q, n_q)                                   # [B, H, Nq, dh]
    kh = split(k, n_k)
    vh = split(v, n_k)
    scores = mul_const(matmul(qh, transpose(kh, (0, 1, 3, 2))),
                       1.0 / math.sqrt(dh))              # [B, H, Nq, Nk]
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, vh)                            # [B, H, Nq, dh]
    return reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, n_q, d))


# ------------------------------------------------------------ verification

def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-5, max_coords: int = 100,
               seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference grads.

    ``fn`` must be a deterministic closure over ``params`` returning a
    scalar loss Tensor.  Up to ``max_coords`` coordinates are probed per
    parameter.  Absolute differences at or below 1e-8 count as zero: a
    mathematically zero gradient (e.g. an attention key bias) yields pure
    roundoff from the finite difference, not signal.  Run in 64-bit.
    """
    zero_grads(params)
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        grad = (np.zeros_like(flat) if p.grad is None
                else p.grad.reshape(-1))
        n = flat.size
        coords = (np.arange(n) if n <= max_coords
                  else rng.choice(n, size=max_coords, replace=False))
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = float(fn().data)
            flat[idx] = orig - h
            f_minus = float(fn().data)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            diff = abs(numeric - grad[idx])
            if diff <= 1e-8:
                continue
            denom = max(abs(numeric), abs(grad[idx]), 1e-8)
            worst = max(worst, diff / denom)
    return worst
