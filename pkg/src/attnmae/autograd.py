"""Dense float64 tensors with reverse-mode differentiation.

Everything is built around one rule: every reduction that can affect a
test oracle runs in a fixed, documented order. Matrix products accumulate
over the contraction index in strictly ascending order, so they agree
bit-for-bit with a naive triple loop written the same way. The inner
kernels are numba-compiled for speed but keep that exact summation order
(no fastmath, no fused multiply-add).

The graph is a flat tape: operations are recorded in construction order
and `backward` replays them strictly in reverse. Tensors are immutable
after creation except for explicit in-place parameter updates by an
optimizer, which must be followed by `reset_tape()`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from numba import njit

__all__ = [
    "Tensor",
    "ShapeError",
    "DegenerateRowError",
    "EmptyMaskError",
    "GraphStateError",
    "matmul",
    "add",
    "scale",
    "gelu",
    "row_softmax",
    "layer_norm",
    "reshape",
    "transpose",
    "embed_lookup",
    "masked_row_mean",
    "cross_entropy_masked",
    "mse_masked",
    "backward",
    "reset_tape",
    "no_grad",
    "softmax_rows_data",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DegenerateRowError(ValueError):
    """A softmax row has no finite entry."""


class EmptyMaskError(ValueError):
    """A masked loss was given an empty index set."""


class GraphStateError(RuntimeError):
    """The tape was used after being consumed by backward."""


# ---------------------------------------------------------------------------
# tensors and the tape

class Tensor:
    """Dense row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Tape:
    def __init__(self):
        self.nodes = []
        self.consumed = False
        self.enabled = True


_TAPE = _Tape()


def reset_tape() -> None:
    """Drop all recorded operations and re-arm backward."""
    _TAPE.nodes.clear()
    _TAPE.consumed = False


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording them."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def _wrap(out_data: np.ndarray, inputs: Sequence[Tensor],
          bw: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = _TAPE.enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        _TAPE.nodes.append((out, tuple(inputs), bw))
    return out


def backward(loss: Tensor, accumulate: bool = False) -> None:
    """Populate .grad on every tensor the loss depends on.

    Visits tape nodes in strict reverse construction order. Unless
    `accumulate` is set, all gradients touched by this tape are zeroed
    first, so repeated steps never silently accumulate.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if _TAPE.consumed:
        raise GraphStateError("backward was already run on this tape; call reset_tape() first")
    if not accumulate:
        for out, inputs, _ in _TAPE.nodes:
            out.grad = None
            for t in inputs:
                t.grad = None
    loss.grad = np.array(1.0)
    for out, inputs, bw in reversed(_TAPE.nodes):
        g = out.grad
        if g is None:
            continue
        for t, gi in zip(inputs, bw(g)):
            if gi is None or not (t.requires_grad or _needs_grad(t)):
                continue
            t.grad = gi if t.grad is None else t.grad + gi
    _TAPE.consumed = True


def _needs_grad(t: Tensor) -> bool:
    # intermediate outputs carry requires_grad when any ancestor does
    return t.requires_grad


# ---------------------------------------------------------------------------
# ascending-order matrix product kernels

@njit(cache=True)
def _mm3_shared(a, b, out):  # a (B,m,k), b (k,p)
    B, m, k = a.shape
    p = b.shape[1]
    for s in range(B):
        for i in range(m):
            for t in range(k):
                ait = a[s, i, t]
                for j in range(p):
                    out[s, i, j] += ait * b[t, j]


@njit(cache=True)
def _mm3_batched(a, b, out):  # a (B,m,k), b (B,k,p)
    B, m, k = a.shape
    p = b.shape[2]
    for s in range(B):
        for i in range(m):
            for t in range(k):
                ait = a[s, i, t]
                for j in range(p):
                    out[s, i, j] += ait * b[s, t, j]


def matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw-array matrix product with ascending contraction order.

    c[..., i, j] = sum over t ascending of a[..., i, t] * b[..., t, j],
    one rounding per addition, exactly as a triple loop would compute it.
    """
    m, k = a.shape[-2:]
    k2, p = b.shape[-2:]
    if k != k2:
        raise ShapeError(f"matmul inner mismatch: {a.shape} x {b.shape}")
    if k == 1:
        try:
            return a * b  # single product per cell, no summation at all
        except ValueError as e:
            raise ShapeError(f"matmul batch mismatch: {a.shape} x {b.shape}") from e
    if a.ndim == 2 and b.ndim == 2:
        out = np.zeros((1, m, p))
        _mm3_shared(np.ascontiguousarray(a)[None], np.ascontiguousarray(b), out)
        return out[0]
    try:
        lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch mismatch: {a.shape} x {b.shape}") from e
    batch = int(np.prod(lead)) if lead else 1
    a3 = np.ascontiguousarray(np.broadcast_to(a, lead + (m, k)).reshape(batch, m, k))
    out = np.zeros((batch, m, p))
    if b.ndim == 2:
        _mm3_shared(a3, np.ascontiguousarray(b), out)
    else:
        b3 = np.ascontiguousarray(np.broadcast_to(b, lead + (k, p)).reshape(batch, k, p))
        _mm3_batched(a3, b3, out)
    return out.reshape(lead + (m, p))


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = np.add.reduce(g, axis=0)
    for ax, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = np.add.reduce(g, axis=ax, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """c = a @ b over the last two axes, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner mismatch: {a.shape} x {b.shape}")
    out_data = matmul_data(a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        ga = matmul_data(g, _swap_last(bd))
        gb = matmul_data(_swap_last(ad), g)
        return _reduce_to_shape(ga, ad.shape), _reduce_to_shape(gb, bd.shape)

    return _wrap(out_data, (a, b), bw)


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# pointwise ops

def _check_leading_broadcast(sa: tuple, sb: tuple) -> None:
    small, large = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if small != large[len(large) - len(small):]:
        raise ShapeError(f"add broadcasts only over leading axes: {sa} vs {sb}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape)
    out_data = a.data + b.data
    sa, sb = a.data.shape, b.data.shape

    def bw(g):
        return _reduce_to_shape(g, sa), _reduce_to_shape(g, sb)

    return _wrap(out_data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        return (g * s,)

    return _wrap(a.data * s, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation gelu: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3))).

    The same closed form is what finite-difference oracles see.
    """
    # in-place passes; this is the widest activation and temporaries dominate
    x = a.data
    th = x * x
    th *= x
    th *= 0.044715
    th += x
    th *= _GELU_C
    np.tanh(th, out=th)
    out_data = th + 1.0
    out_data *= x
    out_data *= 0.5

    def bw(g):
        d = th * th
        np.subtract(1.0, d, out=d)  # sech^2
        d *= x
        d *= 0.5 * _GELU_C
        poly = x * x
        poly *= 3.0 * 0.044715
        poly += 1.0
        d *= poly
        d += 0.5
        d += 0.5 * th
        d *= g
        return (d,)

    return _wrap(out_data, (a,), bw)


def softmax_rows_data(x: np.ndarray) -> np.ndarray:
    """Raw-array softmax over the last axis; -inf entries map to exact 0."""
    m = np.max(x, axis=-1, keepdims=True)
    if not np.all(m > -np.inf):
        raise DegenerateRowError("softmax row with no finite entry")
    e = np.exp(x - m)
    denom = np.add.reduce(e, axis=-1, keepdims=True)
    if not np.all(np.isfinite(denom)):
        raise ValueError("softmax input must be finite or -inf")
    return e / denom


def row_softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis with max-subtraction.

    Entries of -inf receive exactly zero weight; a row that is all -inf is
    a degenerate-row error, never NaN.
    """
    y = softmax_rows_data(a.data)

    def bw(g):
        dot = np.add.reduce(g * y, axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _wrap(y, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then gain/bias."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    if not eps > 0:
        raise ValueError("layer_norm eps must be positive")
    x = a.data
    mu = np.add.reduce(x, axis=-1, keepdims=True) / d
    xc = x - mu
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bw(g):
        gg = g * gain.data
        mean_gg = np.add.reduce(gg, axis=-1, keepdims=True) / d
        mean_gg_xhat = np.add.reduce(gg * xhat, axis=-1, keepdims=True) / d
        gx = inv * (gg - mean_gg - xhat * mean_gg_xhat)
        ggain = _reduce_to_shape(g * xhat, gain.data.shape)
        gbias = _reduce_to_shape(g, bias.data.shape)
        return gx, ggain, gbias

    return _wrap(out_data, (a, gain, bias), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.data.shape
    out_data = np.ascontiguousarray(a.data).reshape(shape)

    def bw(g):
        return (g.reshape(orig),)

    return _wrap(out_data, (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(np.transpose(a.data, axes))

    def bw(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _wrap(out_data, (a,), bw)


def embed_lookup(table: Tensor, ids: np.ndarray, keep: np.ndarray | None = None) -> Tensor:
    """Gather rows of `table` at integer `ids`, optionally scaled per slot.

    `keep` (same shape as ids) multiplies each gathered row; a zero keeps
    the slot free of any contribution from, and any gradient to, that row.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")
    rows = table.data[ids]
    if keep is not None:
        rows = rows * np.asarray(keep, dtype=np.float64)[..., None]
    tshape = table.data.shape

    def bw(g):
        gt = np.zeros(tshape)
        gi = g if keep is None else g * np.asarray(keep, dtype=np.float64)[..., None]
        np.add.at(gt, ids.reshape(-1), gi.reshape(-1, tshape[1]))
        return (gt,)

    return _wrap(rows, (table,), bw)


def masked_row_mean(a: Tensor, keep: np.ndarray) -> Tensor:
    """Mean over kept rows of the middle axis: [B, l, d] -> [B, d]."""
    k = np.asarray(keep, dtype=np.float64)
    if k.shape != a.shape[:-1]:
        raise ShapeError(f"row mask {k.shape} does not match {a.shape[:-1]}")
    counts = np.add.reduce(k, axis=-1)
    if np.any(counts == 0):
        raise ValueError("masked_row_mean needs at least one kept row per sample")
    out_data = np.add.reduce(a.data * k[..., None], axis=-2) / counts[..., None]

    def bw(g):
        return ((g[..., None, :] / counts[..., None, None]) * k[..., None],)

    return _wrap(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# masked losses

def _normalize_masked_args(x: np.ndarray, masks) -> tuple[bool, list[np.ndarray]]:
    """Return (was_batched, per-sample sorted index arrays)."""
    batched = x.ndim == 3
    if batched:
        if not isinstance(masks, (list, tuple)):
            masks = [masks] * x.shape[0]
        idx = [np.sort(np.asarray(m, dtype=np.int64)) for m in masks]
        if len(idx) != x.shape[0]:
            raise ShapeError(f"{len(idx)} masks for batch of {x.shape[0]}")
    else:
        idx = [np.sort(np.asarray(masks, dtype=np.int64))]
    n = x.shape[-2]
    for m in idx:
        if m.size == 0:
            raise EmptyMaskError("loss mask is empty")
        if m.min() < 0 or m.max() >= n:
            raise IndexError(f"mask index out of range for n={n}")
    return batched, idx


def cross_entropy_masked(logits: Tensor, targets, mask_indices) -> Tensor:
    """Mean over masked positions of -log softmax(logits)[target].

    Accepts [n, vocab] with one index set or [B, n, vocab] with one set per
    sample; per-sample means are averaged over the batch.
    """
    x = logits.data
    batched, idx = _normalize_masked_args(x, mask_indices)
    x3 = x if batched else x[None]
    tg = np.asarray(targets, dtype=np.int64)
    tg2 = tg if batched else tg[None]
    vocab = x3.shape[-1]
    if tg2.size and (tg2.min() < 0 or tg2.max() >= vocab):
        raise IndexError(f"target out of range for vocab={vocab}")
    nb = x3.shape[0]
    total = 0.0
    saved = []
    for s in range(nb):
        rows = x3[s][idx[s]]
        t = tg2[s][idx[s]]
        m = np.max(rows, axis=-1, keepdims=True)
        e = np.exp(rows - m)
        z = np.add.reduce(e, axis=-1, keepdims=True)
        lse = m[:, 0] + np.log(z[:, 0])
        losses = lse - rows[np.arange(len(t)), t]
        total += np.add.reduce(losses) / len(t)
        saved.append((e / z, t))
    out_data = np.array(total / nb)

    def bw(g):
        gx = np.zeros_like(x3)
        gs = float(g)
        for s in range(nb):
            p, t = saved[s]
            p = p.copy()
            p[np.arange(len(t)), t] -= 1.0
            gx[s][idx[s]] = p * (gs / (len(t) * nb))
        return (gx if batched else gx[0],)

    return _wrap(out_data, (logits,), bw)


def mse_masked(pred: Tensor, target: Tensor, mask_indices) -> Tensor:
    """Mean over masked positions and channels of (pred - target)^2."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse operands differ: {pred.shape} vs {target.shape}")
    x = pred.data
    batched, idx = _normalize_masked_args(x, mask_indices)
    x3 = x if batched else x[None]
    y3 = target.data if batched else target.data[None]
    nb = x3.shape[0]
    total = 0.0
    for s in range(nb):
        d = x3[s][idx[s]] - y3[s][idx[s]]
        total += np.add.reduce((d * d).reshape(-1)) / d.size
    out_data = np.array(total / nb)

    def bw(g):
        gp = np.zeros_like(x3)
        gs = float(g)
        for s in range(nb):
            d = x3[s][idx[s]] - y3[s][idx[s]]
            gp[s][idx[s]] = d * (2.0 * gs / (d.size * nb))
        gp = gp if batched else gp[0]
        return gp, -gp

    return _wrap(out_data, (pred, target), bw)
