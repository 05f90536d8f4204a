"""Multi-head attention maps, attention-weighted aggregation, and the
pre-norm transformer blocks used for the deep trunk.

Queries come either from the embedded inputs (self-attention, l = n) or
from a learned latent array (cross-attention, l < n, linear cost in n).
Per-head scores are scaled by sqrt(d_k / heads), the per-head key width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import Rng

__all__ = ["AttentionParams", "BlockParams", "ContractViolationError",
           "init_attention", "init_block", "attention_map", "value_heads",
           "attend", "transformer_block", "set_debug_checks"]

_DEBUG_CHECKS = True


def set_debug_checks(enabled: bool) -> None:
    """Toggle contract checks that cost a pass over attention weights."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class ContractViolationError(RuntimeError):
    """A debug-mode contract check failed."""


@dataclass
class AttentionParams:
    w_q: Tensor                 # (d_embed, d_k)
    w_k: Tensor                 # (d_embed, d_k)
    w_v: Tensor                 # (d_embed, d_v)
    w_o: Tensor                 # (d_v, d_v)
    latents: Tensor | None      # (l, d_embed) for cross-attention
    heads: int


def init_attention(kind: str, d_embed: int, d_k: int, d_v: int, heads: int,
                   latent_count: int, rng: Rng, sigma: float = 0.02) -> AttentionParams:
    if d_k % heads or d_v % heads:
        raise ag.ShapeError(f"d_k={d_k} and d_v={d_v} must divide heads={heads}")
    latents = None
    if kind == "cross":
        latents = Tensor(sigma * rng.normals((latent_count, d_embed)), requires_grad=True)
    return AttentionParams(
        w_q=Tensor(sigma * rng.normals((d_embed, d_k)), requires_grad=True),
        w_k=Tensor(sigma * rng.normals((d_embed, d_k)), requires_grad=True),
        w_v=Tensor(sigma * rng.normals((d_embed, d_v)), requires_grad=True),
        w_o=Tensor(sigma * rng.normals((d_v, d_v)), requires_grad=True),
        latents=latents,
        heads=heads,
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., rows, h*w] -> [..., h, rows, w]."""
    *lead, rows, width = x.shape
    x = ag.reshape(x, (*lead, rows, heads, width // heads))
    order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return ag.transpose(x, order)


def _merge_heads(x: Tensor) -> Tensor:
    """[..., h, rows, w] -> [..., rows, h*w]."""
    *lead, h, rows, w = x.shape
    order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return ag.reshape(ag.transpose(x, order), (*lead, rows, h * w))


def attention_map(xhat: Tensor, params: AttentionParams) -> Tensor:
    """Unnormalized per-head query-to-input scores.

    Returns [.., heads, l, n] where l = n for self-attention and the latent
    count for cross-attention. Scores are (Q K^T) / sqrt(d_k / heads).
    """
    k = ag.matmul(xhat, params.w_k)
    q_src = params.latents if params.latents is not None else xhat
    q = ag.matmul(q_src, params.w_q)
    qh = _split_heads(q, params.heads)
    kh = _split_heads(k, params.heads)
    kt = ag.transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2))
    d_head = params.w_k.shape[1] // params.heads
    return ag.scale(ag.matmul(qh, kt), 1.0 / np.sqrt(d_head))


def value_heads(xhat: Tensor, params: AttentionParams) -> Tensor:
    """Per-head value rows [.., heads, n, d_v/heads]."""
    return _split_heads(ag.matmul(xhat, params.w_v), params.heads)


def attend(ahat: Tensor, v: Tensor, w_o: Tensor) -> Tensor:
    """Weighted value sums per head, heads concatenated, output-projected.

    `ahat` must already be softmax-normalized; in debug mode rows whose
    sum strays from 1 by more than 1e-9 raise a contract violation.
    """
    if _DEBUG_CHECKS:
        sums = np.add.reduce(ahat.data, axis=-1)
        if not np.all(np.abs(sums - 1.0) <= 1e-9):
            worst = float(np.max(np.abs(sums - 1.0)))
            raise ContractViolationError(f"attend() got unnormalized rows (off by {worst:.3e})")
    return ag.matmul(_merge_heads(ag.matmul(ahat, v)), w_o)


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def init_block(width: int, heads: int, rng: Rng, sigma: float = 0.02) -> BlockParams:
    hidden = 4 * width
    return BlockParams(
        ln1_gain=Tensor(np.ones(width), requires_grad=True),
        ln1_bias=Tensor(np.zeros(width), requires_grad=True),
        attn=init_attention("self", width, width, width, heads, 0, rng, sigma),
        ln2_gain=Tensor(np.ones(width), requires_grad=True),
        ln2_bias=Tensor(np.zeros(width), requires_grad=True),
        w1=Tensor(sigma * rng.normals((width, hidden)), requires_grad=True),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=Tensor(sigma * rng.normals((hidden, width)), requires_grad=True),
        b2=Tensor(np.zeros(width), requires_grad=True),
    )


def transformer_block(h: Tensor, params: BlockParams,
                      key_additive: np.ndarray | None = None) -> Tensor:
    """Pre-norm residual block: h + Attn(LN(h)), then + MLP(LN(.)).

    `key_additive`, when given, is broadcast onto the attention scores so
    excluded key columns (e.g. pad positions) keep exactly zero weight.
    """
    normed = ag.layer_norm(h, params.ln1_gain, params.ln1_bias)
    scores = attention_map(normed, params.attn)
    if key_additive is not None:
        scores = ag.add(scores, Tensor(np.broadcast_to(key_additive, scores.shape)))
    weights = ag.row_softmax(scores)
    attn_out = attend(weights, value_heads(normed, params.attn), params.attn.w_o)
    h = ag.add(h, attn_out)
    normed2 = ag.layer_norm(h, params.ln2_gain, params.ln2_bias)
    inner = ag.gelu(ag.add(ag.matmul(normed2, params.w1), params.b1))
    mlp_out = ag.add(ag.matmul(inner, params.w2), params.b2)
    return ag.add(h, mlp_out)
