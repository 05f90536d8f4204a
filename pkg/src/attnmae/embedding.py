"""Token embedding: byte ids or scalar features to X = value-term + position.

Discrete inputs use a fixed byte vocabulary (256 values plus one pad id),
continuous inputs a learned linear projection per token. Positions come
from a table learned from scratch; there is no tokenizer anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import Rng

BYTE_VOCAB = 257  # 256 byte values + 1 pad id
PAD_ID = 256

__all__ = ["BYTE_VOCAB", "PAD_ID", "EmbeddingParams", "TruncationError",
           "init_embedding", "encode_discrete", "decode_discrete", "embed",
           "continuous_projection"]


class TruncationError(ValueError):
    """Input is longer than the model sequence length; never truncated silently."""


@dataclass
class EmbeddingParams:
    """Value projection/lookup E plus learned positional table P (n rows)."""
    table: Tensor      # (BYTE_VOCAB, d_embed) discrete, (d_raw, d_embed) continuous
    positions: Tensor  # (n, d_embed)
    discrete: bool


def init_embedding(discrete: bool, n: int, d_embed: int, d_raw: int,
                   rng: Rng, sigma: float = 0.02) -> EmbeddingParams:
    rows = BYTE_VOCAB if discrete else d_raw
    table = Tensor(sigma * rng.normals((rows, d_embed)), requires_grad=True)
    positions = Tensor(sigma * rng.normals((n, d_embed)), requires_grad=True)
    return EmbeddingParams(table=table, positions=positions, discrete=discrete)


def encode_discrete(text_or_bytes, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map text or bytes to a length-n id sequence plus a pad indicator.

    Each byte maps to its value 0..255; the remainder is filled with the
    pad id. Inputs longer than n raise rather than truncate.
    """
    raw = text_or_bytes.encode("utf-8") if isinstance(text_or_bytes, str) else bytes(text_or_bytes)
    if len(raw) > n:
        raise TruncationError(f"input of {len(raw)} bytes exceeds sequence length {n}")
    ids = np.full(n, PAD_ID, dtype=np.int64)
    ids[:len(raw)] = np.frombuffer(raw, dtype=np.uint8)
    pad = ids == PAD_ID
    return ids, pad


def decode_discrete(ids: np.ndarray) -> bytes:
    """Inverse of encode_discrete on the non-pad prefix."""
    ids = np.asarray(ids)
    return bytes(ids[ids != PAD_ID].astype(np.uint8))


def embed(tokens: np.ndarray, params: EmbeddingParams,
          value_keep: np.ndarray | None = None) -> Tensor:
    """X[..., i] = value-term(tokens[..., i]) + P[i], differentiable in E and P.

    `value_keep` (0/1 per slot) multiplies only the value term, so slots
    with keep 0 reduce to their positional row exactly; used to stop any
    raw-value contribution from masked positions.
    """
    if params.discrete:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.shape[-1] != params.positions.shape[0]:
            raise ag.ShapeError(
                f"sequence length {ids.shape[-1]} != positional rows {params.positions.shape[0]}")
        value = ag.embed_lookup(params.table, ids, keep=value_keep)
    else:
        vals = np.asarray(tokens, dtype=np.float64)
        if vals.ndim == len(np.shape(tokens)) and vals.shape[-1] == params.positions.shape[0]:
            vals = vals[..., None]  # each token is one scalar feature
        if value_keep is not None:
            vals = vals * np.asarray(value_keep, dtype=np.float64)[..., None]
        value = ag.matmul(Tensor(vals), params.table)
    return ag.add(value, params.positions)


def continuous_projection(x: Tensor, table: Tensor) -> Tensor:
    """Per-token linear map of raw features; no nonlinearity."""
    if x.shape[-1] != table.shape[0]:
        raise ag.ShapeError(f"feature width {x.shape[-1]} != projection rows {table.shape[0]}")
    return ag.matmul(x, table)
