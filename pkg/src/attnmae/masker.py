"""Input-mask sampling from first-layer attention maps.

The sampler scores every input token by summing softmax-normalized
attention rows of a random query subset (heads aggregated first), keeps
the k highest-scoring tokens, and masks exactly those. Masking is an
additive vector of {0, -inf}: -inf columns receive exactly zero weight
under softmax, so masked tokens contribute nothing downstream.

A sequential reference sampler (one top-k per query, excluding already
selected tokens) is included as the oracle the single-top-k path
approximates, plus a uniform random baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, softmax_rows_data
from .rng import Rng

__all__ = ["MaskSpec", "round_half_up", "aggregate_heads", "keep_top_k",
           "attention_mask_scores", "sample_mask", "sample_mask_aggregated",
           "iterative_oracle_mask", "random_mask", "apply_mask"]

NEG_INF = -np.inf


@dataclass
class MaskSpec:
    """Additive mask over n inputs plus the induced index sets.

    additive[i] is -inf exactly when i is masked; masked and unmasked are
    sorted, disjoint, and together cover all non-pad indices.
    """
    additive: np.ndarray   # (n,) of {0, -inf}
    masked: np.ndarray     # sorted masked indices, |masked| = round(n_eff * r)
    unmasked: np.ndarray   # sorted unmasked non-pad indices
    ratio: float


def round_half_up(x: float) -> int:
    """Integer rounding with .5 always rounding up (never banker's)."""
    return int(np.floor(x + 0.5))


def aggregate_heads(scores: np.ndarray) -> np.ndarray:
    """Sum of per-head softmax rows: [h, l, n] -> [l, n].

    Each output row sums to h. Used only to score tokens for masking; the
    model's own attention weights are not affected.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 3:
        raise ag.ShapeError(f"expected [heads, l, n] scores, got {scores.shape}")
    return np.add.reduce(softmax_rows_data(scores), axis=0)


def keep_top_k(v: np.ndarray, k: int) -> np.ndarray:
    """0 for the k largest entries of v, -inf elsewhere.

    Ties break toward the lowest index, so the result is deterministic
    even for the all-equal scores common at initialization.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    if not 0 <= k <= n:
        raise ValueError(f"k={k} outside [0, {n}]")
    out = np.full(n, NEG_INF)
    if k:
        order = np.argsort(-v, kind="stable")
        out[order[:k]] = 0.0
    return out


def attention_mask_scores(s: np.ndarray, subset: np.ndarray,
                          pad: np.ndarray | None = None) -> np.ndarray:
    """Per-token scores: sum of the selected query rows of s ([l, n]).

    Pad positions are forced to -inf so the mask budget is never spent on
    padding.
    """
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise ValueError("query subset is empty")
    l = s.shape[0]
    if subset.min() < 0 or subset.max() >= l:
        raise IndexError(f"query index out of range for l={l}")
    scores = np.add.reduce(s[np.sort(subset)], axis=0)
    if pad is not None:
        scores = np.where(pad, NEG_INF, scores)
    return scores


def _mask_count(n_eff: int, r: float) -> int:
    if not 0.0 < r < 1.0:
        raise ValueError(f"masking ratio must be in (0, 1), got {r}")
    k = round_half_up(n_eff * r)
    if k < 1 or k >= n_eff:
        raise ValueError(f"degenerate mask count {k} for n_eff={n_eff}, r={r}")
    return k


def _build_spec(masked: np.ndarray, n: int, r: float,
                pad: np.ndarray | None) -> MaskSpec:
    masked = np.sort(np.asarray(masked, dtype=np.int64))
    additive = np.zeros(n)
    additive[masked] = NEG_INF
    free = np.ones(n, dtype=bool) if pad is None else ~pad
    free[masked] = False
    return MaskSpec(additive=additive, masked=masked,
                    unmasked=np.flatnonzero(free).astype(np.int64), ratio=r)


def sample_mask_aggregated(s: np.ndarray, r: float, rng: Rng | None,
                           pad: np.ndarray | None = None,
                           subset: np.ndarray | None = None,
                           subset_size: int | None = None) -> MaskSpec:
    """sample_mask for callers that already aggregated heads into s [l, n]."""
    s = np.asarray(s, dtype=np.float64)
    l, n = s.shape
    n_eff = n if pad is None else int(n - np.add.reduce(pad.astype(np.int64)))
    k = _mask_count(n_eff, r)
    if subset is None:
        if rng is None:
            raise ValueError("need an rng when no query subset is pinned")
        size = subset_size if subset_size is not None else max(1, round_half_up(l * r))
        subset = rng.sample_without_replacement(l, size)
    per_token = attention_mask_scores(s, subset, pad)
    keep = keep_top_k(per_token, k)
    return _build_spec(np.flatnonzero(keep == 0.0), n, r, pad)


def sample_mask(scores: np.ndarray, r: float, rng: Rng | None,
                pad: np.ndarray | None = None,
                subset: np.ndarray | None = None,
                subset_size: int | None = None) -> MaskSpec:
    """Mask round(n_eff * r) tokens scored by a random query subset.

    `scores` is the unnormalized map [heads, l, n]. The subset has
    max(1, round(l * r)) queries unless `subset_size` overrides it, or
    `subset` pins the exact queries (then rng may be None). The result
    depends only on the scores, r, the rng stream, and pads.
    """
    scores = np.asarray(scores, dtype=np.float64)
    return sample_mask_aggregated(aggregate_heads(scores), r, rng, pad=pad,
                                  subset=subset, subset_size=subset_size)


def iterative_oracle_mask(s: np.ndarray, subset: np.ndarray, k_per_query: int,
                          pad: np.ndarray | None = None) -> np.ndarray:
    """Sequential reference sampler: one top-k per query, no reuse.

    Queries are processed in the order given; each selects its
    k_per_query highest-scoring tokens among those not yet selected.
    Returns the sorted union.
    """
    s = np.asarray(s, dtype=np.float64)
    subset = np.asarray(subset, dtype=np.int64)
    n = s.shape[1]
    n_eff = n if pad is None else int(n - np.add.reduce(pad.astype(np.int64)))
    if subset.size * k_per_query > n_eff:
        raise ValueError(
            f"budget {subset.size} x {k_per_query} exceeds {n_eff} maskable tokens")
    taken = np.zeros(n, dtype=bool) if pad is None else pad.copy()
    for q in subset:
        row = np.where(taken, NEG_INF, s[q])
        order = np.argsort(-row, kind="stable")
        taken[order[:k_per_query]] = True
    if pad is not None:
        taken &= ~pad
    return np.flatnonzero(taken).astype(np.int64)


def random_mask(n: int, r: float, rng: Rng, pad: np.ndarray | None = None) -> MaskSpec:
    """Uniform baseline: round(n_eff * r) non-pad indices without replacement."""
    candidates = np.arange(n, dtype=np.int64) if pad is None else np.flatnonzero(~pad)
    k = _mask_count(len(candidates), r)
    picked = candidates[rng.sample_without_replacement(len(candidates), k)]
    return _build_spec(picked, n, r, pad)


def apply_mask(scores: Tensor, mask: MaskSpec) -> Tensor:
    """Softmax of scores with the additive mask broadcast over heads and rows.

    Masked columns receive exactly zero weight in every head and row.
    """
    if mask.additive.shape[0] != scores.shape[-1]:
        raise ag.ShapeError(
            f"mask length {mask.additive.shape[0]} != input count {scores.shape[-1]}")
    shift = Tensor(np.broadcast_to(mask.additive, scores.shape))
    return ag.row_softmax(ag.add(scores, shift))
