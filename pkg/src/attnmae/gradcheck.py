"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward, no_grad, reset_tape

__all__ = ["grad_check", "DeterminismError"]


class DeterminismError(RuntimeError):
    """The forward closure returned different values on identical calls."""


def grad_check(model_forward: Callable[[], Tensor], params: Sequence[Tensor],
               epsilon: float = 1e-6, corrupt: float = 0.0) -> float:
    """Compare analytic gradients against central finite differences.

    `model_forward` must rebuild the scalar loss from the current contents
    of `params` on every call (fixed data, fixed mask, no fresh rng draws).
    Returns the max over all parameter entries of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    `corrupt` adds a constant to one analytic entry before comparison, a
    sensitivity probe that any healthy checker must flag.
    """
    with no_grad():
        first = model_forward().item()
        second = model_forward().item()
    if first != second or not np.isfinite(first):
        raise DeterminismError(
            f"forward is not deterministic or not finite: {first!r} vs {second!r}")

    reset_tape()
    loss = model_forward()
    backward(loss)
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(p.grad.copy())
    reset_tape()
    if corrupt:
        analytic[0].reshape(-1)[0] += corrupt

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                up = model_forward().item()
                flat[i] = orig - epsilon
                down = model_forward().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * epsilon)
                denom = max(abs(gflat[i]), abs(numeric), 1e-8)
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
