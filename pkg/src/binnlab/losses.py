"""Per-sample losses on logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax


@dataclass(frozen=True)
class LinearLoss:
    """``L = coef . logits``; a loss that is linear in the network output."""

    coef: tuple

    def __call__(self, logits: np.ndarray):
        c = np.asarray(self.coef, dtype=np.float64)
        if logits.shape[-1] != c.size:
            raise ValueError(f"linear loss has {c.size} coefficients, logits have {logits.shape[-1]}")
        return logits @ c, np.broadcast_to(c, logits.shape).copy()


def cross_entropy_per_sample(logits, targets):
    """Softmax cross-entropy per row and its gradient w.r.t. the logits (no batch averaging)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    n, c = logits.shape
    t = np.broadcast_to(np.asarray(targets), (n,))
    if not np.issubdtype(t.dtype, np.integer) or np.any(t < 0) or np.any(t >= c):
        raise ValueError(f"class indices must be integers in [0, {c})")
    logp = log_softmax(logits, axis=1)
    rows = np.arange(n)
    grad = np.exp(logp)
    grad[rows, t] -= 1.0
    return -logp[rows, t], grad


def sample_loss(target, logits):
    """Dispatch on the target: a class index (array) or a :class:`LinearLoss`."""
    if isinstance(target, LinearLoss):
        return target(np.atleast_2d(logits))
    return cross_entropy_per_sample(logits, target)
