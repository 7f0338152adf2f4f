"""Classification losses: categorical cross-entropy and focal loss.

Both consume raw logits and route through the fused log-softmax primitive,
so confidently classified samples cannot underflow the log. Batch reduction
is the mean, making loss magnitude independent of batch size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Variable

_SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class FocalParams:
    """alpha: scalar in (0, 1] or per-class vector; gamma: focusing exponent >= 0.

    gamma = 0 with alpha = 1 reduces the focal loss to plain cross-entropy.
    """

    alpha: float | Sequence[float] = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError(f"alpha entries must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")

    def alpha_vector(self, num_classes: int) -> np.ndarray:
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim == 0:
            return np.full(num_classes, float(a))
        if a.shape != (num_classes,):
            raise ValueError(f"alpha vector has length {a.shape}, expected {num_classes}")
        return a


def _check_targets(logits: Variable, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.data.shape:
        raise ValueError(
            f"targets shape {targets.shape} does not match logits {logits.data.shape}")
    if logits.data.ndim != 2 or logits.data.shape[1] < 2:
        raise ValueError(f"logits must be (N, C) with C >= 2, got {logits.data.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("logits contain non-finite values")
    if np.any(targets < -_SIMPLEX_TOL):
        raise ValueError("target rows must be non-negative")
    sums = targets.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > _SIMPLEX_TOL):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"target row {bad} sums to {sums[bad]:.8f}, not 1")
    return targets


def cross_entropy(logits: Variable, targets: np.ndarray,
                  class_weights: Sequence[float] | None = None) -> Variable:
    """Mean over the batch of -sum_c w_c t_c log softmax(logits)_c.

    `targets` are simplex rows (one-hot or soft); `class_weights` is an
    optional per-class vector, all-ones being the unweighted loss.
    """
    targets = _check_targets(logits, targets)
    n, c = logits.data.shape
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=np.float64)
        if w.shape != (c,):
            raise ValueError(f"class_weights has shape {w.shape}, expected ({c},)")
        mask = targets * w
    else:
        mask = targets
    lsm = ad.log_softmax(logits, axis=1)
    weighted = ad.bmul(lsm, ad.constant(mask.astype(logits.dtype)))
    return ad.neg(ad.mean_axes(ad.sum_axes(weighted, axis=1)))


def _check_one_hot(targets: np.ndarray) -> None:
    is_zero = targets == 0.0
    is_one = targets == 1.0
    if not np.all(is_zero | is_one) or not np.all(is_one.sum(axis=1) == 1):
        raise ValueError("focal loss requires strictly one-hot targets")


def focal_loss(logits: Variable, targets: np.ndarray, params: FocalParams = FocalParams()) -> Variable:
    """Mean over the batch of -alpha_c (1 - p_t)^gamma log p_t.

    p_t is the softmax probability of each sample's true class c; well
    classified samples (p_t -> 1) contribute vanishing loss and gradient.
    """
    targets = _check_targets(logits, targets)
    _check_one_hot(targets)
    n, c = logits.data.shape
    alpha = params.alpha_vector(c)
    alpha_t = (targets @ alpha).astype(logits.dtype)  # per-sample alpha of the true class

    lsm = ad.log_softmax(logits, axis=1)
    log_pt = ad.sum_axes(ad.bmul(lsm, ad.constant(targets.astype(logits.dtype))), axis=1)
    pt = ad.exp(log_pt)
    focus = ad.powc(ad.bsub(ad.constant(np.ones(n, dtype=logits.dtype)), pt), params.gamma)
    per_sample = ad.bmul(ad.bmul(ad.constant(alpha_t), focus), log_pt)
    return ad.neg(ad.mean_axes(per_sample))
