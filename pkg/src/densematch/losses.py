"""Focal, varifocal and matchability-aware classification losses.

All three take a predicted foreground probability ``p`` (not a logit) and
return the loss value together with its analytic derivative with respect
to ``p``.  The IoU ``q`` enters as a soft label and is held constant.

The ``*_terms`` functions are vectorized over numpy arrays and are what the
trainer calls; :func:`focal_loss`, :func:`varifocal_loss` and :func:`mal`
are the scalar entry points and validate their inputs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

EPS = 1e-7


class LossVariant(str, enum.Enum):
    FL = "fl"
    VFL = "vfl"
    MAL = "mal"


_DEFAULTS = {
    LossVariant.FL: (2.0, 0.25),
    LossVariant.VFL: (2.0, 0.75),
    LossVariant.MAL: (1.5, 0.75),
}


@dataclass(frozen=True)
class LossParams:
    """Loss hyperparameters.  ``alpha`` is unused by MAL."""

    gamma: float = 1.5
    alpha: float = 0.75
    variant: LossVariant = LossVariant.MAL

    def __post_init__(self):
        object.__setattr__(self, "variant", LossVariant(self.variant))
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @classmethod
    def default(cls, variant) -> "LossParams":
        variant = LossVariant(variant)
        gamma, alpha = _DEFAULTS[variant]
        return cls(gamma=gamma, alpha=alpha, variant=variant)


@dataclass(frozen=True)
class LossEval:
    value: float
    dvalue_dp: float


def _clamp(p):
    return np.clip(p, EPS, 1.0 - EPS)


def _background_terms(p, gamma, weight):
    # -weight * p^gamma * log(1 - p)
    log1m = np.log1p(-p)
    pg = p**gamma
    value = -weight * pg * log1m
    grad = -weight * (gamma * p ** (gamma - 1.0) * log1m - pg / (1.0 - p))
    return value, grad


def _soft_ce_terms(p, target):
    # -target * log(p) - (1 - target) * log(1 - p)
    value = -target * np.log(p) - (1.0 - target) * np.log1p(-p)
    grad = -target / p + (1.0 - target) / (1.0 - p)
    return value, grad


def focal_terms(p, y, gamma: float = 2.0, alpha: float = 0.25):
    """Vectorized focal loss and d/dp."""
    p = _clamp(np.asarray(p, dtype=float))
    y = np.asarray(y)
    one_m = 1.0 - p
    pos_val = -alpha * one_m**gamma * np.log(p)
    pos_grad = alpha * (gamma * one_m ** (gamma - 1.0) * np.log(p) - one_m**gamma / p)
    neg_val, neg_grad = _background_terms(p, gamma, 1.0 - alpha)
    is_pos = y == 1
    return np.where(is_pos, pos_val, neg_val), np.where(is_pos, pos_grad, neg_grad)


def varifocal_terms(p, q, gamma: float = 2.0, alpha: float = 0.75):
    """Vectorized varifocal loss and d/dp; ``q == 0`` selects the background branch."""
    p = _clamp(np.asarray(p, dtype=float))
    q = np.asarray(q, dtype=float)
    ce_val, ce_grad = _soft_ce_terms(p, q)
    neg_val, neg_grad = _background_terms(p, gamma, alpha)
    fg = q > 0
    return np.where(fg, q * ce_val, neg_val), np.where(fg, q * ce_grad, neg_grad)


def mal_terms(p, q, y, gamma: float = 1.5):
    """Vectorized matchability-aware loss and d/dp.

    Positives use the soft target ``q**gamma``; negatives use the
    alpha-free focal background term.
    """
    p = _clamp(np.asarray(p, dtype=float))
    q = np.asarray(q, dtype=float)
    y = np.asarray(y)
    pos_val, pos_grad = _soft_ce_terms(p, q**gamma)
    neg_val, neg_grad = _background_terms(p, gamma, 1.0)
    is_pos = y == 1
    return np.where(is_pos, pos_val, neg_val), np.where(is_pos, pos_grad, neg_grad)


def loss_terms(params: LossParams, p, q, y):
    """Dispatch to the active variant.

    ``q`` is the live IoU of matched predictions and 0 for unmatched ones;
    ``y`` is 1 for matched predictions.  VFL reads only ``q`` (a matched
    prediction with zero overlap falls into its background branch, as the
    loss defines); FL reads only ``y``.
    """
    if params.variant is LossVariant.FL:
        return focal_terms(p, y, params.gamma, params.alpha)
    if params.variant is LossVariant.VFL:
        return varifocal_terms(p, np.where(np.asarray(y) == 1, q, 0.0), params.gamma, params.alpha)
    return mal_terms(p, np.where(np.asarray(y) == 1, q, 0.0), y, params.gamma)


# -- scalar API ----------------------------------------------------------------


def _check_unit(name: str, v: float) -> float:
    v = float(v)
    if not (0.0 <= v <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return v


def _check_label(y) -> int:
    if y not in (0, 1):
        raise ValueError(f"y must be 0 or 1, got {y!r}")
    return int(y)


def focal_loss(p: float, y: int, params: Optional[LossParams] = None) -> LossEval:
    params = params or LossParams.default(LossVariant.FL)
    p = _check_unit("p", p)
    v, g = focal_terms(p, _check_label(y), params.gamma, params.alpha)
    return LossEval(float(v), float(g))


def varifocal_loss(p: float, q: float, params: Optional[LossParams] = None) -> LossEval:
    params = params or LossParams.default(LossVariant.VFL)
    p, q = _check_unit("p", p), _check_unit("q", q)
    v, g = varifocal_terms(p, q, params.gamma, params.alpha)
    return LossEval(float(v), float(g))


def mal(p: float, q: float, y: int, params: Optional[LossParams] = None) -> LossEval:
    params = params or LossParams.default(LossVariant.MAL)
    p, q = _check_unit("p", p), _check_unit("q", q)
    y = _check_label(y)
    if y == 0 and q > 0:
        raise ValueError(f"background sample (y=0) cannot carry an IoU (q={q})")
    v, g = mal_terms(p, q, y, params.gamma)
    return LossEval(float(v), float(g))


def landscape(variant, params: LossParams, p_grid, q_grid) -> np.ndarray:
    """Loss surface for a positive sample: row ``i`` is ``q_grid[i]``, column ``j`` is ``p_grid[j]``."""
    variant = LossVariant(variant)
    p = np.asarray(p_grid, dtype=float).ravel()
    q = np.asarray(q_grid, dtype=float).ravel()
    if p.size == 0 or q.size == 0:
        raise ValueError("landscape grids must be non-empty")
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p grid must lie strictly inside (0, 1)")
    if np.any((q < 0) | (q > 1)):
        raise ValueError("q grid must lie in [0, 1]")
    P, Q = np.meshgrid(p, q)
    if variant is LossVariant.FL:
        vals, _ = focal_terms(P, np.ones_like(P), params.gamma, params.alpha)
    elif variant is LossVariant.VFL:
        vals, _ = varifocal_terms(P, Q, params.gamma, params.alpha)
    else:
        vals, _ = mal_terms(P, Q, np.ones_like(P), params.gamma)
    return vals


def minimizer(variant, params: LossParams, q: float, tol: float = 1e-14) -> float:
    """Location in ``p`` of the positive-sample loss minimum.

    Found by bisection on the sign of the analytic derivative; the
    positive-sample losses are convex in ``p``.
    """
    variant = LossVariant(variant)

    def grad(x):
        if variant is LossVariant.VFL:
            return float(varifocal_terms(x, q, params.gamma, params.alpha)[1])
        if variant is LossVariant.MAL:
            return float(mal_terms(x, q, 1, params.gamma)[1])
        return float(focal_terms(x, 1, params.gamma, params.alpha)[1])

    lo, hi = EPS, 1.0 - EPS
    if grad(lo) >= 0:
        return lo
    if grad(hi) <= 0:
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if grad(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def logit_grad(dvalue_dp, p) -> np.ndarray:
    """Chain a d/dp derivative through the logistic: d/ds = d/dp * p * (1 - p)."""
    p = np.asarray(p, dtype=float)
    return np.asarray(dvalue_dp) * p * (1.0 - p)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
