"""Prediction-to-target assignment.

One-to-one matching solves a rectangular assignment problem with the
Hungarian method (shortest augmenting paths with dual potentials).
One-to-many assignment follows SimOTA: each target takes its ``k`` cheapest
predictions, ``k`` derived from the sum of its top IoUs.

Cost matrices are laid out ``[n_predictions, n_targets]`` throughout.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Prediction, Target, boxes_to_array, pairwise_giou, pairwise_iou

# Cost of the dummy predictions used to pad a cost matrix with fewer rows than columns.
DUMMY_COST = 1e6


@dataclass(frozen=True)
class CostWeights:
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0

    def __post_init__(self):
        ws = (self.w_cls, self.w_l1, self.w_giou)
        if any(w < 0 or not math.isfinite(w) for w in ws):
            raise ValueError(f"cost weights must be finite and non-negative: {ws}")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one cost weight must be positive")


@dataclass(frozen=True)
class MatchResult:
    """Positive (prediction, target) pairs for one image.

    ``pairs`` is sorted by target index, then prediction index.  Targets
    that could not be given a real prediction are listed in
    ``unmatched_targets``.
    """

    pairs: Tuple[Tuple[int, int], ...]
    unmatched_predictions: Tuple[int, ...]
    total_cost: float
    n_predictions: int
    n_targets: int
    unmatched_targets: Tuple[int, ...] = field(default=())

    def matches_per_target(self) -> List[int]:
        counts = [0] * self.n_targets
        for _, t in self.pairs:
            counts[t] += 1
        return counts

    def prediction_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=int)

    def target_indices(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=int)


def count_positives(result: MatchResult) -> int:
    return len(result.pairs)


# -- cost ----------------------------------------------------------------------


def cost_from_arrays(
    pred_boxes: np.ndarray,
    pred_scores: np.ndarray,
    target_boxes: np.ndarray,
    weights: CostWeights = CostWeights(),
) -> np.ndarray:
    """Matching cost from raw arrays.

    Args:
        pred_boxes: ``(P, 4)`` center-size boxes.
        pred_scores: ``(P, T)`` probability of each target's class for each prediction.
        target_boxes: ``(T, 4)`` center-size boxes.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=float).reshape(-1, 4)
    target_boxes = np.asarray(target_boxes, dtype=float).reshape(-1, 4)
    pred_scores = np.asarray(pred_scores, dtype=float).reshape(len(pred_boxes), len(target_boxes))
    for name, arr in (("pred_boxes", pred_boxes), ("pred_scores", pred_scores), ("target_boxes", target_boxes)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite values")
    l1 = np.abs(pred_boxes[:, None, :] - target_boxes[None, :, :]).sum(-1)
    g = pairwise_giou(pred_boxes, target_boxes)
    return weights.w_cls * (-pred_scores) + weights.w_l1 * l1 + weights.w_giou * (1.0 - g)


def cost_matrix(
    preds: Sequence[Prediction], targets: Sequence[Target], w: CostWeights = CostWeights()
) -> np.ndarray:
    """Cost ``[len(preds), len(targets)]``: ``-w_cls * p + w_l1 * L1 + w_giou * (1 - GIoU)``."""
    if len(targets) == 0:
        raise ValueError("cost_matrix needs at least one target")
    scores = np.array(
        [[p.prob(t.label) for t in targets] for p in preds], dtype=float
    ).reshape(len(preds), len(targets))
    return cost_from_arrays(
        boxes_to_array([p.box for p in preds]), scores, boxes_to_array([t.box for t in targets]), w
    )


# -- one-to-one ------------------------------------------------------------------


def _assign_rows(cost: np.ndarray) -> np.ndarray:
    """Min-cost assignment of every row of an ``n x m`` matrix, ``n <= m``.

    Returns the column assigned to each row.  Dual potentials ``u``/``v``
    keep reduced costs non-negative; each row is inserted by a Dijkstra-like
    search for the cheapest augmenting path.  Ties resolve to the lowest
    column index.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j]: 1-based row holding column j, 0 if free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assignment = np.empty(n, dtype=int)
    assignment[owner[1:][owner[1:] > 0] - 1] = np.nonzero(owner[1:] > 0)[0]
    return assignment


def _check_cost(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    return cost


def _empty_result(n_preds: int, n_targets: int) -> MatchResult:
    return MatchResult((), tuple(range(n_preds)), 0.0, n_preds, n_targets, tuple(range(n_targets)))


def hungarian(cost) -> MatchResult:
    """Minimum-total-cost one-to-one assignment covering every target column.

    With fewer predictions than targets the matrix is padded with dummy
    predictions at :data:`DUMMY_COST`; targets landing on a dummy are
    reported in ``unmatched_targets``.
    """
    cost = _check_cost(cost)
    n_preds, n_targets = cost.shape
    if n_targets == 0:
        return _empty_result(n_preds, 0)
    if n_preds == 0:
        raise ValueError(f"cannot match {n_targets} targets against an empty prediction set")
    work = cost
    if n_preds < n_targets:
        work = np.vstack([cost, np.full((n_targets - n_preds, n_targets), DUMMY_COST)])
    target_to_pred = _assign_rows(work.T)
    pairs = []
    unmatched_targets = []
    for t, p in enumerate(target_to_pred):
        if p < n_preds:
            pairs.append((int(p), t))
        else:
            unmatched_targets.append(t)
    taken = {p for p, _ in pairs}
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_predictions=tuple(i for i in range(n_preds) if i not in taken),
        total_cost=math.fsum(cost[p, t] for p, t in pairs),
        n_predictions=n_preds,
        n_targets=n_targets,
        unmatched_targets=tuple(unmatched_targets),
    )


def brute_force_min_cost(cost) -> Tuple[float, Tuple[int, ...]]:
    """Exhaustive minimum over all injections of targets into predictions.

    Returns ``(total_cost, preds)`` where ``preds[t]`` is the prediction given
    to target ``t``.  Exponential; intended as a test oracle for small sizes.
    """
    cost = _check_cost(cost)
    n_preds, n_targets = cost.shape
    if n_preds < n_targets:
        raise ValueError("brute force requires at least as many predictions as targets")
    best, best_perm = math.inf, ()
    for perm in itertools.permutations(range(n_preds), n_targets):
        total = math.fsum(cost[p, t] for t, p in enumerate(perm))
        if total < best:
            best, best_perm = total, perm
    return (0.0 if n_targets == 0 else best), best_perm


# -- one-to-many ---------------------------------------------------------------------


def _dynamic_k(ious: np.ndarray, k_max: int, topk: int) -> np.ndarray:
    n_preds = ious.shape[0]
    topk = max(1, min(topk, n_preds))
    top = -np.sort(-ious, axis=0)[:topk]
    k = np.floor(top.sum(axis=0) + 0.5).astype(int)
    return np.clip(k, 1, min(k_max, n_preds))


def o2m_from_arrays(cost: np.ndarray, ious: np.ndarray, k_max: int = 10, topk_for_dynamic_k: int = 10) -> MatchResult:
    """SimOTA-style one-to-many assignment from a cost and an IoU matrix.

    Each target ``j`` gets ``k_j = clamp(round(sum of its top IoUs), 1, k_max)``
    cheapest predictions; a prediction claimed by several targets keeps only
    its cheapest one.  Targets stripped of every prediction by that rule then
    take their cheapest prediction that is either free or held by a target
    with more than one, so every target keeps at least one positive whenever
    the predictions suffice.
    """
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    cost = _check_cost(cost)
    ious = np.asarray(ious, dtype=float)
    n_preds, n_targets = cost.shape
    if ious.shape != cost.shape:
        raise ValueError(f"IoU shape {ious.shape} does not match cost shape {cost.shape}")
    if n_targets == 0 or n_preds == 0:
        return _empty_result(n_preds, n_targets)

    ks = _dynamic_k(ious, k_max, topk_for_dynamic_k)
    owner = np.full(n_preds, -1)
    for t in range(n_targets):
        order = np.lexsort((np.arange(n_preds), cost[:, t]))
        for p in order[: ks[t]]:
            cur = owner[p]
            if cur < 0 or cost[p, t] < cost[p, cur]:
                owner[p] = t

    counts = np.bincount(owner[owner >= 0], minlength=n_targets)
    for t in range(n_targets):
        if counts[t] > 0:
            continue
        ok = (owner < 0) | ((owner >= 0) & (counts[np.maximum(owner, 0)] > 1))
        if not ok.any():
            continue
        cand = np.nonzero(ok)[0]
        p = int(cand[np.lexsort((cand, cost[cand, t]))[0]])
        if owner[p] >= 0:
            counts[owner[p]] -= 1
        owner[p] = t
        counts[t] = 1

    pairs = sorted((int(p), int(owner[p])) for p in range(n_preds) if owner[p] >= 0)
    pairs.sort(key=lambda pt: (pt[1], pt[0]))
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_predictions=tuple(int(p) for p in range(n_preds) if owner[p] < 0),
        total_cost=math.fsum(cost[p, t] for p, t in pairs),
        n_predictions=n_preds,
        n_targets=n_targets,
        unmatched_targets=tuple(int(t) for t in range(n_targets) if counts[t] == 0),
    )


def o2m_assign(
    preds: Sequence[Prediction],
    targets: Sequence[Target],
    k_max: int = 10,
    topk_for_dynamic_k: int = 10,
    weights: Optional[CostWeights] = None,
) -> MatchResult:
    if not targets:
        return _empty_result(len(preds), 0)
    cost = cost_matrix(preds, targets, weights or CostWeights())
    ious = pairwise_iou(boxes_to_array([p.box for p in preds]), boxes_to_array([t.box for t in targets]))
    return o2m_from_arrays(cost, ious, k_max, topk_for_dynamic_k)


def o2o_assign(
    preds: Sequence[Prediction], targets: Sequence[Target], weights: Optional[CostWeights] = None
) -> MatchResult:
    """Hungarian matching of predictions to targets under :func:`cost_matrix`."""
    if not targets:
        return _empty_result(len(preds), 0)
    if not preds:
        return _empty_result(0, len(targets))
    return hungarian(cost_matrix(preds, targets, weights or CostWeights()))
