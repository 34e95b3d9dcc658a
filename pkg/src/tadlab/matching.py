"""Set matching and the detection loss.

Ground-truth instances are matched one-to-one to predictions by minimizing
a pairwise cost (classification probability, interval L1, tIoU) with a
rectangular Hungarian solver.  The loss then scores every query: matched
queries owe their class plus regression terms, unmatched queries owe the
background class.  A brute-force permutation oracle validates the solver.
"""

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class MatchCostConfig:
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_iou: float = 2.0

    def validate(self):
        weights = (self.lambda_cls, self.lambda_l1, self.lambda_iou)
        if any(w < 0 for w in weights):
            raise ConfigError(f"cost weights must be nonnegative, got {weights}")
        if not any(weights):
            raise ConfigError("at least one cost weight must be positive")
        return self


def interval_to_span(intervals):
    """(center, width) -> clamped [start, end], last-axis pairs."""
    intervals = np.asarray(intervals, dtype=np.float64)
    center, width = intervals[..., 0], intervals[..., 1]
    start = np.clip(center - width / 2.0, 0.0, 1.0)
    end = np.clip(center + width / 2.0, 0.0, 1.0)
    return np.stack([start, end], axis=-1)


def span_to_interval(spans):
    """[start, end] -> (center, width)."""
    spans = np.asarray(spans, dtype=np.float64)
    return np.stack([(spans[..., 0] + spans[..., 1]) / 2.0,
                     spans[..., 1] - spans[..., 0]], axis=-1)


def _span_iou(a, b):
    """Pairwise tIoU between span arrays (broadcast on leading axes)."""
    inter = np.maximum(0.0, np.minimum(a[..., 1], b[..., 1]) - np.maximum(a[..., 0], b[..., 0]))
    union = (a[..., 1] - a[..., 0]) + (b[..., 1] - b[..., 0]) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def match_cost(gt_class, gt_interval, pred_probs, pred_interval, cfg: MatchCostConfig):
    """Cost of pairing one ground truth with one prediction.

    Intervals are (center, width) in [0, 1]; `pred_probs` is the full class
    distribution so the cost can read p(gt_class).
    """
    gt_interval = np.asarray(gt_interval, dtype=np.float64)
    pred_interval = np.asarray(pred_interval, dtype=np.float64)
    l1 = float(np.abs(gt_interval - pred_interval).sum())
    iou = float(_span_iou(interval_to_span(gt_interval), interval_to_span(pred_interval)))
    return (-cfg.lambda_cls * float(pred_probs[gt_class])
            + cfg.lambda_l1 * l1 + cfg.lambda_iou * (1.0 - iou))


def cost_matrix(gt_classes, gt_intervals, pred_probs, pred_intervals, cfg: MatchCostConfig):
    """All pairwise costs at once: rows = ground truths, cols = predictions."""
    gt_classes = np.asarray(gt_classes, dtype=np.intp)
    gt_intervals = np.asarray(gt_intervals, dtype=np.float64)
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    pred_intervals = np.asarray(pred_intervals, dtype=np.float64)
    prob = pred_probs[:, gt_classes].T                       # (n, m)
    l1 = np.abs(gt_intervals[:, None, :] - pred_intervals[None, :, :]).sum(axis=-1)
    iou = _span_iou(interval_to_span(gt_intervals)[:, None, :],
                    interval_to_span(pred_intervals)[None, :, :])
    return -cfg.lambda_cls * prob + cfg.lambda_l1 * l1 + cfg.lambda_iou * (1.0 - iou)


def reg_loss(gt_interval, pred_interval, cfg: MatchCostConfig):
    """Regression-only penalty between two (center, width) intervals."""
    gt_interval = np.asarray(gt_interval, dtype=np.float64)
    pred_interval = np.asarray(pred_interval, dtype=np.float64)
    l1 = float(np.abs(gt_interval - pred_interval).sum())
    iou = float(_span_iou(interval_to_span(gt_interval), interval_to_span(pred_interval)))
    return cfg.lambda_l1 * l1 + cfg.lambda_iou * (1.0 - iou)


# -- Hungarian solver ---------------------------------------------------------


def hungarian(cost):
    """Minimum-cost injection of rows into columns (n <= m).

    The matrix is padded square with zero-cost dummy rows (in a square
    problem every column is matched, so any perfect matching inside the
    zero-reduced-cost subgraph of optimal duals is itself optimal; the
    rectangular form lacks that local property).  Jonker-Volgenant shortest
    augmenting paths produce one optimum plus duals, then a lexicographic
    pass over the zero subgraph resolves ties to the smallest assignment
    vector.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be a matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n > m:
        raise ShapeError(f"more rows than columns: {n} > {m}")
    if n == 0:
        return np.zeros(0, dtype=np.intp)
    if not np.all(np.isfinite(cost)):
        raise ConfigError("cost matrix entries must be finite")

    square = np.zeros((m, m))
    square[:n] = cost

    u = np.zeros(m + 1)
    v = np.zeros(m + 1)
    owner = np.full(m + 1, m, dtype=np.intp)   # owner[j]: row holding column j
    for i in range(m):
        owner[m] = i
        j0 = m
        minv = np.full(m, np.inf)
        way = np.zeros(m, dtype=np.intp)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            row = owner[j0]
            free = np.flatnonzero(~used[:m])
            reduced = square[row, free] - u[row] - v[free]
            better = reduced < minv[free]
            improved = free[better]
            minv[improved] = reduced[better]
            way[improved] = j0
            j0 = free[np.argmin(minv[free])]
            delta = minv[j0]
            used_cols = np.flatnonzero(used[:m])
            u[owner[used_cols]] += delta
            u[i] += delta                                  # virtual column's owner
            v[used_cols] -= delta
            minv[~used[:m]] -= delta
            if owner[j0] == m:
                break
        while j0 != m:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    assignment = np.empty(n, dtype=np.intp)
    for j in range(m):
        if owner[j] < n:
            assignment[owner[j]] = j
    return _lexicographic_refine(square, n, assignment, u[:m], v[:m])


def _lexicographic_refine(square, n, assignment, u, v):
    """Lexicographically smallest optimal assignment for the first n rows.

    In the padded square problem a perfect matching is optimal iff every
    edge has zero reduced cost under the final duals, so fixing the real
    rows one by one to their smallest feasible zero column (feasible: the
    remaining real and dummy rows still admit a perfect matching in the
    zero subgraph) walks straight to the lexicographic minimum.
    """
    m = square.shape[1]
    scale = max(1.0, float(np.abs(square).max()))
    zero = (square - u[:, None] - v[None, :]) <= 1e-9 * scale
    if np.all(zero[:n].sum(axis=1) == 1):
        return assignment          # no real row has a tie to resolve
    cols_of = [np.flatnonzero(zero[i]) for i in range(m)]

    def feasible(start_row, taken):
        match = {}

        def augment(row, visited):
            for j in cols_of[row]:
                jj = int(j)
                if jj in taken or jj in visited:
                    continue
                visited.add(jj)
                if jj not in match or augment(match[jj], visited):
                    match[jj] = row
                    return True
            return False

        return all(augment(r, set()) for r in range(start_row, m))

    taken = set()
    result = np.full(n, -1, dtype=np.intp)
    for i in range(n):
        for j in cols_of[i]:
            jj = int(j)
            if jj in taken:
                continue
            taken.add(jj)
            if feasible(i + 1, taken):
                result[i] = jj
                break
            taken.discard(jj)
        if result[i] < 0:
            return assignment      # tolerance too tight; the JV answer stands
    return result


@functools.lru_cache(maxsize=64)
def _injections(m, n):
    """All ordered picks of n distinct columns out of m, lexicographic."""
    return np.array(list(itertools.permutations(range(m), n)), dtype=np.intp)


def brute_force_assignment(cost):
    """Exhaustive oracle: try every injection, earliest (lexicographic) winner."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ShapeError(f"more rows than columns: {n} > {m}")
    if n == 0:
        return np.zeros(0, dtype=np.intp)
    perms = _injections(m, n)
    totals = cost[np.arange(n)[None, :], perms].sum(axis=1)
    return perms[int(np.argmin(totals))].copy()


def assignment_total(cost, assignment):
    cost = np.asarray(cost, dtype=np.float64)
    return math.fsum(float(cost[i, j]) for i, j in enumerate(assignment))


# -- loss ---------------------------------------------------------------------


def binary_relabel(gt_classes):
    """Class-agnostic relabeling: every instance becomes foreground class 0."""
    return np.zeros(len(gt_classes), dtype=np.intp)


def match_predictions(gt_classes, gt_intervals, result, cfg: MatchCostConfig):
    """Hungarian assignment for one forward result (no gradients involved)."""
    if len(gt_classes) == 0:
        return np.zeros(0, dtype=np.intp)
    return hungarian(cost_matrix(gt_classes, gt_intervals,
                                 result.class_probs.data, result.intervals.data, cfg))


def detr_loss(gt_classes, gt_intervals, class_probs, intervals, assignment,
              cfg: MatchCostConfig):
    """Set-prediction loss given a fixed assignment.

    Sum of negative log class probabilities over every query (unmatched
    queries target background, the last class index) plus weighted L1 and
    (1 - tIoU) over matched pairs.  Taking the assignment as an argument
    keeps the loss a plain differentiable function, so finite-difference
    checks see no matching discontinuities.
    """
    num_queries, num_cols = class_probs.shape
    background = num_cols - 1
    gt_classes = np.asarray(gt_classes, dtype=np.intp)
    n = len(gt_classes)
    assignment = np.asarray(assignment, dtype=np.intp)
    if assignment.shape != (n,):
        raise ShapeError(f"assignment covers {assignment.shape} of {n} ground truths")

    targets = np.full(num_queries, background, dtype=np.intp)
    if n:
        targets[assignment] = gt_classes
    picked = class_probs[(np.arange(num_queries), targets)]
    loss = -ad.log(ad.maximum(picked, LOG_FLOOR)).sum()
    if n == 0:
        return loss

    matched = intervals[assignment]                       # (n, 2) center/width
    gt_cw = ad.Tensor(np.asarray(gt_intervals, dtype=np.float64))
    l1 = ad.absolute(matched - gt_cw).sum()

    half = matched[:, 1] * 0.5
    start = ad.minimum(ad.maximum(matched[:, 0] - half, 0.0), 1.0)
    end = ad.minimum(ad.maximum(matched[:, 0] + half, 0.0), 1.0)
    gt_span = interval_to_span(gt_cw.data)
    gs, ge = ad.Tensor(gt_span[:, 0]), ad.Tensor(gt_span[:, 1])
    inter = ad.maximum(ad.minimum(end, ge) - ad.maximum(start, gs), 0.0)
    union = (end - start) + (ge - gs) - inter
    iou = inter / union
    loss = loss + cfg.lambda_l1 * l1 + cfg.lambda_iou * (float(n) - iou.sum())
    return loss
