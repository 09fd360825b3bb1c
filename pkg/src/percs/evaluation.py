"""Instance matching and AP / precision / recall at fixed IoU thresholds.

Predictions are paired with ground-truth instances once, by a maximum-IoU
one-to-one assignment; each threshold is then applied to the matched pairs.
A pair is a true positive only when its IoU is strictly above the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    ConfigError,
    DimensionError,
    InputError,
    MetricsReport,
    ThresholdRecord,
    validate_label_mask,
)

DEFAULT_THRESHOLDS = (0.3, 0.5)


def iou_matrix(pred, gt) -> np.ndarray:
    """``(Kp, Kg)`` IoU matrix from a single joint histogram of the two label maps."""
    pred = validate_label_mask(pred)
    gt = validate_label_mask(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} and gt {gt.shape} differ")
    kp, kg = int(pred.max(initial=0)), int(gt.max(initial=0))
    joint = np.bincount(
        (pred * (kg + 1) + gt).ravel(), minlength=(kp + 1) * (kg + 1)
    ).reshape(kp + 1, kg + 1)
    inter = joint[1:, 1:].astype(np.float64)
    area_p = joint[1:, :].sum(axis=1).astype(np.float64)
    area_g = joint[:, 1:].sum(axis=0).astype(np.float64)
    union = area_p[:, None] + area_g[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def linear_assignment(cost) -> np.ndarray:
    """Minimum-cost perfect assignment of a square matrix.

    Shortest-augmenting-path Hungarian method with row/column potentials,
    O(n^3). Rows are inserted in order and columns scanned in ascending
    order with strict comparisons, so the result is deterministic.
    Returns ``col_of_row``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise DimensionError("linear_assignment needs a square matrix")
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    # row_of_col[j] for j in 1..n, 0 = free; column 0 is the virtual root
    row_of_col = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[row_of_col[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[row_of_col[j] - 1] = j - 1
    return col_of_row


@dataclass(frozen=True)
class MatchResult:
    """One-to-one pairing between predicted and ground-truth instances.

    Labels in ``pairs`` are 1-based instance labels; indices into the IoU
    matrix are ``label - 1``.
    """

    pairs: tuple[tuple[int, int, float], ...]
    n_pred: int
    n_gt: int

    @property
    def unmatched_pred(self) -> list[int]:
        taken = {p for p, _, _ in self.pairs}
        return [k for k in range(1, self.n_pred + 1) if k not in taken]

    @property
    def unmatched_gt(self) -> list[int]:
        taken = {g for _, g, _ in self.pairs}
        return [k for k in range(1, self.n_gt + 1) if k not in taken]

    @property
    def total_iou(self) -> float:
        return math.fsum(v for _, _, v in self.pairs)


def hungarian_match(ious) -> MatchResult:
    """Maximize total IoU over one-to-one pairings; zero-IoU pairs are dropped.

    Rectangular matrices are padded with zero-benefit dummy rows or columns.
    """
    ious = np.asarray(ious, dtype=np.float64)
    if ious.ndim != 2:
        raise DimensionError("IoU matrix must be 2D")
    if ious.size and (not np.all(np.isfinite(ious)) or ious.min() < 0):
        raise InputError("IoU matrix must be finite and non-negative")
    kp, kg = ious.shape
    n = max(kp, kg)
    if n == 0 or ious.size == 0:
        return MatchResult((), kp, kg)
    benefit = np.zeros((n, n))
    benefit[:kp, :kg] = ious
    cols = linear_assignment(-benefit)
    pairs = tuple(
        (i + 1, int(j) + 1, float(ious[i, j]))
        for i, j in enumerate(cols[:kp])
        if j < kg and ious[i, j] > 0.0
    )
    return MatchResult(pairs, kp, kg)


def _check_threshold(threshold: float) -> float:
    t = float(threshold)
    if not 0.0 < t < 1.0:
        raise ConfigError(f"IoU threshold must lie in (0, 1), got {threshold}")
    return t


def classify_matches(match: MatchResult, threshold: float) -> tuple[int, int, int]:
    """(TP, FP, FN): TP counts pairs with IoU strictly greater than ``threshold``."""
    t = _check_threshold(threshold)
    tp = sum(1 for _, _, v in match.pairs if v > t)
    return tp, match.n_pred - tp, match.n_gt - tp


def metrics(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """(AP, P, R) with AP = TP/(TP+FP+FN). Empty denominators give 1.0."""
    if min(tp, fp, fn) < 0:
        raise InputError("counts must be non-negative")

    def ratio(num, den):
        return 1.0 if den == 0 else num / den

    return ratio(tp, tp + fp + fn), ratio(tp, tp + fp), ratio(tp, tp + fn)


def make_record(threshold: float, tp: int, fp: int, fn: int) -> ThresholdRecord:
    ap, p, r = metrics(tp, fp, fn)
    degenerate = (tp + fp) == 0 or (tp + fn) == 0
    return ThresholdRecord(float(threshold), tp, fp, fn, ap, p, r, degenerate)


def evaluate(pred, gt, thresholds=DEFAULT_THRESHOLDS) -> MetricsReport:
    m = hungarian_match(iou_matrix(pred, gt))
    return MetricsReport(
        tuple(make_record(t, *classify_matches(m, t)) for t in thresholds)
    )


def aggregate(reports) -> MetricsReport:
    """Micro average: sum TP/FP/FN per threshold across images, then take ratios."""
    reports = list(reports)
    if not reports:
        return MetricsReport(())
    out = []
    for i, rec in enumerate(reports[0].records):
        tp = sum(r.records[i].tp for r in reports)
        fp = sum(r.records[i].fp for r in reports)
        fn = sum(r.records[i].fn for r in reports)
        out.append(make_record(rec.iou_threshold, tp, fp, fn))
    return MetricsReport(tuple(out))


def macro_average(reports, ndigits: int = 6) -> list[dict]:
    """Per-image ratios averaged with equal weight (diagnostic only)."""
    reports = list(reports)
    if not reports:
        return []
    out = []
    for i, rec in enumerate(reports[0].records):
        rows = [r.records[i] for r in reports]
        out.append(
            {
                "iou": rec.iou_threshold,
                "AP": round(float(np.mean([x.ap for x in rows])), ndigits),
                "P": round(float(np.mean([x.precision for x in rows])), ndigits),
                "R": round(float(np.mean([x.recall for x in rows])), ndigits),
            }
        )
    return out


def metrics_document(per_image) -> dict:
    """Metrics JSON body from ``[(image_id, MetricsReport), ...]``."""
    per_image = list(per_image)
    reports = [r for _, r in per_image]
    return {
        "per_image": [{"id": str(i), "thresholds": r.as_list()} for i, r in per_image],
        "aggregate": aggregate(reports).as_list(),
        "aggregate_macro": macro_average(reports),
    }
