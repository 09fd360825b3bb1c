"""Similarity-driven baselines over generic instance proposals.

Two procedures that adapt a generic segmenter to the personalized task:
picking spatially separated high-similarity prompt points with duplicate
removal by mask NMS, and dropping predicted instances whose pooled feature
is not similar enough to the reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, DimensionError, InputError, InstanceSet, check_reference, iou
from .model_head import masked_mean_embedding

# a vector's cosine with itself may round to just below 1
COS_TOL = 1e-12


@dataclass(frozen=True)
class CandidateSet:
    points: tuple[tuple[int, int, float], ...]
    k: int
    min_dist: float

    def __post_init__(self):
        pts = np.array([(r, c) for r, c, _ in self.points], dtype=np.float64).reshape(-1, 2)
        if len(pts) > 1:
            d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
            d[np.diag_indices(len(pts))] = np.inf
            if d.min() < self.min_dist:
                raise InputError("candidate points closer than min_dist")
        scores = [s for _, _, s in self.points]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise InputError("candidate points must be sorted by score")


def select_candidate_points(sim, k: int = 100, min_dist: float = 8.0) -> CandidateSet:
    """Greedy: highest-similarity pixel at distance >= ``min_dist`` from all chosen points.

    Equal scores are visited in row-major order. Fewer than ``k`` points are
    returned when the grid runs out.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2:
        raise DimensionError("similarity grid must be 2D")
    if not np.all(np.isfinite(sim)):
        raise InputError("similarity grid has non-finite values")
    if k < 1 or min_dist < 0:
        raise ConfigError("need k >= 1 and min_dist >= 0")
    h, w = sim.shape
    order = np.argsort(-sim.ravel(), kind="stable")
    blocked = np.zeros((h, w), dtype=bool)
    r = int(np.ceil(min_dist))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    too_close = (yy**2 + xx**2) < min_dist**2
    points = []
    for flat in order:
        y, x = divmod(int(flat), w)
        if blocked[y, x]:
            continue
        points.append((y, x, float(sim[y, x])))
        if len(points) == k:
            break
        y0, y1 = max(0, y - r), min(h, y + r + 1)
        x0, x1 = max(0, x - r), min(w, x + r + 1)
        blocked[y0:y1, x0:x1] |= too_close[y0 - y + r : y1 - y + r, x0 - x + r : x1 - x + r]
    return CandidateSet(tuple(points), k, float(min_dist))


def nms_masks(instances: InstanceSet, iou_thresh: float = 0.5) -> InstanceSet:
    """Greedy mask NMS: keep an instance iff its IoU with every kept one is <= ``iou_thresh``."""
    if not 0.0 <= iou_thresh < 1.0:
        raise ConfigError("iou_thresh must lie in [0, 1)")
    if instances.scores is None:
        raise InputError("NMS needs instance scores")
    order = np.argsort(-instances.scores, kind="stable")
    kept: list[int] = []
    for i in order:
        m = instances.masks[i]
        if all(iou(m, instances.masks[j]) <= iou_thresh for j in kept):
            kept.append(int(i))
    return instances.subset(sorted(kept))


def similarity_filter(instances: InstanceSet, features, ref, thresh: float = 0.5):
    """Keep instances whose pooled feature has cosine >= ``thresh`` with the reference.

    The comparison allows ``COS_TOL`` of rounding slack. Returns the filtered
    set and the kept indices into the input.
    """
    ref = check_reference(ref, features.dim)
    if instances.masks.shape[1:] != features.canvas:
        raise DimensionError(
            f"instance canvas {instances.masks.shape[1:]} != feature canvas {features.canvas}"
        )
    keep = [
        i
        for i, m in enumerate(instances.masks)
        if float(masked_mean_embedding(features, m) @ ref) >= thresh - COS_TOL
    ]
    return instances.subset(keep), keep
