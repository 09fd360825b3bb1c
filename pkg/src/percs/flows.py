"""Ground-truth flow fields from label masks and mask reconstruction by flow following.

Flows are built the Cellpose way: heat is diffused from each instance's
center, and the flow is the normalized spatial gradient of ``log(1 + heat)``.
Reconstruction moves every foreground pixel along the flow with Euler steps
and groups pixels whose trajectories end in the same sink.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import (
    ConfigError,
    EmptyInstanceError,
    check_flow_field,
    check_logits,
    sigmoid,
    validate_label_mask,
)

logger = logging.getLogger(__name__)

GRAD_EPS = 1e-12


@dataclass(frozen=True)
class ReconstructionParams:
    step_size: float = 1.0
    n_steps: int = 200
    prob_threshold: float = 0.5
    min_size: int = 15
    merge_radius: int = 2

    def __post_init__(self):
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if not 0.0 < self.prob_threshold < 1.0:
            raise ConfigError("prob_threshold must lie in (0, 1)")
        if self.min_size < 0:
            raise ConfigError("min_size must be >= 0")
        if self.merge_radius < 1:
            raise ConfigError("merge_radius must be >= 1")


def instance_center(mask) -> tuple[int, int]:
    """In-mask pixel closest to the per-axis median of the mask coordinates.

    Ties go to the first pixel in row-major order.
    """
    ys, xs = np.nonzero(np.asarray(mask, dtype=bool))
    if ys.size == 0:
        raise EmptyInstanceError("cannot take the center of an empty mask")
    my, mx = np.median(ys), np.median(xs)
    d2 = (ys - my) ** 2 + (xs - mx) ** 2
    i = int(np.argmin(d2))
    return int(ys[i]), int(xs[i])


def n_diffusion_steps(inside: np.ndarray) -> int:
    ys, xs = np.nonzero(inside)
    longest = max(ys.max() - ys.min() + 1, xs.max() - xs.min() + 1)
    return int(2 * longest + 10)


def _neighbor_sum(a: np.ndarray) -> np.ndarray:
    # a is zero outside the instance and on the padded border
    s = a.copy()
    s[1:, :] += a[:-1, :]
    s[:-1, :] += a[1:, :]
    s[:, 1:] += a[:, :-1]
    s[:, :-1] += a[:, 1:]
    return s


def diffuse(inside: np.ndarray, center: tuple[int, int], n_iter: int) -> np.ndarray:
    """Heat diffusion restricted to ``inside`` with a unit source at ``center``.

    Each step averages a pixel with its four neighbors over a fixed 5-point
    stencil; heat outside the instance is held at zero, so the boundary leaks
    and the maximum stays at the source. ``inside`` must carry at least one
    pixel of background padding on every side.
    """
    inside = inside.astype(bool)
    heat = np.zeros(inside.shape, dtype=np.float64)
    cy, cx = center
    for _ in range(n_iter):
        heat[cy, cx] += 1.0
        heat = np.where(inside, _neighbor_sum(heat) / 5.0, 0.0)
    return heat


def _masked_gradient(g: np.ndarray, inside: np.ndarray, axis: int) -> np.ndarray:
    """Central differences where both neighbors are inside, one-sided otherwise."""
    fwd_in = np.zeros_like(inside)
    bwd_in = np.zeros_like(inside)
    fwd = np.zeros_like(g)
    bwd = np.zeros_like(g)
    if axis == 0:
        fwd_in[:-1] = inside[1:]
        bwd_in[1:] = inside[:-1]
        fwd[:-1] = g[1:]
        bwd[1:] = g[:-1]
    else:
        fwd_in[:, :-1] = inside[:, 1:]
        bwd_in[:, 1:] = inside[:, :-1]
        fwd[:, :-1] = g[:, 1:]
        bwd[:, 1:] = g[:, :-1]
    both = fwd_in & bwd_in
    out = np.zeros_like(g)
    out[both] = (fwd[both] - bwd[both]) / 2.0
    only_f = fwd_in & ~bwd_in
    out[only_f] = fwd[only_f] - g[only_f]
    only_b = bwd_in & ~fwd_in
    out[only_b] = g[only_b] - bwd[only_b]
    out[~inside] = 0.0
    return out


def compute_gt_flows(mask) -> tuple[np.ndarray, np.ndarray]:
    """Unit flow field ``(H, W, 2)`` pointing to each instance's center, plus the heat map."""
    mask = validate_label_mask(mask)
    h, w = mask.shape
    flow = np.zeros((h, w, 2), dtype=np.float64)
    heat = np.zeros((h, w), dtype=np.float64)
    for k, sl in enumerate(ndimage.find_objects(mask), start=1):
        if sl is None:
            continue
        y0, y1 = sl[0].start, sl[0].stop
        x0, x1 = sl[1].start, sl[1].stop
        inside = np.pad(mask[y0:y1, x0:x1] == k, 1)
        cy, cx = instance_center(inside)
        t = diffuse(inside, (cy, cx), n_diffusion_steps(inside))
        g = np.log1p(t)
        dy = _masked_gradient(g, inside, 0)
        dx = _masked_gradient(g, inside, 1)
        mag = np.hypot(dy, dx)
        ok = mag > GRAD_EPS
        vy = np.where(ok, dy / np.where(ok, mag, 1.0), 0.0)
        vx = np.where(ok, dx / np.where(ok, mag, 1.0), 0.0)
        sel = inside[1:-1, 1:-1]
        flow[y0:y1, x0:x1, 0][sel] = vy[1:-1, 1:-1][sel]
        flow[y0:y1, x0:x1, 1][sel] = vx[1:-1, 1:-1][sel]
        heat[y0:y1, x0:x1][sel] = t[1:-1, 1:-1][sel]
    return flow, heat


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return yy**2 + xx**2 <= r * r


def remove_small_instances(mask, min_size: int) -> np.ndarray:
    """Turn instances with fewer than ``min_size`` pixels into background and relabel."""
    mask = validate_label_mask(mask)
    if min_size <= 0:
        return mask
    sizes = np.bincount(mask.ravel())
    small = sizes < min_size
    small[0] = False
    if small.any():
        mask = np.where(small[mask], 0, mask)
    return validate_label_mask(mask)


def follow_flows(flow, logits, params: ReconstructionParams | None = None) -> np.ndarray:
    """Reconstruct a label mask by Euler integration along ``flow``.

    Only pixels with ``sigmoid(logit) > prob_threshold`` move. Sampled flow
    vectors are renormalized to unit length, so averaged (shrunken) flows
    keep their direction. Final positions are clustered by connected
    components of the occupancy grid dilated by ``merge_radius``.
    """
    params = params or ReconstructionParams()
    logits = check_logits(logits)
    flow = check_flow_field(flow, logits.shape)
    h, w = logits.shape
    fg = sigmoid(logits) > params.prob_threshold
    out = np.zeros((h, w), dtype=np.int64)
    if not fg.any():
        return out

    unit_flow = np.zeros_like(flow)
    mag = np.hypot(flow[..., 0], flow[..., 1])
    ok = mag > GRAD_EPS
    unit_flow[ok] = flow[ok] / mag[ok, None]

    ys, xs = np.nonzero(fg)
    pos = np.stack([ys, xs], axis=1).astype(np.float64)
    lim = np.array([h - 1, w - 1], dtype=np.float64)
    for _ in range(params.n_steps):
        idx = np.floor(pos + 0.5).astype(np.int64)
        step = unit_flow[idx[:, 0], idx[:, 1]]
        pos = np.clip(pos + params.step_size * step, 0.0, lim)

    end = np.floor(pos + 0.5).astype(np.int64)
    occupied = np.zeros((h, w), dtype=bool)
    occupied[end[:, 0], end[:, 1]] = True
    grown = ndimage.binary_dilation(occupied, structure=_disk(params.merge_radius))
    sinks, _ = ndimage.label(grown, structure=np.ones((3, 3), dtype=bool))
    out[ys, xs] = sinks[end[:, 0], end[:, 1]]
    return remove_small_instances(out, params.min_size)
