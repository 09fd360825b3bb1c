"""End-to-end personalized segmentation of one image.

Tiles are featurized and run through the head independently, the 3-channel
maps (flow dy, flow dx, logit) are averaged across overlapping tiles, and
the stitched maps go through flow following. In GT-flow injection mode the
head is bypassed: flows and logits come from a ground-truth mask but still
pass through the same tiling and stitching.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .baseline_filter import similarity_filter
from .core import DimensionError, InstanceSet, as_image, validate_label_mask
from .flows import ReconstructionParams, compute_gt_flows, follow_flows
from .model_head import HeadWeights, ToyFeaturizer, forward, masked_mean_embedding
from .tiling import extract_tiles, plan_tiles, stitch

GT_LOGIT = 10.0


@dataclass(frozen=True)
class SegmentResult:
    labels: np.ndarray
    flow: np.ndarray
    logits: np.ndarray
    n_before_filter: int


def reference_embedding(image, ref_mask, featurizer=ToyFeaturizer()) -> np.ndarray:
    return masked_mean_embedding(featurizer(image), ref_mask)


def head_tile_maps(image, ref, weights: HeadWeights, featurizer, window, stride):
    """Per-tile ``(window, window, 3)`` head outputs and the tile grid."""
    image = as_image(image)
    grid = plan_tiles(image.shape[0], image.shape[1], window, stride)
    if weights.upsample != featurizer.patch_size:
        raise DimensionError(
            f"decoder upsamples by {weights.upsample}, patch size is {featurizer.patch_size}"
        )
    outs = []
    for tile in extract_tiles(grid, image):
        flow, logits, _ = forward(featurizer(tile), ref, weights)
        outs.append(np.concatenate([flow, logits[..., None]], axis=-1))
    return grid, outs


def gt_maps(mask) -> np.ndarray:
    """Injected ``(H, W, 3)`` maps: GT flows plus +/-GT_LOGIT on foreground/background."""
    mask = validate_label_mask(mask)
    flow, _ = compute_gt_flows(mask)
    logits = np.where(mask > 0, GT_LOGIT, -GT_LOGIT)
    return np.concatenate([flow, logits[..., None]], axis=-1)


def predict_maps(image, ref=None, weights=None, gt_mask=None, featurizer=ToyFeaturizer(),
                 window=336, stride=168) -> np.ndarray:
    """Stitched ``(H, W, 3)`` maps from the head, or from ``gt_mask`` when given."""
    image = as_image(image)
    if gt_mask is not None:
        maps = gt_maps(gt_mask)
        if maps.shape[:2] != image.shape[:2]:
            raise DimensionError("GT mask and image sizes differ")
        grid = plan_tiles(image.shape[0], image.shape[1], window, stride)
        return stitch(grid, extract_tiles(grid, maps))
    if weights is None or ref is None:
        raise ValueError("head mode needs weights and a reference embedding")
    grid, outs = head_tile_maps(image, ref, weights, featurizer, window, stride)
    return stitch(grid, outs)


def segment(image, ref, weights=None, gt_mask=None, featurizer=ToyFeaturizer(),
            window=336, stride=168, params: ReconstructionParams | None = None,
            filter_thresh: float | None = None) -> SegmentResult:
    """Segment every cell of the reference's category in ``image``.

    ``filter_thresh`` additionally drops reconstructed instances whose pooled
    toy feature has cosine below the threshold with ``ref``.
    """
    image = as_image(image)
    maps = predict_maps(image, ref, weights, gt_mask, featurizer, window, stride)
    flow, logits = maps[..., :2], maps[..., 2]
    labels = follow_flows(flow, logits, params)
    n = int(labels.max(initial=0))
    if filter_thresh is not None and n:
        inst = InstanceSet.from_label_mask(labels)
        kept, _ = similarity_filter(inst, featurizer(image), ref, filter_thresh)
        labels = kept.to_label_mask() if len(kept) else np.zeros_like(labels)
    return SegmentResult(labels, flow, logits, n)


def reflect_pad(image, window: int, multiple: int):
    """Reflect-pad bottom/right up to at least ``window`` and a multiple of ``multiple``.

    Returns the padded image and the original (H, W).
    """
    image = as_image(image)
    h, w = image.shape[:2]

    def target(n):
        t = max(n, window)
        return -(-t // multiple) * multiple

    th, tw = target(h), target(w)
    if (th, tw) == (h, w):
        return image, (h, w)
    return np.pad(image, ((0, th - h), (0, tw - w), (0, 0)), mode="reflect"), (h, w)


def _boundaries(labels: np.ndarray) -> np.ndarray:
    b = np.zeros(labels.shape, dtype=bool)
    b[1:, :] |= labels[1:, :] != labels[:-1, :]
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    b[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    return b & (labels > 0)


def instance_color(k: int) -> tuple[int, int, int]:
    hue = 0.12 + ((k * 0.618033988749895) % 1.0) * 0.76
    r, g, b = colorsys.hsv_to_rgb(hue, 0.9, 1.0)
    return int(r * 255), int(g * 255), int(b * 255)


def render_overlay(image, labels, ref_mask=None) -> np.ndarray:
    """RGB uint8 overlay: instance outlines in distinct colors, reference outlined in red."""
    image = as_image(image)
    labels = validate_label_mask(labels)
    gray = np.round(image.mean(axis=2) * 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    edges = _boundaries(labels)
    for k in range(1, int(labels.max(initial=0)) + 1):
        rgb[edges & (labels == k)] = instance_color(k)
    if ref_mask is not None:
        rgb[_boundaries(np.asarray(ref_mask, dtype=np.int64))] = (255, 0, 0)
    return rgb
