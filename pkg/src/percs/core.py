"""Shared domain types, validation helpers and error classes.

Grids are plain numpy arrays in row-major (y, x) order. Flow vectors are
stored as a trailing axis of length 2 holding ``(dy, dx)``; label 0 is
always background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class PercsError(Exception):
    """Base class for every error raised on purpose by this package."""


class InputError(PercsError, ValueError):
    """Malformed input data."""


class DimensionError(InputError):
    """Array shapes that do not line up."""


class EmptyInstanceError(InputError):
    """An operation needed a non-empty instance mask."""


class EmptyReferenceError(EmptyInstanceError):
    """Reference mask has no pixels."""


class ConfigError(PercsError, ValueError):
    """Parameter outside its allowed range."""


class NumericError(PercsError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ProtocolError(PercsError):
    """Reference selection protocol violated."""


class DataError(PercsError):
    """Inconsistent dataset content (manifests, type tables)."""


# --------------------------------------------------------------------------
# array validators


def as_image(data) -> np.ndarray:
    """Return ``data`` as a float64 ``(H, W, C)`` image with values in [0, 1].

    2D input is promoted to a single channel.
    """
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise DimensionError(f"image must be 2D or 3D, got shape {img.shape}")
    h, w, c = img.shape
    if h < 1 or w < 1:
        raise DimensionError(f"image dimensions must be >= 1, got {img.shape}")
    if not 1 <= c <= 3:
        raise DimensionError(f"image must have 1-3 channels, got {c}")
    if not np.all(np.isfinite(img)):
        raise NumericError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise InputError("image intensities must lie in [0, 1]")
    return img


def validate_label_mask(mask, return_count: bool = False):
    """Relabel an integer instance map to the contiguous set ``{0..K}``.

    Labels keep their relative order, so ``{0, 5, 9}`` becomes ``{0, 1, 2}``.
    With ``return_count`` the pair ``(mask, K)`` is returned.
    """
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DimensionError(f"label mask must be 2D, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise InputError("label mask must hold integer values")
    elif arr.dtype.kind not in "iub":
        raise InputError(f"label mask must be integer, got dtype {arr.dtype}")
    if arr.size and arr.min() < 0:
        raise InputError("label mask contains negative labels")
    arr = arr.astype(np.int64)
    present = np.unique(arr)
    present = present[present != 0]
    k = int(present.size)
    if k and present[-1] != k:
        lut = np.zeros(int(present[-1]) + 1, dtype=np.int64)
        lut[present] = np.arange(1, k + 1)
        arr = lut[arr]
    if return_count:
        return arr, k
    return arr


def n_instances(mask: np.ndarray) -> int:
    return int(mask.max()) if mask.size else 0


def instance_masks(mask: np.ndarray) -> list[np.ndarray]:
    """Binary mask per label 1..K of a validated label mask."""
    return [mask == k for k in range(1, n_instances(mask) + 1)]


def check_flow_field(flow, shape=None) -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DimensionError(f"flow field must have shape (H, W, 2), got {flow.shape}")
    if shape is not None and flow.shape[:2] != tuple(shape):
        raise DimensionError(f"flow canvas {flow.shape[:2]} does not match {tuple(shape)}")
    if not np.all(np.isfinite(flow)):
        raise NumericError("flow field contains non-finite values")
    return flow


def check_logits(logits, shape=None) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise DimensionError(f"logit map must be 2D, got shape {logits.shape}")
    if shape is not None and logits.shape != tuple(shape):
        raise DimensionError(f"logit canvas {logits.shape} does not match {tuple(shape)}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("logit map contains non-finite values")
    return logits


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def iou(a, b) -> float:
    """Intersection over union of two binary masks (0 when both are empty)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def unit(v, eps: float = 0.0) -> np.ndarray:
    """Normalize ``v`` along its last axis; zero vectors stay zero."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > eps)


# --------------------------------------------------------------------------
# composite types


@dataclass(frozen=True)
class PatchFeatureMap:
    """Per-patch feature vectors of one image, shape ``(grid_h, grid_w, D)``."""

    features: np.ndarray
    patch_size: int

    def __post_init__(self):
        f = np.array(self.features, dtype=np.float64)
        if f.ndim != 3 or f.shape[0] < 1 or f.shape[1] < 1 or f.shape[2] < 1:
            raise DimensionError(f"features must be (grid_h, grid_w, D), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise NumericError("patch features contain non-finite values")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        f.flags.writeable = False
        object.__setattr__(self, "features", f)

    @property
    def grid_h(self) -> int:
        return self.features.shape[0]

    @property
    def grid_w(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def canvas(self) -> tuple[int, int]:
        return self.grid_h * self.patch_size, self.grid_w * self.patch_size

    def flat(self) -> np.ndarray:
        """Features flattened to ``(grid_h * grid_w, D)``."""
        return self.features.reshape(-1, self.dim)


def check_reference(ref, dim: int | None = None) -> np.ndarray:
    """Validate a reference embedding: a unit D-vector. The zero vector is rejected."""
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if dim is not None and ref.size != dim:
        raise DimensionError(f"reference has dim {ref.size}, features have {dim}")
    n = np.linalg.norm(ref)
    if n == 0.0:
        raise EmptyReferenceError("reference embedding is the zero vector")
    if abs(n - 1.0) > 1e-6:
        raise InputError(f"reference embedding must be unit length, norm={n}")
    return ref


@dataclass(frozen=True)
class CellEmbedding:
    vector: np.ndarray
    class_label: int

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64).ravel()
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise InputError("cell embedding must be unit length")
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class InstanceSet:
    """Binary masks on one canvas with optional scores.

    Masks are stacked into an ``(N, H, W)`` boolean array. Overlap is allowed
    here (baseline candidates); final label masks never overlap.
    """

    masks: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        m = np.array(self.masks, dtype=bool)
        if m.ndim != 3:
            raise DimensionError(f"masks must be stacked as (N, H, W), got {m.shape}")
        if m.shape[0] and not np.all(m.reshape(m.shape[0], -1).any(axis=1)):
            raise EmptyInstanceError("instance set contains an empty mask")
        m.flags.writeable = False
        object.__setattr__(self, "masks", m)
        if self.scores is not None:
            s = np.array(self.scores, dtype=np.float64).ravel()
            if s.size != m.shape[0]:
                raise DimensionError("one score per mask is required")
            s.flags.writeable = False
            object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return self.masks.shape[0]

    @classmethod
    def from_label_mask(cls, mask, scores=None, shape=None) -> "InstanceSet":
        mask = validate_label_mask(mask)
        k = n_instances(mask)
        if k == 0:
            return cls(np.zeros((0,) + mask.shape, dtype=bool), scores)
        masks = mask[None, :, :] == np.arange(1, k + 1)[:, None, None]
        return cls(masks, scores)

    def subset(self, keep) -> "InstanceSet":
        keep = list(keep)
        scores = None if self.scores is None else self.scores[keep]
        return InstanceSet(self.masks[keep], scores)

    def to_label_mask(self) -> np.ndarray:
        """Paint masks in order into a label map; later masks win on overlap."""
        shape = self.masks.shape[1:]
        out = np.zeros(shape, dtype=np.int64)
        for i, m in enumerate(self.masks):
            out[m] = i + 1
        return validate_label_mask(out)


@dataclass(frozen=True)
class ThresholdRecord:
    iou_threshold: float
    tp: int
    fp: int
    fn: int
    ap: float
    precision: float
    recall: float
    degenerate: bool = False

    def __post_init__(self):
        for name in ("ap", "precision", "recall"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name}={v} outside [0, 1]")
        if min(self.tp, self.fp, self.fn) < 0:
            raise InputError("counts must be non-negative")
        if self.ap > min(self.precision, self.recall) + 1e-12:
            raise InputError(
                f"AP={self.ap} exceeds min(P={self.precision}, R={self.recall})"
            )

    def as_dict(self, ndigits: int = 6) -> dict:
        return {
            "iou": self.iou_threshold,
            "TP": self.tp,
            "FP": self.fp,
            "FN": self.fn,
            "AP": round(self.ap, ndigits),
            "P": round(self.precision, ndigits),
            "R": round(self.recall, ndigits),
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class MetricsReport:
    records: tuple[ThresholdRecord, ...] = field(default_factory=tuple)

    def __getitem__(self, threshold: float) -> ThresholdRecord:
        for r in self.records:
            if r.iou_threshold == threshold:
                return r
        raise KeyError(threshold)

    def as_list(self) -> list[dict]:
        return [r.as_dict() for r in self.records]
