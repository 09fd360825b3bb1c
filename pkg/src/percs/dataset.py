"""Dataset manifests, reference selection, cut-paste mixing and synthetic fixtures.

A manifest is a JSON file listing image/mask pairs (paths relative to the
manifest), the image's cell type, its split, the fixed evaluation reference
and an optional per-instance type table for mixed-type images::

    {"version": 1,
     "entries": [{"id": "img0000",
                  "image": "images/img0000.png",
                  "mask": "masks/img0000.png",
                  "cell_type": 2,
                  "split": "test",
                  "fixed_reference": 3,
                  "instance_types": {"1": 1, "2": 2, "3": 2}}]}

Entries without ``instance_types`` assign ``cell_type`` to every instance.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy import ndimage

from .core import (
    ConfigError,
    DataError,
    ProtocolError,
    as_image,
    n_instances,
    validate_label_mask,
)
from .io import read_image, read_mask, write_image, write_json, write_mask

logger = logging.getLogger(__name__)

SPLITS = ("train", "test", "novel")
EVAL_SPLITS = ("test", "novel")


def _schema(name: str) -> dict:
    return json.loads(resources.files("percs.schemas").joinpath(name).read_text())


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: str
    mask: str
    cell_type: int
    split: str
    fixed_reference: int | None = None
    instance_types: dict[int, int] | None = None

    def type_table(self, mask=None) -> dict[int, int]:
        """Instance label -> type id. Without an explicit table every label in
        ``mask`` gets the entry's ``cell_type``."""
        if self.instance_types is not None:
            return dict(self.instance_types)
        if mask is None:
            raise DataError(f"entry {self.id}: a mask is needed to expand the type table")
        return {k: self.cell_type for k in range(1, n_instances(mask) + 1)}

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "image": self.image,
            "mask": self.mask,
            "cell_type": self.cell_type,
            "split": self.split,
            "fixed_reference": self.fixed_reference,
        }
        if self.instance_types is not None:
            d["instance_types"] = {str(k): v for k, v in sorted(self.instance_types.items())}
        return d


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...] = ()
    root: Path = field(default=Path("."), compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.image

    def mask_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.mask

    def find(self, entry_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise DataError(f"no manifest entry with id {entry_id!r}")

    def load(self, entry: ManifestEntry):
        """(image, mask, type table) for one entry."""
        image = read_image(self.image_path(entry))
        mask = read_mask(self.mask_path(entry))
        if image.shape[:2] != mask.shape:
            raise DataError(f"entry {entry.id}: image and mask sizes differ")
        return image, mask, entry.type_table(mask)

    def to_json(self) -> dict:
        return {"version": 1, "entries": [e.to_json() for e in self.entries]}


def _entry_from_json(d: dict) -> ManifestEntry:
    types = d.get("instance_types")
    if types is not None:
        types = {int(k): int(v) for k, v in types.items()}
    return ManifestEntry(
        id=str(d["id"]),
        image=d["image"],
        mask=d["mask"],
        cell_type=int(d["cell_type"]),
        split=d["split"],
        fixed_reference=d.get("fixed_reference"),
        instance_types=types,
    )


def validate_manifest(manifest: DatasetManifest, check_files: bool = True) -> None:
    errors = []
    seen = set()
    for i, e in enumerate(manifest.entries):
        if e.id in seen:
            errors.append(f"entry {i} ({e.id}): duplicate id")
        seen.add(e.id)
        if e.split not in SPLITS:
            errors.append(f"entry {i} ({e.id}): unknown split {e.split!r}")
        if e.cell_type < 1:
            errors.append(f"entry {i} ({e.id}): type ids must be positive")
        if e.instance_types and any(t < 1 for t in e.instance_types.values()):
            errors.append(f"entry {i} ({e.id}): type ids must be positive")
        if e.split in EVAL_SPLITS and e.fixed_reference is None:
            errors.append(f"entry {i} ({e.id}): {e.split} entry lacks fixed_reference")
        if not check_files:
            continue
        missing = [p for p in (e.image, e.mask) if not (manifest.root / p).is_file()]
        for p in missing:
            errors.append(f"entry {i} ({e.id}): missing file {p}")
        if missing:
            continue
        mask = read_mask(manifest.mask_path(e))
        k = n_instances(mask)
        if e.instance_types is not None:
            uncovered = [lab for lab in range(1, k + 1) if lab not in e.instance_types]
            if uncovered:
                errors.append(f"entry {i} ({e.id}): type table misses labels {uncovered}")
        if e.fixed_reference is not None and not 1 <= e.fixed_reference <= k:
            errors.append(
                f"entry {i} ({e.id}): fixed_reference {e.fixed_reference} not in mask (K={k})"
            )
    if errors:
        raise DataError("invalid manifest:\n  " + "\n  ".join(errors))


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    try:
        jsonschema.validate(raw, _schema("manifest.schema.json"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path)
        raise DataError(f"manifest schema violation at {where or '<root>'}: {exc.message}") from exc
    manifest = DatasetManifest(tuple(_entry_from_json(e) for e in raw["entries"]), path.parent)
    validate_manifest(manifest, check_files)
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    write_json(path, manifest.to_json())


# --------------------------------------------------------------------------
# reference protocol


def select_reference(entry: ManifestEntry, mode: str, rng=None, mask=None) -> tuple[int, int]:
    """Pick the reference instance: uniform in train mode, the fixed one in eval mode.

    Returns ``(instance label, type id)``. Eval mode never touches ``rng``.
    """
    if mode == "eval":
        if entry.fixed_reference is None:
            raise ProtocolError(f"entry {entry.id} has no fixed_reference for evaluation")
        label = int(entry.fixed_reference)
        if mask is not None:
            k = n_instances(validate_label_mask(mask))
            if k == 0:
                raise ProtocolError(f"entry {entry.id}: mask has no instances")
            if not 1 <= label <= k:
                raise ProtocolError(f"entry {entry.id}: fixed_reference {label} not in mask")
            return label, entry.type_table(mask)[label]
        if entry.instance_types is not None:
            return label, entry.instance_types[label]
        return label, entry.cell_type
    if mode == "train":
        if mask is None or rng is None:
            raise ProtocolError("train-mode selection needs the mask and a seeded rng")
        mask = validate_label_mask(mask)
        k = n_instances(mask)
        if k == 0:
            raise ProtocolError(f"entry {entry.id}: mask has no instances")
        label = int(rng.integers(1, k + 1))
        return label, entry.type_table(mask)[label]
    raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


def target_mask_for_reference(mask, types: dict[int, int], ref_type: int) -> np.ndarray:
    """Union of all instances whose type equals ``ref_type``."""
    mask = validate_label_mask(mask)
    k = n_instances(mask)
    lut = np.zeros(k + 1, dtype=bool)
    for lab in range(1, k + 1):
        if lab not in types:
            raise DataError(f"type table has no entry for instance {lab}")
        lut[lab] = types[lab] == ref_type
    return lut[mask]


def target_instances(mask, types: dict[int, int], ref_type: int) -> np.ndarray:
    """Label mask keeping only instances of ``ref_type``, relabelled contiguously."""
    mask = validate_label_mask(mask)
    keep = target_mask_for_reference(mask, types, ref_type)
    return validate_label_mask(np.where(keep, mask, 0))


# --------------------------------------------------------------------------
# mixing


@dataclass(frozen=True)
class MixParams:
    n_paste: tuple[int, int] = (1, 5)
    max_attempts: int = 20
    allow_overlap: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_paste
        if lo < 0 or hi < lo:
            raise ConfigError(f"n_paste range must satisfy 0 <= lo <= hi, got {self.n_paste}")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")


@dataclass(frozen=True)
class MixResult:
    image: np.ndarray
    mask: np.ndarray
    types: dict[int, int]
    n_pasted: int
    n_skipped: int
    label_map: dict[int, int] = field(default_factory=dict)


def mix_paste(target, donors, params: MixParams = MixParams(), rng=None) -> MixResult:
    """Paste donor cells at uniformly sampled positions onto the target.

    ``target`` is ``(image, mask, types)``; each donor is ``(image, binary
    instance mask, type id)``. Without ``allow_overlap`` a placement that
    touches existing foreground is retried up to ``max_attempts`` times and
    the donor is skipped after that. New instances get the next free labels.
    ``label_map`` maps the target's original labels to their labels in the
    output (identity unless overlapping pastes erased or renumbered some).
    """
    image, mask, types = target
    image = as_image(image).copy()
    mask = validate_label_mask(mask).copy()
    types = dict(types)
    if rng is None:
        rng = np.random.default_rng(params.rng_seed)
    h, w = mask.shape
    k0 = n_instances(mask)
    k = k0
    pasted = skipped = 0
    for d_img, d_mask, d_type in donors:
        d_img = as_image(d_img)
        d_mask = np.asarray(d_mask, dtype=bool)
        ys, xs = np.nonzero(d_mask)
        if ys.size == 0:
            raise DataError("donor instance mask is empty")
        if d_img.shape[2] != image.shape[2]:
            raise DataError("donor and target channel counts differ")
        y0, x0 = ys.min(), xs.min()
        ch, cw = ys.max() - y0 + 1, xs.max() - x0 + 1
        if ch > h or cw > w:
            skipped += 1
            continue
        cut = d_mask[y0 : y0 + ch, x0 : x0 + cw]
        pix = d_img[y0 : y0 + ch, x0 : x0 + cw][cut]
        for _ in range(params.max_attempts):
            r = int(rng.integers(0, h - ch + 1))
            c = int(rng.integers(0, w - cw + 1))
            region = mask[r : r + ch, c : c + cw]
            if params.allow_overlap or not np.any(region[cut]):
                k += 1
                region[cut] = k
                image[r : r + ch, c : c + cw][cut] = pix
                types[k] = int(d_type)
                pasted += 1
                break
        else:
            skipped += 1
    label_map = {lab: lab for lab in range(1, k0 + 1)}
    if params.allow_overlap and pasted:
        present = np.unique(mask)
        present = present[present > 0]
        new_of_old = {int(old): i + 1 for i, old in enumerate(present)}
        mask = validate_label_mask(mask)
        types = {new_of_old[old]: t for old, t in types.items() if old in new_of_old}
        label_map = {lab: new_of_old[lab] for lab in range(1, k0 + 1) if lab in new_of_old}
    return MixResult(image, mask, types, pasted, skipped, label_map)


def sample_donors(manifest: DatasetManifest, index: int, params: MixParams, rng, cache=None):
    """Draw donor cells of other types from the other manifest entries."""
    entry = manifest.entries[index]
    cache = {} if cache is None else cache

    def loaded(e):
        if e.id not in cache:
            cache[e.id] = manifest.load(e)
        return cache[e.id]

    pool = []
    for j, e in enumerate(manifest.entries):
        if j == index:
            continue
        _, m, t = loaded(e)
        for lab in range(1, n_instances(m) + 1):
            if t[lab] != entry.cell_type:
                pool.append((j, lab))
    lo, hi = params.n_paste
    n = int(rng.integers(lo, hi + 1))
    if not pool or n == 0:
        return []
    donors = []
    for pick in rng.integers(0, len(pool), size=n):
        j, lab = pool[int(pick)]
        img, m, t = loaded(manifest.entries[j])
        donors.append((img, m == lab, t[lab]))
    return donors


# --------------------------------------------------------------------------
# synthetic fixtures


@dataclass(frozen=True)
class FixtureSpec:
    """Synthetic scene parameters.

    ``signature="intensity"`` renders each type at its own brightness level;
    ``"channel"`` puts type ``t`` into channel ``(t - 1) % channels`` so that
    different types produce (near) orthogonal toy features.
    """

    n_images: int = 1
    blobs: tuple[int, int] = (3, 8)
    radii: tuple[float, float] = (6.0, 14.0)
    n_types: int = 2
    seed: int = 0
    height: int = 336
    width: int = 336
    channels: int = 1
    noise: float = 0.05
    signature: str = "intensity"
    split: str = "test"
    gap: int = 2
    max_tries: int = 200

    def __post_init__(self):
        if self.n_images < 1:
            raise ConfigError("n_images must be >= 1")
        if self.blobs[0] < 1 or self.blobs[1] < self.blobs[0]:
            raise ConfigError("blob count range must satisfy 1 <= lo <= hi")
        if self.radii[0] < 2 or self.radii[1] < self.radii[0]:
            raise ConfigError("radius range must satisfy 2 <= lo <= hi")
        if self.n_types < 1:
            raise ConfigError("n_types must be >= 1")
        if not 1 <= self.channels <= 3:
            raise ConfigError("channels must be 1..3")
        if self.signature not in ("intensity", "channel"):
            raise ConfigError("signature must be 'intensity' or 'channel'")
        if self.signature == "channel" and self.n_types > self.channels:
            raise ConfigError("channel signature needs at least one channel per type")
        if not 0 <= self.noise <= 0.5:
            raise ConfigError("noise must be in [0, 0.5]")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}")
        if 2 * self.radii[1] + 2 > min(self.height, self.width):
            raise ConfigError("canvas too small for the largest blob")
        if self.gap < 0 or self.max_tries < 1:
            raise ConfigError("gap must be >= 0 and max_tries >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "FixtureSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown fixture spec keys: {sorted(extra)}")
        d = dict(d)
        for key in ("blobs", "radii"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def type_level(t: int, n_types: int) -> float:
    return 0.3 + 0.6 * (t - 1) / max(n_types - 1, 1)


def _ellipse(shape, cy, cx, a, b, theta):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    dy, dx = yy - cy, xx - cx
    u = (dy * np.cos(theta) + dx * np.sin(theta)) / a
    v = (-dy * np.sin(theta) + dx * np.cos(theta)) / b
    return u * u + v * v <= 1.0


def render_scene(spec: FixtureSpec, rng):
    """One synthetic image: (image, mask, types, requested blob count)."""
    h, w = spec.height, spec.width
    n_req = int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))
    mask = np.zeros((h, w), dtype=np.int64)
    blocked = np.zeros((h, w), dtype=bool)
    grow = np.ones((2 * spec.gap + 1,) * 2, dtype=bool) if spec.gap else None
    types: dict[int, int] = {}
    k = 0
    for _ in range(n_req):
        for _ in range(spec.max_tries):
            a, b = rng.uniform(spec.radii[0], spec.radii[1], size=2)
            theta = rng.uniform(0.0, np.pi)
            m = int(np.ceil(max(a, b))) + 1
            cy = rng.uniform(m, h - 1 - m)
            cx = rng.uniform(m, w - 1 - m)
            blob = _ellipse((h, w), cy, cx, a, b, theta)
            if blob.any() and not np.any(blob & blocked):
                k += 1
                mask[blob] = k
                types[k] = int(rng.integers(1, spec.n_types + 1))
                blocked |= ndimage.binary_dilation(blob, grow) if grow is not None else blob
                break
        else:
            logger.warning("could not place blob %d of %d; using %d blobs", k + 1, n_req, k)
            break

    c = spec.channels
    image = spec.noise * rng.random((h, w, c))
    yy, xx = np.mgrid[:h, :w]
    for lab, t in types.items():
        sel = mask == lab
        period = 3.0 + t
        texture = 0.05 * np.sin(2.0 * np.pi * (yy[sel] + xx[sel]) / period)
        if spec.signature == "intensity":
            image[sel] = (type_level(t, spec.n_types) + texture)[:, None] + image[sel] * 0.5
        else:
            image[sel] = spec.noise * rng.random((int(sel.sum()), c))
            image[sel, (t - 1) % c] = 0.8 + texture
    return np.clip(image, 0.0, 1.0), mask, types, n_req


def synth_fixtures(spec: FixtureSpec, out_dir) -> DatasetManifest:
    """Render ``spec.n_images`` scenes and write images, masks and ``manifest.json``."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    entries = []
    for i in range(spec.n_images):
        image, mask, types, _ = render_scene(spec, rng)
        if not types:
            raise DataError(f"image {i}: no blob could be placed")
        ref = int(rng.integers(1, len(types) + 1))
        name = f"img{i:04d}"
        write_image(out_dir / "images" / f"{name}.png", image)
        write_mask(out_dir / "masks" / f"{name}.png", mask)
        entries.append(
            ManifestEntry(
                id=name,
                image=f"images/{name}.png",
                mask=f"masks/{name}.png",
                cell_type=types[ref],
                split=spec.split,
                fixed_reference=ref,
                instance_types=types,
            )
        )
    manifest = DatasetManifest(tuple(entries), out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def with_entries(manifest: DatasetManifest, entries, root=None) -> DatasetManifest:
    return replace(manifest, entries=tuple(entries), root=Path(root) if root else manifest.root)
