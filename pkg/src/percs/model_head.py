"""Reference-guided segmentation head and its training losses.

The head takes patch features of a query image plus a unit reference
embedding, appends a cosine-similarity channel, projects to 256 dims, runs
two attention layers (4 heads of 64) in which the image tokens also attend to
a projected reference token, and decodes the tokens with two transposed
convolutions into flow (2 channels) and a logit map (1 channel).

Everything is float64 numpy. Only loss-level gradients are provided; there is
no backpropagation through the head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.special import erf

from .core import (
    CellEmbedding,
    ConfigError,
    DimensionError,
    EmptyReferenceError,
    InputError,
    NumericError,
    PatchFeatureMap,
    as_image,
    check_reference,
    sigmoid,
    unit,
    validate_label_mask,
)
from .io import atomic_write_bytes

TOKEN_DIM = 256
N_HEADS = 4
FFN_DIM = 512
N_LAYERS = 2
DECODER_MID = 64
DECODER_KERNELS = (7, 2)
LN_EPS = 1e-5

# --------------------------------------------------------------------------
# features


class FeatureProvider(Protocol):
    patch_size: int
    dim: int

    def __call__(self, image) -> PatchFeatureMap: ...


QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)
STATS_PER_CHANNEL = 4 + len(QUANTILES)


def toy_featurizer(image, patch_size: int = 14, dim: int = 32) -> PatchFeatureMap:
    """Hand-crafted patch statistics standing in for a pretrained backbone.

    Per channel and patch: mean, variance, mean absolute horizontal and
    vertical differences, and intensity quantiles. Channel blocks are
    concatenated, then zero-padded or truncated to ``dim``.
    """
    img = as_image(image)
    h, w, c = img.shape
    p = int(patch_size)
    if p < 1 or dim < 1:
        raise ConfigError("patch_size and dim must be >= 1")
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    # (gh, gw, C, p, p)
    patches = img.reshape(gh, p, gw, p, c).transpose(0, 2, 4, 1, 3)
    flat = patches.reshape(gh, gw, c, p * p)
    stats = [flat.mean(-1), flat.var(-1)]
    if p > 1:
        stats.append(np.abs(np.diff(patches, axis=-1)).mean(axis=(-2, -1)))
        stats.append(np.abs(np.diff(patches, axis=-2)).mean(axis=(-2, -1)))
    else:
        stats += [np.zeros((gh, gw, c))] * 2
    q = np.quantile(flat, QUANTILES, axis=-1)  # (nq, gh, gw, C)
    stats.extend(q)
    feats = np.stack(stats, axis=-1).reshape(gh, gw, c * STATS_PER_CHANNEL)
    if feats.shape[-1] >= dim:
        feats = feats[..., :dim]
    else:
        feats = np.concatenate([feats, np.zeros((gh, gw, dim - feats.shape[-1]))], axis=-1)
    return PatchFeatureMap(feats, p)


@dataclass(frozen=True)
class ToyFeaturizer:
    patch_size: int = 14
    dim: int = 32

    def __call__(self, image) -> PatchFeatureMap:
        return toy_featurizer(image, self.patch_size, self.dim)


def patch_coverage(mask, grid_h: int, grid_w: int, patch_size: int) -> np.ndarray:
    """Fraction of each patch covered by a binary pixel mask."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != (grid_h * patch_size, grid_w * patch_size):
        raise DimensionError(
            f"mask {m.shape} does not match grid {grid_h}x{grid_w} at patch size {patch_size}"
        )
    counts = m.reshape(grid_h, patch_size, grid_w, patch_size).sum(axis=(1, 3))
    return counts / float(patch_size * patch_size)


def _weighted_patch_mean(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.tensordot(weights, values, axes=([0, 1], [0, 1])) / weights.sum()


def masked_mean_embedding(features: PatchFeatureMap, ref_mask) -> np.ndarray:
    """Coverage-weighted mean of patch features under ``ref_mask``, normalized."""
    cov = patch_coverage(ref_mask, features.grid_h, features.grid_w, features.patch_size)
    if not cov.any():
        raise EmptyReferenceError("reference mask is empty")
    v = _weighted_patch_mean(features.features, cov)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise EmptyReferenceError("reference features average to the zero vector")
    return v / n


def cosine_similarity_map(features: PatchFeatureMap, ref) -> np.ndarray:
    """Cosine of every patch feature with the reference; zero-norm patches give 0."""
    ref = check_reference(ref, features.dim)
    return unit(features.features) @ ref


# --------------------------------------------------------------------------
# weights


@dataclass
class LayerWeights:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    NAMES = (
        "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
        "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
    )


@dataclass
class HeadWeights:
    """All parameters of the head.

    ``dec1_w`` has shape ``(C_in, C_mid, k1, k1)`` and ``dec2_w``
    ``(C_mid, 3, k2, k2)``; kernel equals stride in both stages, so the
    total upsampling factor is ``k1 * k2``.
    """

    proj_w: np.ndarray
    proj_b: np.ndarray
    layers: list[LayerWeights]
    dec1_w: np.ndarray
    dec1_b: np.ndarray
    dec2_w: np.ndarray
    dec2_b: np.ndarray
    n_heads: int = N_HEADS
    layer_norm: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.proj_w.shape[0] - 1

    @property
    def token_dim(self) -> int:
        return self.proj_w.shape[1]

    @property
    def upsample(self) -> int:
        return self.dec1_w.shape[2] * self.dec2_w.shape[2]

    @classmethod
    def init(
        cls,
        feature_dim: int,
        seed: int = 0,
        token_dim: int = TOKEN_DIM,
        n_heads: int = N_HEADS,
        ffn_dim: int = FFN_DIM,
        n_layers: int = N_LAYERS,
        mid_channels: int = DECODER_MID,
        kernels: tuple[int, int] = DECODER_KERNELS,
    ) -> "HeadWeights":
        """Seeded uniform init with bound 1/sqrt(fan_in); biases zero, LN scale one."""
        if token_dim % n_heads:
            raise ConfigError("token_dim must be divisible by n_heads")
        rng = np.random.default_rng(seed)

        def mat(fan_in, *shape):
            b = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-b, b, size=shape)

        layers = []
        for _ in range(n_layers):
            layers.append(
                LayerWeights(
                    wq=mat(token_dim, token_dim, token_dim), bq=np.zeros(token_dim),
                    wk=mat(token_dim, token_dim, token_dim), bk=np.zeros(token_dim),
                    wv=mat(token_dim, token_dim, token_dim), bv=np.zeros(token_dim),
                    wo=mat(token_dim, token_dim, token_dim), bo=np.zeros(token_dim),
                    ln1_g=np.ones(token_dim), ln1_b=np.zeros(token_dim),
                    w1=mat(token_dim, token_dim, ffn_dim), b1=np.zeros(ffn_dim),
                    w2=mat(ffn_dim, ffn_dim, token_dim), b2=np.zeros(token_dim),
                    ln2_g=np.ones(token_dim), ln2_b=np.zeros(token_dim),
                )
            )
        k1, k2 = kernels
        return cls(
            proj_w=mat(feature_dim + 1, feature_dim + 1, token_dim),
            proj_b=np.zeros(token_dim),
            layers=layers,
            dec1_w=mat(token_dim, token_dim, mid_channels, k1, k1),
            dec1_b=np.zeros(mid_channels),
            dec2_w=mat(mid_channels, mid_channels, 3, k2, k2),
            dec2_b=np.zeros(3),
            n_heads=n_heads,
            meta={"seed": seed},
        )

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("proj_w", self.proj_w), ("proj_b", self.proj_b)]
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.{n}", getattr(layer, n)) for n in LayerWeights.NAMES]
        out += [
            ("dec1_w", self.dec1_w), ("dec1_b", self.dec1_b),
            ("dec2_w", self.dec2_w), ("dec2_b", self.dec2_b),
        ]
        return out

    def check(self) -> None:
        for name, t in self.tensors():
            if not np.all(np.isfinite(t)):
                raise NumericError(f"weight tensor {name} has non-finite values")
        d = self.token_dim
        if d % self.n_heads:
            raise ConfigError("token_dim must be divisible by n_heads")
        if self.proj_b.shape != (d,):
            raise DimensionError("proj_b must have token_dim entries")
        for i, layer in enumerate(self.layers):
            for n in ("wq", "wk", "wv", "wo"):
                if getattr(layer, n).shape != (d, d):
                    raise DimensionError(f"layers.{i}.{n} must be {d}x{d}")
            if layer.w1.shape[0] != d or layer.w2.shape != (layer.w1.shape[1], d):
                raise DimensionError(f"layers.{i} feed-forward shapes inconsistent")
        if self.dec1_w.shape[0] != d or self.dec2_w.shape[0] != self.dec1_w.shape[1]:
            raise DimensionError("decoder channel counts inconsistent")
        if self.dec2_w.shape[1] != 3:
            raise DimensionError("decoder must produce 3 channels")

    def save(self, path) -> None:
        """Write ``b"PCSW"``, a u32 manifest length, the JSON manifest, then f32 LE blobs."""
        tensors = self.tensors()
        manifest = {
            "format": "percs-head-weights",
            "version": 1,
            "n_heads": self.n_heads,
            "n_layers": len(self.layers),
            "layer_norm": self.layer_norm,
            "meta": self.meta,
            "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
        }
        header = json.dumps(manifest, sort_keys=True).encode()
        blob = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for _, t in tensors)
        atomic_write_bytes(path, b"PCSW" + struct.pack("<I", len(header)) + header + blob)

    @classmethod
    def load(cls, path) -> "HeadWeights":
        raw = Path(path).read_bytes()
        if raw[:4] != b"PCSW":
            raise InputError(f"{path}: not a head weights file")
        (n,) = struct.unpack("<I", raw[4:8])
        manifest = json.loads(raw[8 : 8 + n])
        offset = 8 + n
        arrays = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            size = int(np.prod(shape, dtype=np.int64))
            end = offset + 4 * size
            if end > len(raw):
                raise InputError(f"{path}: truncated tensor {entry['name']}")
            arrays[entry["name"]] = (
                np.frombuffer(raw[offset:end], dtype="<f4").astype(np.float64).reshape(shape)
            )
            offset = end
        if offset != len(raw):
            raise InputError(f"{path}: trailing bytes after tensors")
        layers = [
            LayerWeights(**{nm: arrays[f"layers.{i}.{nm}"] for nm in LayerWeights.NAMES})
            for i in range(manifest["n_layers"])
        ]
        w = cls(
            proj_w=arrays["proj_w"], proj_b=arrays["proj_b"], layers=layers,
            dec1_w=arrays["dec1_w"], dec1_b=arrays["dec1_b"],
            dec2_w=arrays["dec2_w"], dec2_b=arrays["dec2_b"],
            n_heads=manifest["n_heads"], layer_norm=manifest["layer_norm"],
            meta=manifest.get("meta", {}),
        )
        w.check()
        return w


# --------------------------------------------------------------------------
# forward pass


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def softmax(scores, axis=-1):
    s = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x, gain, bias, eps: float = LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def multi_head_attention(x, kv, layer: LayerWeights, n_heads: int):
    """Queries from ``x`` (N, d); keys and values from ``kv`` (M, d).

    Returns the output-projected attention ``(N, d)`` and the weights
    ``(n_heads, N, M)``.
    """
    n, d = x.shape
    m = kv.shape[0]
    hd = d // n_heads
    q = (x @ layer.wq + layer.bq).reshape(n, n_heads, hd).transpose(1, 0, 2)
    k = (kv @ layer.wk + layer.bk).reshape(m, n_heads, hd).transpose(1, 0, 2)
    v = (kv @ layer.wv + layer.bv).reshape(m, n_heads, hd).transpose(1, 0, 2)
    attn = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(hd))
    heads = (attn @ v).transpose(1, 0, 2).reshape(n, d)
    return heads @ layer.wo + layer.bo, attn


def reference_scale(features: PatchFeatureMap) -> float:
    """Mean patch-feature norm; puts the unit reference on the same scale as the patches."""
    s = float(np.linalg.norm(features.flat(), axis=1).mean())
    return s if s > 0.0 else 1.0


def fuse_and_attend(
    features: PatchFeatureMap,
    sim,
    ref,
    w: HeadWeights,
    use_reference_token: bool = True,
    return_attention: bool = False,
):
    """Fuse patch features with the similarity map and run the attention layers.

    Returns tokens of shape ``(grid_h, grid_w, token_dim)``; with
    ``return_attention`` also the per-layer attention weights.
    """
    w.check()
    sim = np.asarray(sim, dtype=np.float64)
    if sim.shape != (features.grid_h, features.grid_w):
        raise DimensionError(f"similarity map {sim.shape} != feature grid")
    if features.dim != w.feature_dim:
        raise DimensionError(f"features have dim {features.dim}, weights expect {w.feature_dim}")
    x = np.concatenate([features.flat(), sim.reshape(-1, 1)], axis=1) @ w.proj_w + w.proj_b
    ref_tok = None
    if use_reference_token:
        ref = check_reference(ref, features.dim)
        r = np.concatenate([ref * reference_scale(features), [1.0]])
        ref_tok = (r @ w.proj_w + w.proj_b)[None, :]

    maps = []
    for layer in w.layers:
        kv = x if ref_tok is None else np.vstack([x, ref_tok])
        a, attn = multi_head_attention(x, kv, layer, w.n_heads)
        maps.append(attn)
        x = x + a
        if w.layer_norm:
            x = layer_norm(x, layer.ln1_g, layer.ln1_b)
        x = x + gelu(x @ layer.w1 + layer.b1) @ layer.w2 + layer.b2
        if w.layer_norm:
            x = layer_norm(x, layer.ln2_g, layer.ln2_b)
    tokens = x.reshape(features.grid_h, features.grid_w, -1)
    if return_attention:
        return tokens, maps
    return tokens


def transposed_conv(x, weight, bias):
    """Transposed convolution with kernel == stride: (h, w, Cin) -> (h*k, w*k, Cout)."""
    h, w_, _ = x.shape
    k = weight.shape[2]
    out = np.einsum("ijd,dcab->iajbc", x, weight)
    return out.reshape(h * k, w_ * k, weight.shape[1]) + bias


def decode(tokens, w: HeadWeights) -> tuple[np.ndarray, np.ndarray]:
    """Upsample tokens to full resolution; returns (flow (H, W, 2), logits (H, W))."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3 or tokens.shape[2] != w.dec1_w.shape[0]:
        raise DimensionError(f"tokens {tokens.shape} do not match decoder input")
    y = transposed_conv(tokens, w.dec1_w, w.dec1_b)
    y = transposed_conv(y, w.dec2_w, w.dec2_b)
    return y[..., :2], y[..., 2]


def forward(features: PatchFeatureMap, ref, w: HeadWeights):
    """Full head: similarity map, attention, decode. Returns (flow, logits, tokens)."""
    sim = cosine_similarity_map(features, ref)
    tokens = fuse_and_attend(features, sim, ref, w)
    flow, logits = decode(tokens, w)
    return flow, logits, tokens


# --------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class SCLConfig:
    temperature: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")


def loss_mse(pred, gt, fg) -> tuple[float, np.ndarray]:
    """Mean squared flow error over foreground pixels and both channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    fg = np.asarray(fg, dtype=bool)
    if pred.shape != gt.shape or pred.shape[:2] != fg.shape:
        raise DimensionError("pred, gt and foreground canvases differ")
    grad = np.zeros_like(pred)
    count = np.count_nonzero(fg) * pred.shape[2]
    if count == 0:
        return 0.0, grad
    diff = (pred - gt)[fg]
    grad[fg] = 2.0 * diff / count
    return float(np.sum(diff * diff) / count), grad


def loss_bce(logits, targets) -> tuple[float, np.ndarray]:
    """Binary cross-entropy with logits, averaged over pixels."""
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if x.shape != t.shape:
        raise DimensionError("logits and targets differ in shape")
    if x.size == 0:
        return 0.0, np.zeros_like(x)
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    grad = (sigmoid(x) - t) / x.size
    return float(per.mean()), grad


def loss_scl(cells, cfg: SCLConfig | float = SCLConfig()) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss summed over anchors, with its gradient.

    Anchors without a same-class partner contribute nothing. The gradient is
    taken with respect to the embedding vectors as given, shape ``(N, D)``.
    """
    if not isinstance(cfg, SCLConfig):
        cfg = SCLConfig(float(cfg))
    tau = cfg.temperature
    cells = list(cells)
    if len(cells) < 2:
        raise InputError("supervised contrastive loss needs at least 2 cells")
    z = np.stack([np.asarray(c.vector, dtype=np.float64) for c in cells])
    if np.any(np.abs(np.linalg.norm(z, axis=1) - 1.0) > 1e-6):
        raise InputError("cell embeddings must be unit length")
    y = np.array([c.class_label for c in cells])
    n = len(cells)

    s = z @ z.T / tau
    off = ~np.eye(n, dtype=bool)
    pos = (y[:, None] == y[None, :]) & off
    npos = pos.sum(axis=1)
    anchor = npos > 0

    masked = np.where(off, s, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    e = np.where(off, np.exp(masked - mx), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(denom[:, 0])
    mean_pos = np.where(anchor, (s * pos).sum(axis=1) / np.maximum(npos, 1), 0.0)
    loss = float(np.sum((lse - mean_pos)[anchor]))

    coef = e / denom - pos / np.maximum(npos, 1)[:, None]
    coef[~anchor] = 0.0
    grad = (coef + coef.T) @ z / tau
    return loss, grad


def pool_cell_embeddings(tokens, mask, types=None, patch_size: int | None = None) -> list[CellEmbedding]:
    """Coverage-weighted mean token per instance, normalized to unit length.

    ``types`` maps instance label to class label (defaults to 0). Every
    non-empty instance touches at least one patch, so pooling never comes up
    empty.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    mask = validate_label_mask(mask)
    gh, gw = tokens.shape[:2]
    if patch_size is None:
        if mask.shape[0] % gh or mask.shape[0] // gh != mask.shape[1] // gw:
            raise DimensionError("cannot infer patch size from mask and token grid")
        patch_size = mask.shape[0] // gh
    out = []
    for k in range(1, int(mask.max()) + 1):
        cov = patch_coverage(mask == k, gh, gw, patch_size)
        v = _weighted_patch_mean(tokens, cov)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            raise NumericError(f"instance {k} pools to the zero vector")
        label = 0 if types is None else int(types[k])
        out.append(CellEmbedding(v / nv, label))
    return out


def total_loss(mse: float, bce: float, scl: float) -> float:
    vals = (mse, bce, scl)
    if not all(np.isfinite(v) for v in vals):
        raise NumericError("loss terms must be finite")
    return float(mse + bce + scl)
