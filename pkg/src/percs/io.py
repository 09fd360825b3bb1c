"""File formats: PCSF flow files, PNG images and masks, atomic writes."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from io import BytesIO
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import InputError, as_image, check_flow_field, validate_label_mask

FLOW_MAGIC = b"PCSF"


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, text.encode())


def encode_flow(flow) -> bytes:
    flow = check_flow_field(flow)
    h, w = flow.shape[:2]
    return FLOW_MAGIC + struct.pack("<II", h, w) + np.ascontiguousarray(flow, dtype="<f4").tobytes()


def decode_flow(data: bytes) -> np.ndarray:
    if data[:4] != FLOW_MAGIC:
        raise InputError("not a PCSF flow file")
    h, w = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != h * w * 8:
        raise InputError(f"PCSF payload has {len(body)} bytes, expected {h * w * 8}")
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(h, w, 2)


def write_flow(path, flow) -> None:
    atomic_write_bytes(path, encode_flow(flow))


def read_flow(path) -> np.ndarray:
    return decode_flow(Path(path).read_bytes())


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = BytesIO()
    PILImage.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def write_image(path, image) -> None:
    """Save a [0, 1] image as 8-bit PNG; 2-channel images get an empty third channel."""
    img = as_image(image)
    c = img.shape[2]
    if c == 2:
        img = np.concatenate([img, np.zeros(img.shape[:2] + (1,))], axis=2)
    arr = np.round(img * 255.0).astype(np.uint8)
    if c == 1:
        arr = arr[:, :, 0]
    atomic_write_bytes(path, _png_bytes(arr))


def read_image(path) -> np.ndarray:
    """Load a PNG as a float64 ``(H, W, C)`` image in [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.array(im)
    if arr.dtype == np.uint16 or (arr.dtype.kind in "iu" and arr.max(initial=0) > 255):
        img = arr.astype(np.float64) / 65535.0
    else:
        img = arr.astype(np.float64) / 255.0
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[:, :, :3]
    return as_image(img)


def write_rgb(path, rgb: np.ndarray) -> None:
    atomic_write_bytes(path, _png_bytes(np.asarray(rgb, dtype=np.uint8)))


def write_mask(path, mask) -> None:
    """Save a label mask as a 16-bit single-channel PNG with raw label values."""
    mask = validate_label_mask(mask)
    if mask.max(initial=0) > 65535:
        raise InputError("more than 65535 instances cannot be stored in a 16-bit PNG")
    atomic_write_bytes(path, _png_bytes(mask.astype(np.uint16)))


def read_mask(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise InputError(f"{path}: mask PNG must be single-channel")
    return validate_label_mask(arr.astype(np.int64))
