"""Sliding-window tile planning and overlap-averaged stitching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, DimensionError


@dataclass(frozen=True)
class TileGrid:
    window: int
    stride: int
    anchors: tuple[tuple[int, int], ...]
    canvas: tuple[int, int]

    def slices(self):
        for r, c in self.anchors:
            yield np.s_[r : r + self.window, c : c + self.window]

    def coverage(self) -> np.ndarray:
        count = np.zeros(self.canvas, dtype=np.int64)
        for sl in self.slices():
            count[sl] += 1
        return count

    def __len__(self) -> int:
        return len(self.anchors)


def _axis_anchors(size: int, window: int, stride: int) -> list[int]:
    last = size - window
    anchors = list(range(0, last + 1, stride))
    if anchors[-1] != last:
        anchors.append(last)
    return anchors


def plan_tiles(height: int, width: int, window: int = 336, stride: int = 168) -> TileGrid:
    """Top-left anchors at multiples of ``stride``, plus one clamped anchor per axis
    when the regular ones stop short of the edge.

    Canvases smaller than the window are rejected; pad them first.
    """
    if window < 1:
        raise ConfigError("window must be >= 1")
    if not 0 < stride <= window:
        raise ConfigError(f"stride must satisfy 0 < stride <= window, got {stride}")
    if window > height or window > width:
        raise DimensionError(
            f"window {window} exceeds canvas {height}x{width}; pad the image first"
        )
    rows = _axis_anchors(height, window, stride)
    cols = _axis_anchors(width, window, stride)
    anchors = tuple(sorted({(r, c) for r in rows for c in cols}))
    return TileGrid(window, stride, anchors, (height, width))


def extract_tiles(grid: TileGrid, array: np.ndarray) -> list[np.ndarray]:
    if array.shape[:2] != grid.canvas:
        raise DimensionError(f"array canvas {array.shape[:2]} != grid canvas {grid.canvas}")
    return [array[sl] for sl in grid.slices()]


def stitch(grid: TileGrid, tile_outputs) -> np.ndarray:
    """Average per-tile ``(window, window, C)`` outputs onto the full canvas.

    Each pixel gets the mean of every tile value covering it, accumulated as
    a running mean so that agreeing tiles reproduce their common value
    exactly. 2D tiles are accepted and give a 2D result.
    """
    tiles = list(tile_outputs)
    if len(tiles) != len(grid.anchors):
        raise DimensionError(f"expected {len(grid.anchors)} tile outputs, got {len(tiles)}")
    if not tiles:
        raise DimensionError("no tiles to stitch")
    first = np.asarray(tiles[0])
    trailing = first.shape[2:]
    mean = np.zeros(grid.canvas + trailing, dtype=np.float64)
    count = np.zeros(grid.canvas, dtype=np.int64)
    expand = (...,) + (None,) * len(trailing)
    for sl, tile in zip(grid.slices(), tiles):
        tile = np.asarray(tile, dtype=np.float64)
        if tile.shape != (grid.window, grid.window) + trailing:
            raise DimensionError(
                f"tile shape {tile.shape} != {(grid.window, grid.window) + trailing}"
            )
        count[sl] += 1
        mean[sl] += (tile - mean[sl]) / count[sl][expand]
    return mean
