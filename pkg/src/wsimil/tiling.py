"""Tissue detection on thumbnails and non-overlapping tile planning.

Tissue is segmented by Otsu-thresholding the HSV saturation channel
(falling back to a fixed low threshold when the histogram is degenerate)
followed by morphological closing. Tile planning is exact integer
geometry: a tile enters the grid iff its footprint overlaps at least one
tissue-mask pixel, and partial edge tiles are dropped.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized RGB(uint8 or [0,1] float) -> (H, S, V), each in [0, 1]."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.max() > 1.0:
        arr = arr / 255.0
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    maxc = arr.max(axis=-1)
    minc = arr.min(axis=-1)
    delta = maxc - minc
    sat = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    hue = np.zeros_like(maxc)
    mask = delta > 0
    rc = np.where(mask, (maxc - r) / np.where(mask, delta, 1.0), 0.0)
    gc = np.where(mask, (maxc - g) / np.where(mask, delta, 1.0), 0.0)
    bc = np.where(mask, (maxc - b) / np.where(mask, delta, 1.0), 0.0)
    hue = np.where(maxc == r, bc - gc, hue)
    hue = np.where(maxc == g, 2.0 + rc - bc, hue)
    hue = np.where((maxc == b) & (maxc != r) & (maxc != g), 4.0 + gc - rc, hue)
    hue = np.where(maxc == r, bc - gc, hue)  # red wins ties, as in colorsys
    hue = (hue / 6.0) % 1.0
    hue = np.where(mask, hue, 0.0)
    return hue, sat, maxc


def otsu_threshold(values: np.ndarray, bins: int = 256,
                   fallback: float = 0.05) -> float:
    """Otsu's threshold over a histogram of values in [0, 1].

    A degenerate (single-bin) histogram has no between-class variance to
    maximize, so the fixed ``fallback`` saturation threshold is returned.
    """
    v = np.clip(np.asarray(values, dtype=np.float64).reshape(-1), 0.0, 1.0)
    hist, edges = np.histogram(v, bins=bins, range=(0.0, 1.0))
    centers = (edges[:-1] + edges[1:]) / 2.0
    if np.count_nonzero(hist) <= 1:
        return fallback
    hist = hist.astype(np.float64)
    weight1 = np.cumsum(hist)
    weight2 = np.cumsum(hist[::-1])[::-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean1 = np.cumsum(hist * centers) / weight1
        mean2 = (np.cumsum((hist * centers)[::-1]) / weight2[::-1])[::-1]
        variance12 = weight1[:-1] * weight2[1:] * (mean1[:-1] - mean2[1:]) ** 2
    variance12 = np.nan_to_num(variance12, nan=-1.0)  # empty leading/trailing bins
    # the variance is flat across empty gaps between modes; splitting at the
    # plateau midpoint keeps both modes strictly on their own sides
    peak = variance12.max()
    plateau = np.flatnonzero(variance12 >= peak * (1.0 - 1e-12))
    idx = int(plateau[len(plateau) // 2])
    return float(centers[:-1][idx])


@dataclass(frozen=True)
class TissueParams:
    closing_radius: int = 2
    fallback_threshold: float = 0.05


def _disk(radius: int) -> np.ndarray:
    y, x = np.ogrid[-radius : radius + 1, -radius : radius + 1]
    return x * x + y * y <= radius * radius


def detect_tissue(thumbnail: np.ndarray,
                  params: TissueParams = TissueParams()) -> np.ndarray:
    """Binary tissue mask from an RGB thumbnail.

    Saturation above an automatically chosen (Otsu) threshold, then
    morphological closing. An all-background image yields an empty mask.
    """
    thumb = np.asarray(thumbnail)
    if thumb.size == 0:
        raise ValueError("empty thumbnail")
    _, sat, _ = rgb_to_hsv(thumb)
    threshold = otsu_threshold(sat, fallback=params.fallback_threshold)
    mask = sat > threshold
    if params.closing_radius > 0 and mask.any():
        r = params.closing_radius
        # edge-replicated padding keeps closing from eroding image borders
        padded = np.pad(mask, r, mode="edge")
        closed = ndimage.binary_closing(padded, structure=_disk(r))
        mask = closed[r:-r, r:-r]
    return mask


@dataclass(frozen=True)
class TileGrid:
    """Non-overlapping square tiles over a slide at one pyramid level.

    ``slide_dims`` are the (width, height) at the extraction level, i.e.
    base dims divided by ``level_downsample``. Tiles are stride
    ``tile_size`` grid cells identified by (col, row), listed in row-major
    order.
    """

    slide_dims: tuple[int, int]
    tile_size: int
    level_downsample: int = 1
    tiles: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    @property
    def n_cols(self) -> int:
        return self.slide_dims[0] // self.tile_size

    @property
    def n_rows(self) -> int:
        return self.slide_dims[1] // self.tile_size

    def base_origin(self, col: int, row: int) -> tuple[int, int]:
        """Top-left corner of a tile in base-magnification pixels."""
        span = self.tile_size * self.level_downsample
        return (col * span, row * span)

    @property
    def base_tile_span(self) -> int:
        return self.tile_size * self.level_downsample


def plan_tiles(dims: tuple[int, int], tile_size: int,
               tissue_mask: np.ndarray | None = None,
               level_downsample: int = 1) -> TileGrid:
    """Plan the grid of fully-inside tiles intersecting the tissue mask.

    ``dims`` is (width, height) at the extraction level. ``tissue_mask``
    (any resolution, e.g. thumbnail scale) is mapped onto tiles with exact
    integer arithmetic; any overlap keeps a tile. Without a mask every
    in-bounds tile is kept.
    """
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    width, height = dims
    n_cols, n_rows = width // tile_size, height // tile_size
    if n_cols == 0 or n_rows == 0:
        warnings.warn(
            f"tile_size {tile_size} exceeds slide dims {dims}; empty grid",
            stacklevel=2,
        )
        return TileGrid(dims, tile_size, level_downsample, ())

    if tissue_mask is None:
        tiles = tuple(
            (col, row) for row in range(n_rows) for col in range(n_cols)
        )
        return TileGrid(dims, tile_size, level_downsample, tiles)

    mask = np.asarray(tissue_mask, dtype=bool)
    mh, mw = mask.shape
    # zero-padded integral image for O(1) any-overlap queries
    integral = np.zeros((mh + 1, mw + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0), axis=1)

    def mask_range(lo: int, hi: int, m: int, extent: int) -> tuple[int, int]:
        a = (lo * m) // extent
        b = (hi * m + extent - 1) // extent
        return max(0, a), min(m, b)

    tiles = []
    for row in range(n_rows):
        y0, y1 = row * tile_size, (row + 1) * tile_size
        ra, rb = mask_range(y0, y1, mh, height)
        if rb <= ra:
            continue
        for col in range(n_cols):
            x0, x1 = col * tile_size, (col + 1) * tile_size
            ca, cb = mask_range(x0, x1, mw, width)
            if cb <= ca:
                continue
            covered = (
                integral[rb, cb]
                - integral[ra, cb]
                - integral[rb, ca]
                + integral[ra, ca]
            )
            if covered > 0:
                tiles.append((col, row))
    return TileGrid(dims, tile_size, level_downsample, tuple(tiles))


def grid_for_coords(coords, tile_size: int, slide_dims: tuple[int, int],
                    level_downsample: int = 1) -> TileGrid:
    """A TileGrid positioned at explicit (col, row) coordinates, used to
    rasterize per-instance values back onto slide geometry."""
    tiles = tuple((int(c), int(r)) for c, r in coords)
    return TileGrid(slide_dims, tile_size, level_downsample, tiles)
