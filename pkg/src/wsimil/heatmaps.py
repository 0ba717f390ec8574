"""Slide-aligned attention rasters, thresholding, Dice, and annotation
polygons.

An AttentionMap is a (rows x cols) float raster over a TileGrid with NaN
marking non-tissue cells. PNG export paints finite cells through a
documented five-stop colormap (dark blue -> purple -> magenta -> orange ->
yellow, interpolated linearly) with transparent background, so overlays
drop onto any viewer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .heads import MilOutput
from .tiling import TileGrid

# value -> RGB control points, interpolated linearly ("plasma-like")
COLOR_STOPS = (
    (0.00, (13, 8, 135)),
    (0.25, (126, 3, 168)),
    (0.50, (204, 71, 120)),
    (0.75, (248, 149, 64)),
    (1.00, (240, 249, 33)),
)


@dataclass(frozen=True)
class AttentionMap:
    slide_id: str
    downsample: int
    values: np.ndarray  # (rows, cols) float, NaN outside tissue
    tile_size: int

    @property
    def tissue_cells(self) -> int:
        return int(np.isfinite(self.values).sum())


def rasterize_attention(output: MilOutput, grid: TileGrid,
                        slide_id: str = "") -> AttentionMap:
    """Place normalized per-instance attention at each tile's grid cell.

    Placement is keyed by (col, row), so any instance ordering that matches
    the grid's tile list produces the same raster.
    """
    attention = np.asarray(output.instance_attention, dtype=np.float64)
    if len(attention) != len(grid.tiles):
        raise ValueError(
            f"attention length {len(attention)} != grid tiles {len(grid.tiles)}"
        )
    values = np.full((grid.n_rows, grid.n_cols), np.nan)
    for (col, row), value in zip(grid.tiles, attention):
        values[row, col] = value
    return AttentionMap(slide_id, grid.level_downsample, values, grid.tile_size)


def threshold_map(amap: AttentionMap, t: float = 0.5) -> np.ndarray:
    """Binary mask of tissue cells with attention >= t."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    with np.errstate(invalid="ignore"):
        return np.where(np.isfinite(amap.values), amap.values >= t, False)


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1.0."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / denom


def _colormap(values: np.ndarray) -> np.ndarray:
    """RGB for values in [0, 1] via the COLOR_STOPS gradient."""
    v = np.clip(values, 0.0, 1.0)
    out = np.zeros((*v.shape, 3), dtype=np.float64)
    for (p0, c0), (p1, c1) in zip(COLOR_STOPS[:-1], COLOR_STOPS[1:]):
        span = np.clip((v - p0) / (p1 - p0), 0.0, 1.0)
        segment = (v >= p0) if p0 == 0.0 else (v > p0)
        for ch in range(3):
            mixed = c0[ch] + span * (c1[ch] - c0[ch])
            out[..., ch] = np.where(segment & (v <= p1), mixed, out[..., ch])
    out[v == 0.0] = COLOR_STOPS[0][1]
    return np.rint(out).astype(np.uint8)


def save_attention_png(amap: AttentionMap, path: str | Path,
                       cell_pixels: int = 16) -> None:
    """RGBA overlay PNG: colormapped tissue cells, transparent elsewhere."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    finite = np.isfinite(amap.values)
    rgb = _colormap(np.nan_to_num(amap.values, nan=0.0))
    alpha = np.where(finite, 200, 0).astype(np.uint8)
    rgba = np.dstack([rgb, alpha])
    img = Image.fromarray(rgba, mode="RGBA")
    rows, cols = amap.values.shape
    img = img.resize((cols * cell_pixels, rows * cell_pixels), Image.NEAREST)
    img.save(path)


def save_attention_csv(amap: AttentionMap, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["slide_id,col,row,attention"]
    rows, cols = amap.values.shape
    for r in range(rows):
        for c in range(cols):
            v = amap.values[r, c]
            if np.isfinite(v):
                lines.append(f"{amap.slide_id},{c},{r},{float(v)!r}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# annotation polygons


def _points_in_rings(xs: np.ndarray, ys: np.ndarray, rings) -> np.ndarray:
    """Even-odd (ray casting) membership across all rings; XOR handles
    holes."""
    inside = np.zeros(xs.shape, dtype=bool)
    for ring in rings:
        pts = np.asarray(ring, dtype=np.float64)
        if len(pts) < 3:
            continue
        hit = np.zeros(xs.shape, dtype=bool)
        x0, y0 = pts[-1]
        for x1, y1 in pts:
            crosses = ((y0 > ys) != (y1 > ys)) & (
                xs < (x1 - x0) * (ys - y0) / (y1 - y0 + 1e-300) + x0
            )
            hit ^= crosses
            x0, y0 = x1, y1
        inside ^= hit
    return inside


def rasterize_annotation(rings, grid: TileGrid, coverage: float = 0.5,
                         subsamples: int = 8) -> np.ndarray:
    """Polygon rings (base-pixel coords) -> boolean mask on the patch grid.

    A grid cell is annotated iff at least ``coverage`` of its subsampled
    points fall inside the polygons (even-odd rule).
    """
    span = grid.base_tile_span
    offsets = (np.arange(subsamples) + 0.5) / subsamples * span
    mask = np.zeros((grid.n_rows, grid.n_cols), dtype=bool)
    for col, row in grid.tiles:
        x0, y0 = grid.base_origin(col, row)
        xs, ys = np.meshgrid(x0 + offsets, y0 + offsets)
        inside = _points_in_rings(xs, ys, rings)
        if inside.mean() >= coverage:
            mask[row, col] = True
    return mask


def load_annotations(path: str | Path) -> dict[str, list]:
    """annotations.json: {slide_id: [ring, ...]} with rings as [[x, y], ...]."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected an object mapping slide_id to rings")
    return data
