"""Slide sources: whole-image rasters, directories of pre-cut tiles, and a
protocol that procedural (virtual) slides implement too.

``read_region`` works in base-magnification pixel coordinates. The tile
directory layout keeps memory bounded for arbitrarily large slides: a
``slide.json`` with dimensions plus one image file per level-0 tile named
``{col}_{row}.{ext}``. Single-file images (PNG/JPEG/TIFF; page 0 of a
pyramidal TIFF) are decoded whole, which is fine at desk scale.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image

from .errors import DataError

_WHITE = 255


@runtime_checkable
class SlideSource(Protocol):
    @property
    def dims(self) -> tuple[int, int]:
        """(width, height) in base-magnification pixels."""

    def read_region(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        """RGB uint8 array of shape (h, w, 3) at base magnification."""

    def thumbnail(self, max_dim: int = 1024) -> np.ndarray:
        """RGB uint8 thumbnail whose longer side is at most max_dim."""


def _clip_read(full: np.ndarray, x: int, y: int, w: int, h: int) -> np.ndarray:
    height, width = full.shape[:2]
    out = np.full((h, w, 3), _WHITE, dtype=np.uint8)
    x0, y0 = max(0, x), max(0, y)
    x1, y1 = min(width, x + w), min(height, y + h)
    if x1 > x0 and y1 > y0:
        out[y0 - y : y1 - y, x0 - x : x1 - x] = full[y0:y1, x0:x1]
    return out


class ImageSlide:
    """A slide backed by a single raster held in memory."""

    def __init__(self, image: np.ndarray | str | Path):
        if isinstance(image, (str, Path)):
            with Image.open(image) as img:
                arr = np.asarray(img.convert("RGB"))
        else:
            arr = np.asarray(image)
            if arr.ndim != 3 or arr.shape[2] != 3:
                raise ValueError("expected an (h, w, 3) RGB array")
        self._data = arr.astype(np.uint8, copy=False)

    @property
    def dims(self) -> tuple[int, int]:
        h, w = self._data.shape[:2]
        return (w, h)

    def read_region(self, x, y, w, h):
        return _clip_read(self._data, x, y, w, h)

    def thumbnail(self, max_dim: int = 1024) -> np.ndarray:
        w, h = self.dims
        scale = max(w, h) / max_dim
        if scale <= 1:
            return self._data.copy()
        tw, th = max(1, round(w / scale)), max(1, round(h / scale))
        img = Image.fromarray(self._data).resize((tw, th), Image.BILINEAR)
        return np.asarray(img)


class TileDirectorySlide:
    """A slide stored as pre-cut level-0 tiles; reads stay tile-bounded."""

    META_NAME = "slide.json"

    def __init__(self, root: str | Path):
        self.root = Path(root)
        meta_path = self.root / self.META_NAME
        if not meta_path.exists():
            raise DataError(f"{self.root}: missing {self.META_NAME}")
        meta = json.loads(meta_path.read_text())
        try:
            self.width = int(meta["width"])
            self.height = int(meta["height"])
            self.tile_size = int(meta["tile_size"])
            self.ext = meta.get("ext", "png")
        except (KeyError, ValueError) as exc:
            raise DataError(f"{meta_path}: malformed slide metadata: {exc}") from None

    @property
    def dims(self) -> tuple[int, int]:
        return (self.width, self.height)

    def _tile_path(self, col: int, row: int) -> Path:
        return self.root / f"{col}_{row}.{self.ext}"

    def read_region(self, x, y, w, h):
        out = np.full((h, w, 3), _WHITE, dtype=np.uint8)
        ts = self.tile_size
        for row in range(max(0, y // ts), (y + h - 1) // ts + 1):
            for col in range(max(0, x // ts), (x + w - 1) // ts + 1):
                path = self._tile_path(col, row)
                if not path.exists():
                    continue
                with Image.open(path) as img:
                    tile = np.asarray(img.convert("RGB"))
                tx, ty = col * ts, row * ts
                sx0, sy0 = max(x, tx), max(y, ty)
                sx1 = min(x + w, tx + tile.shape[1])
                sy1 = min(y + h, ty + tile.shape[0])
                if sx1 > sx0 and sy1 > sy0:
                    out[sy0 - y : sy1 - y, sx0 - x : sx1 - x] = tile[
                        sy0 - ty : sy1 - ty, sx0 - tx : sx1 - tx
                    ]
        return out

    def thumbnail(self, max_dim: int = 1024) -> np.ndarray:
        scale = max(self.width, self.height) / max_dim
        scale = max(scale, 1.0)
        tw = max(1, round(self.width / scale))
        th = max(1, round(self.height / scale))
        canvas = Image.new("RGB", (tw, th), (_WHITE,) * 3)
        ts = self.tile_size
        for path in sorted(self.root.glob(f"*_*.{self.ext}")):
            col, row = (int(p) for p in path.stem.split("_"))
            with Image.open(path) as img:
                w0, h0 = img.size
                dest_x = round(col * ts / scale)
                dest_y = round(row * ts / scale)
                dw = max(1, round(w0 / scale))
                dh = max(1, round(h0 / scale))
                canvas.paste(img.convert("RGB").resize((dw, dh), Image.BILINEAR),
                             (dest_x, dest_y))
        return np.asarray(canvas)


def write_tile_directory(root: str | Path, slide: SlideSource,
                         tile_size: int = 512) -> None:
    """Cut a slide into a level-0 tile directory (streaming, one tile in
    memory at a time)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    w, h = slide.dims
    meta = {"width": w, "height": h, "tile_size": tile_size, "ext": "png"}
    (root / TileDirectorySlide.META_NAME).write_text(
        json.dumps(meta, sort_keys=True)
    )
    for row in range((h + tile_size - 1) // tile_size):
        for col in range((w + tile_size - 1) // tile_size):
            x, y = col * tile_size, row * tile_size
            tw = min(tile_size, w - x)
            th = min(tile_size, h - y)
            tile = slide.read_region(x, y, tw, th)
            Image.fromarray(tile).save(root / f"{col}_{row}.png")


def open_slide(path: str | Path) -> SlideSource:
    path = Path(path)
    if path.is_dir():
        return TileDirectorySlide(path)
    if not path.exists():
        raise DataError(f"slide not found: {path}")
    return ImageSlide(path)


def block_downsample(region: np.ndarray, factor: int) -> np.ndarray:
    """Mean-pool an RGB uint8 region by an integer factor."""
    if factor == 1:
        return region
    h, w = region.shape[:2]
    h2, w2 = (h // factor) * factor, (w // factor) * factor
    trimmed = region[:h2, :w2].astype(np.float64)
    pooled = trimmed.reshape(h2 // factor, factor, w2 // factor, factor, 3).mean(
        axis=(1, 3)
    )
    return np.clip(np.rint(pooled), 0, 255).astype(np.uint8)


def read_level_tile(slide: SlideSource, col: int, row: int, tile_size: int,
                    downsample: int = 1) -> np.ndarray:
    """One (tile_size x tile_size) tile at the given power-of-two downsample,
    assembled from a single base-resolution read."""
    base = tile_size * downsample
    region = slide.read_region(col * base, row * base, base, base)
    return block_downsample(region, downsample)
