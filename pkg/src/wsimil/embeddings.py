"""Embedding bags: a deterministic pseudo-encoder, compact bag files, and
region grouping for the transformer head.

The pseudo-encoder replaces frozen self-supervised encoders with a pure
function of the pixels: a 48-bin HSV histogram plus 8 gradient-magnitude
statistics, pushed through a fixed seed-derived projection and L2
normalized. It is deliberately simple; anything that embeds patches can be
swapped in by writing bag files in the documented format.

Bag file format (little endian): header = magic "WMBK", version u16,
D u32, N u64, tile_size u32, level_downsample u32, encoder_id (u16 length
+ UTF-8); body = N records of (col u32, row u32, D x f32).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import BagFormatError
from .slides import SlideSource, read_level_tile
from .tiling import TileGrid, rgb_to_hsv

BAG_MAGIC = b"WMBK"
BAG_VERSION = 1

_HIST_BINS = 16  # per HSV channel
_N_TEXTURE = 8
_RAW_DIM = 3 * _HIST_BINS + _N_TEXTURE


def _texture_stats(gray: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy).reshape(-1)
    percentiles = np.percentile(mag, [10, 25, 50, 75, 90, 99])
    return np.concatenate([[mag.mean(), mag.std()], percentiles])


@lru_cache(maxsize=8)
def _projection(seed: int, dim: int) -> np.ndarray:
    """Fixed near-orthonormal (RAW_DIM x dim) projection for a seed."""
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((_RAW_DIM, max(dim, 1)))
    if dim <= _RAW_DIM:
        q, _ = np.linalg.qr(gauss)
        return np.ascontiguousarray(q[:, :dim])
    return gauss / np.sqrt(_RAW_DIM)


def pseudo_encode(patch: np.ndarray, seed: int = 0, dim: int = 64) -> np.ndarray:
    """Deterministic D-dim feature vector for an RGB patch, L2-normalized.

    Histogram features are invariant under 90-degree rotations and the
    gradient-magnitude statistics nearly so.
    """
    if dim < 8:
        raise ValueError("embedding dim must be >= 8")
    rgb = np.asarray(patch, dtype=np.float64)
    if rgb.max() > 1.0:
        rgb = rgb / 255.0
    hue, sat, val = rgb_to_hsv(rgb)
    features = np.empty(_RAW_DIM, dtype=np.float64)
    n = hue.size
    for i, channel in enumerate((hue, sat, val)):
        hist, _ = np.histogram(channel, bins=_HIST_BINS, range=(0.0, 1.0))
        features[i * _HIST_BINS : (i + 1) * _HIST_BINS] = hist / n
    features[3 * _HIST_BINS :] = _texture_stats(rgb.mean(axis=-1))
    vec = features @ _projection(int(seed), int(dim))
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        vec = np.zeros(dim)
        vec[0] = 1.0
        return vec.astype(np.float32)
    return (vec / norm).astype(np.float32)


class PseudoPatchEncoder(BaseEstimator, TransformerMixin):
    """sklearn-style wrapper: transform a list of RGB patches to (N, D)."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        return np.stack([pseudo_encode(p, self.seed, self.dim) for p in X])

    @property
    def encoder_id(self) -> str:
        return f"pseudo-hsv48g8-d{self.dim}-s{self.seed}"


@dataclass(frozen=True)
class EmbeddingBag:
    """All instance embeddings of one slide plus their grid coordinates."""

    slide_id: str
    encoder_id: str
    instances: np.ndarray  # (N, D) float32
    coords: np.ndarray  # (N, 2) int (col, row)
    tile_size: int
    level_downsample: int = 1

    def __post_init__(self):
        inst = np.asarray(self.instances, dtype=np.float32)
        coords = np.asarray(self.coords, dtype=np.int64)
        object.__setattr__(self, "instances", inst)
        object.__setattr__(self, "coords", coords)
        if inst.ndim != 2 or inst.shape[0] < 1:
            raise ValueError("instances must be a non-empty (N, D) matrix")
        if coords.shape != (inst.shape[0], 2):
            raise ValueError("coords must align with instance rows")
        if not np.all(np.isfinite(inst)):
            raise ValueError(f"bag {self.slide_id}: non-finite embeddings")
        seen = {tuple(c) for c in coords.tolist()}
        if len(seen) != len(coords):
            raise ValueError(f"bag {self.slide_id}: duplicate tile coords")

    @property
    def n_instances(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]


def write_bag(bag: EmbeddingBag, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    encoder = bag.encoder_id.encode("utf-8")
    n, d = bag.instances.shape
    record = np.dtype(
        [("col", "<u4"), ("row", "<u4"), ("vec", "<f4", (d,))]
    )
    body = np.empty(n, dtype=record)
    body["col"] = bag.coords[:, 0]
    body["row"] = bag.coords[:, 1]
    body["vec"] = bag.instances
    with path.open("wb") as fh:
        fh.write(BAG_MAGIC)
        fh.write(
            struct.pack(
                "<HIQII", BAG_VERSION, d, n, bag.tile_size, bag.level_downsample
            )
        )
        fh.write(struct.pack("<H", len(encoder)))
        fh.write(encoder)
        fh.write(body.tobytes())


def read_bag(path: str | Path) -> EmbeddingBag:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != BAG_MAGIC:
        raise BagFormatError(f"{path}: not an embedding bag")
    header_size = 4 + struct.calcsize("<HIQII")
    try:
        version, d, n, tile_size, downsample = struct.unpack_from("<HIQII", raw, 4)
        if version != BAG_VERSION:
            raise BagFormatError(f"{path}: unsupported bag version {version}")
        (enc_len,) = struct.unpack_from("<H", raw, header_size)
        enc_end = header_size + 2 + enc_len
        encoder_id = raw[header_size + 2 : enc_end].decode("utf-8")
    except (struct.error, UnicodeDecodeError) as exc:
        raise BagFormatError(f"{path}: unexpected end of file ({exc})") from None
    record = np.dtype([("col", "<u4"), ("row", "<u4"), ("vec", "<f4", (d,))])
    expected = enc_end + n * record.itemsize
    if len(raw) < expected:
        raise BagFormatError(f"{path}: unexpected end of file")
    body = np.frombuffer(raw, dtype=record, count=n, offset=enc_end)
    coords = np.stack([body["col"], body["row"]], axis=1).astype(np.int64)
    return EmbeddingBag(
        slide_id=path.stem,
        encoder_id=encoder_id,
        instances=body["vec"].copy(),
        coords=coords,
        tile_size=tile_size,
        level_downsample=downsample,
    )


@dataclass(frozen=True)
class RegionBag:
    """Mean-pooled groups of patch embeddings on a coarser grid."""

    slide_id: str
    embeddings: np.ndarray  # (M, D) float32
    region_coords: np.ndarray  # (M, 2) region-grid (col, row)
    region_size: int  # in extraction-level pixels, multiple of tile_size
    tile_size: int
    level_downsample: int = 1
    member_counts: np.ndarray | None = None  # (M,) patches per region

    @property
    def n_regions(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def group_regions(bag: EmbeddingBag, region_size: int) -> RegionBag:
    """Mean-pool patches into region_size x region_size blocks of the grid.

    Empty regions are omitted; the total member count equals the bag size.
    """
    if region_size % bag.tile_size != 0:
        raise ValueError(
            f"region_size {region_size} is not a multiple of tile_size "
            f"{bag.tile_size}"
        )
    factor = region_size // bag.tile_size
    region_keys = bag.coords // factor
    order = {}
    for i, key in enumerate(map(tuple, region_keys.tolist())):
        order.setdefault(key, []).append(i)
    if not order:
        raise ValueError(f"bag {bag.slide_id}: no non-empty regions")
    keys = sorted(order, key=lambda cr: (cr[1], cr[0]))  # row-major
    embeddings = np.stack(
        [
            bag.instances[order[k]].mean(axis=0, dtype=np.float64)
            for k in keys
        ]
    ).astype(np.float32)
    counts = np.array([len(order[k]) for k in keys], dtype=np.int64)
    return RegionBag(
        slide_id=bag.slide_id,
        embeddings=embeddings,
        region_coords=np.array(keys, dtype=np.int64),
        region_size=region_size,
        tile_size=bag.tile_size,
        level_downsample=bag.level_downsample,
        member_counts=counts,
    )


def region_grid(bag: RegionBag, slide_dims: tuple[int, int] | None = None) -> TileGrid:
    """TileGrid over region cells, for rasterizing region attention."""
    if slide_dims is None:
        max_col = int(bag.region_coords[:, 0].max()) + 1
        max_row = int(bag.region_coords[:, 1].max()) + 1
        slide_dims = (max_col * bag.region_size, max_row * bag.region_size)
    return TileGrid(
        slide_dims,
        bag.region_size,
        bag.level_downsample,
        tuple(map(tuple, bag.region_coords.tolist())),
    )


def patch_grid(bag: EmbeddingBag, slide_dims: tuple[int, int] | None = None) -> TileGrid:
    """TileGrid matching the bag's patch coordinates."""
    if slide_dims is None:
        max_col = int(bag.coords[:, 0].max()) + 1
        max_row = int(bag.coords[:, 1].max()) + 1
        slide_dims = (max_col * bag.tile_size, max_row * bag.tile_size)
    return TileGrid(
        slide_dims,
        bag.tile_size,
        bag.level_downsample,
        tuple(map(tuple, bag.coords.tolist())),
    )


def extract_bag(slide: SlideSource, slide_id: str, grid: TileGrid,
                kept: list[bool], encoder: PseudoPatchEncoder) -> EmbeddingBag:
    """Encode the kept tiles of a planned grid, one tile in memory at a time."""
    rows = []
    coords = []
    for (col, row), keep in zip(grid.tiles, kept):
        if not keep:
            continue
        patch = read_level_tile(slide, col, row, grid.tile_size,
                                grid.level_downsample)
        rows.append(pseudo_encode(patch, encoder.seed, encoder.dim))
        coords.append((col, row))
    if not rows:
        raise ValueError(f"slide {slide_id}: no kept tiles to embed")
    return EmbeddingBag(
        slide_id=slide_id,
        encoder_id=encoder.encoder_id,
        instances=np.stack(rows),
        coords=np.array(coords, dtype=np.int64),
        tile_size=grid.tile_size,
        level_downsample=grid.level_downsample,
    )
