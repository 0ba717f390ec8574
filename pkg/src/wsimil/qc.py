"""Per-pixel quality control, patch retention rules and slide exclusion.

A deterministic heuristic stands in for a trained QC network behind the
same 3-class interface (background / accepted tissue / artefact), so the
downstream rules and evaluation protocol are unchanged:

* background: low saturation at high brightness
* artefact: dark saturated folds or overstaining, near-black debris and
  pen strokes, hue inside configured green/blue pen bands, or blur
  (local Laplacian variance below a threshold on non-background pixels)
* accepted: everything else

A patch is kept iff strictly more than half of it is accepted tissue; a
slide is excluded iff strictly more than half of its tissue (background
excluded from the denominator) is rejected.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .slides import SlideSource, read_level_tile
from .tiling import TileGrid, TissueParams, detect_tissue, plan_tiles, rgb_to_hsv

BACKGROUND, ACCEPTED, ARTEFACT = 0, 1, 2


@dataclass(frozen=True)
class QcParams:
    background_saturation: float = 0.10  # below this and bright -> background
    background_value: float = 0.80
    dark_value: float = 0.35  # folds / overstain: dark and saturated
    fold_saturation: float = 0.25
    black_value: float = 0.14  # near-black pen / debris regardless of hue
    pen_green_band: tuple[float, float] = (0.22, 0.45)
    pen_blue_band: tuple[float, float] = (0.52, 0.72)
    pen_saturation: float = 0.45
    blur_window: int = 15
    blur_threshold: float = 4e-3  # local Laplacian variance below -> blurred


@dataclass(frozen=True)
class QcPatchResult:
    fractions: tuple[float, float, float]  # (background, accepted, artefact)
    class_map: np.ndarray | None = None  # uint8 raster of class codes

    def __post_init__(self):
        total = sum(self.fractions)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"fractions must sum to 1, got {total}")
        if any(f < 0 or f > 1 for f in self.fractions):
            raise ValueError(f"fractions outside [0, 1]: {self.fractions}")

    @property
    def background(self) -> float:
        return self.fractions[0]

    @property
    def accepted(self) -> float:
        return self.fractions[1]

    @property
    def artefact(self) -> float:
        return self.fractions[2]


def classify_pixels(patch: np.ndarray, params: QcParams = QcParams()) -> np.ndarray:
    """3-class uint8 map (BACKGROUND / ACCEPTED / ARTEFACT) for an RGB patch."""
    rgb = np.asarray(patch)
    hue, sat, val = rgb_to_hsv(rgb)
    background = (sat < params.background_saturation) & (val > params.background_value)
    black = val < params.black_value
    dark_fold = (val < params.dark_value) & (sat > params.fold_saturation)
    in_band = lambda lo_hi: (hue >= lo_hi[0]) & (hue <= lo_hi[1])
    pen = (
        (in_band(params.pen_green_band) | in_band(params.pen_blue_band))
        & (sat > params.pen_saturation)
        & ~black
    )

    gray = rgb.astype(np.float64).mean(axis=-1)
    if gray.max() > 1.0:
        gray = gray / 255.0
    lap = ndimage.laplace(gray)
    local_mean = ndimage.uniform_filter(lap, size=params.blur_window)
    local_sq = ndimage.uniform_filter(lap * lap, size=params.blur_window)
    blur = np.maximum(local_sq - local_mean**2, 0.0) < params.blur_threshold

    artefact = ~background & (black | dark_fold | pen | blur)
    classes = np.full(rgb.shape[:2], ACCEPTED, dtype=np.uint8)
    classes[artefact] = ARTEFACT
    classes[background] = BACKGROUND
    return classes


def qc_score_patch(patch: np.ndarray, params: QcParams = QcParams(),
                   keep_class_map: bool = True) -> QcPatchResult:
    classes = classify_pixels(patch, params)
    n = classes.size
    fractions = (
        float(np.count_nonzero(classes == BACKGROUND)) / n,
        float(np.count_nonzero(classes == ACCEPTED)) / n,
        float(np.count_nonzero(classes == ARTEFACT)) / n,
    )
    return QcPatchResult(fractions, classes if keep_class_map else None)


def patch_filter(result: QcPatchResult) -> bool:
    """Keep a patch iff strictly more than 50% of it is accepted tissue."""
    return result.accepted > 0.5


@dataclass(frozen=True)
class QcSummary:
    slide_id: str
    tissue_fraction_rejected: float  # artefact / (artefact + accepted)
    excluded: bool
    background_fraction: float = 0.0
    accepted_fraction: float = 0.0
    artefact_fraction: float = 0.0
    n_patches: int = 0
    tile_size: int = 0
    level_downsample: int = 1
    # the rejected-fraction denominator counts tissue pixels only
    denominator: str = "tissue"

    def accepted_area_mm2(self, microns_per_pixel: float) -> float:
        pixel_mm = microns_per_pixel * self.level_downsample / 1000.0
        pixels = self.accepted_fraction * self.n_patches * self.tile_size**2
        return pixels * pixel_mm * pixel_mm

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "fractions": {
                "background": self.background_fraction,
                "accepted": self.accepted_fraction,
                "artefact": self.artefact_fraction,
            },
            "tissue_fraction_rejected": self.tissue_fraction_rejected,
            "excluded": self.excluded,
            "n_patches": self.n_patches,
            "tile_size": self.tile_size,
            "level_downsample": self.level_downsample,
            "denominator": self.denominator,
        }


def slide_qc_summary(results: Sequence[QcPatchResult], slide_id: str,
                     tile_size: int = 0, level_downsample: int = 1) -> QcSummary:
    """Aggregate patch QC into the slide-level exclusion decision.

    A slide with zero tissue pixels is rejected outright (fraction 1.0).
    """
    if not results:
        raise ValueError("slide_qc_summary needs at least one patch result")
    bg = float(np.mean([r.background for r in results]))
    acc = float(np.mean([r.accepted for r in results]))
    art = float(np.mean([r.artefact for r in results]))
    tissue = acc + art
    rejected = art / tissue if tissue > 0 else 1.0
    return QcSummary(
        slide_id=slide_id,
        tissue_fraction_rejected=rejected,
        excluded=rejected > 0.5,
        background_fraction=bg,
        accepted_fraction=acc,
        artefact_fraction=art,
        n_patches=len(results),
        tile_size=tile_size,
        level_downsample=level_downsample,
    )


class DiceScores(NamedTuple):
    per_class: dict[int, float]
    macro: float


def qc_dice(pred: np.ndarray, ref: np.ndarray) -> DiceScores:
    """Per-class Dice over 3-class rasters plus the macro average.

    A class absent from both rasters scores 1.0 by convention.
    """
    p = np.asarray(pred)
    r = np.asarray(ref)
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {r.shape}")
    scores = {}
    for c in (BACKGROUND, ACCEPTED, ARTEFACT):
        pc = p == c
        rc = r == c
        denom = int(pc.sum()) + int(rc.sum())
        if denom == 0:
            scores[c] = 1.0
        else:
            scores[c] = 2.0 * int(np.count_nonzero(pc & rc)) / denom
    return DiceScores(scores, sum(scores.values()) / 3.0)


@dataclass
class SlideQc:
    grid: TileGrid
    results: list[QcPatchResult]
    kept: list[bool]
    summary: QcSummary


def run_slide_qc(slide: SlideSource, slide_id: str, tile_size: int = 224,
                 level_downsample: int = 1, qc_params: QcParams = QcParams(),
                 tissue_params: TissueParams = TissueParams(),
                 workers: int = 1, keep_class_maps: bool = False) -> SlideQc:
    """Detect tissue, plan tiles and QC every tile of one slide.

    Tiles stream through one at a time (or ``workers`` at a time); results
    are ordered by grid index regardless of completion order.
    """
    width, height = slide.dims
    thumb = slide.thumbnail(1024)
    mask = detect_tissue(thumb, tissue_params)
    level_dims = (width // level_downsample, height // level_downsample)
    grid = plan_tiles(level_dims, tile_size, mask, level_downsample)

    def score(tile):
        col, row = tile
        patch = read_level_tile(slide, col, row, tile_size, level_downsample)
        return qc_score_patch(patch, qc_params, keep_class_map=keep_class_maps)

    if workers > 1 and len(grid.tiles) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score, grid.tiles))
    else:
        results = [score(t) for t in grid.tiles]
    kept = [patch_filter(r) for r in results]
    if results:
        summary = slide_qc_summary(results, slide_id, tile_size, level_downsample)
    else:
        summary = QcSummary(slide_id, 1.0, True, tile_size=tile_size,
                            level_downsample=level_downsample)
    return SlideQc(grid, results, kept, summary)


def write_qc_outputs(qc: SlideQc, out_dir: str | Path) -> None:
    """Per-slide JSON summary plus the per-patch CSV with keep flags."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    slide_id = qc.summary.slide_id
    (out_dir / f"{slide_id}.json").write_text(
        json.dumps(qc.summary.to_json(), indent=2, sort_keys=True) + "\n"
    )
    lines = ["slide_id,col,row,background,accepted,artefact,keep"]
    for (col, row), result, keep in zip(qc.grid.tiles, qc.results, qc.kept):
        lines.append(
            f"{slide_id},{col},{row},{result.background!r},"
            f"{result.accepted!r},{result.artefact!r},{int(keep)}"
        )
    (out_dir / f"{slide_id}_patches.csv").write_text("\n".join(lines) + "\n")
