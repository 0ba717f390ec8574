"""Synthetic cohorts with known ground truth.

Two generation paths share one truth schema:

* ``mode="bags"``: embedding bags drawn from an isotropic Gaussian with a
  planted offset along a fixed direction on the lesion patches of positive
  slides. Fast; exercises the heads, CV and attention scoring.
* ``mode="images"``: procedural slides (white background, speckled pink
  tissue, recolored lesion blocks, black or smoothed artefact rectangles)
  rendered on demand from integer hashes, so a 100k x 100k virtual slide
  streams without ever materializing. Exercises tiling, QC and the
  pseudo-encoder.

Cell tables are Poisson draws with class rates that differ between normal
and lesion patches, which plants the group differences the HIF statistics
should detect.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .manifest import (
    BiopsyLocation,
    CohortManifest,
    Diagnosis,
    Macroscopic,
    SlideRecord,
    Task,
    derive_label,
)
from .embeddings import EmbeddingBag

CELL_CLASSES = (
    "epithelial",
    "neutrophil",
    "lymphocyte",
    "plasma",
    "connective",
    "eosinophil",
)

DEFAULT_CELL_RATES = {
    # per-patch Poisson rates: (normal tissue, lesion tissue)
    "epithelial": (20.0, 18.0),
    "neutrophil": (1.0, 6.0),
    "lymphocyte": (8.0, 12.0),
    "plasma": (4.0, 6.0),
    "connective": (10.0, 10.0),
    "eosinophil": (0.5, 3.0),
}

_LOCATION_PATTERN = (
    ("colon",) * 5 + ("ileum",) * 2 + ("rectum",) * 2 + ("other",)
)

NORMAL_TISSUE_RGB = np.array([225.0, 160.0, 190.0])
LESION_TISSUE_RGB = np.array([175.0, 115.0, 205.0])
BACKGROUND_RGB = np.array([248.0, 248.0, 248.0])


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 60
    n_slides: int = 200
    mode: str = "bags"  # "bags" or "images"
    dim: int = 64
    bag_grid: tuple[int, int] = (8, 8)  # (cols, rows) of the patch grid
    tile_size: int = 224
    lesion_fraction: tuple[float, float] = (0.10, 0.10)
    artefact_fraction: tuple[float, float] = (0.0, 0.0)
    signal_strength: float = 1.0  # embedding offset (bags) / color shift (images)
    positive_rate: float = 0.5
    cd_fraction: float = 0.5
    microns_per_pixel: float = 0.25
    texture_sigma: float = 12.0
    tissue_margin_tiles: int = 1  # white border around the tissue block
    cell_rates: dict = field(default_factory=lambda: dict(DEFAULT_CELL_RATES))
    seed: int = 0

    def __post_init__(self):
        for name in ("lesion_fraction", "artefact_fraction"):
            lo, hi = getattr(self, name)
            if not (0.0 <= lo <= hi <= 1.0):
                raise ValueError(f"{name} range must satisfy 0 <= lo <= hi <= 1")
        if self.mode not in ("bags", "images"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def slide_dims(self) -> tuple[int, int]:
        cols, rows = self.bag_grid
        margin = 2 * self.tissue_margin_tiles
        return ((cols + margin) * self.tile_size, (rows + margin) * self.tile_size)


@dataclass
class SlideTruth:
    slide_id: str
    grid_shape: tuple[int, int]  # (cols, rows)
    lesion_mask: np.ndarray  # (rows, cols) bool, tissue patch grid
    artefact_mask: np.ndarray  # (rows, cols) bool
    labels: dict[str, int | None]
    grid_origin: tuple[int, int] = (0, 0)  # tissue grid offset in whole-slide tiles

    def signal_indicator(self, coords: np.ndarray) -> np.ndarray:
        """Planted-signal flags aligned to bag coordinate order."""
        coords = np.asarray(coords)
        cols, rows = self.grid_shape
        c = coords[:, 0] - self.grid_origin[0]
        r = coords[:, 1] - self.grid_origin[1]
        inside = (c >= 0) & (c < cols) & (r >= 0) & (r < rows)
        out = np.zeros(len(coords), dtype=bool)
        out[inside] = self.lesion_mask[r[inside], c[inside]]
        return out


@dataclass
class SyntheticCohort:
    config: SynthConfig
    manifest: CohortManifest
    truth: dict[str, SlideTruth]
    bags: dict[str, EmbeddingBag] = field(default_factory=dict)
    slides: dict = field(default_factory=dict)  # slide_id -> SyntheticSlide
    cells: list = field(default_factory=list)  # (slide_id, x, y, cell_class)


def _slide_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _lesion_block(rng, cols, rows, fraction) -> np.ndarray:
    """Row-major block of exactly round(fraction * cells) grid cells."""
    mask = np.zeros((rows, cols), dtype=bool)
    target = int(round(fraction * cols * rows))
    if target <= 0:
        return mask
    target = min(target, cols * rows)
    width = min(cols, max(1, int(np.ceil(np.sqrt(target)))))
    height = min(rows, int(np.ceil(target / width)))
    c0 = int(rng.integers(0, cols - width + 1))
    r0 = int(rng.integers(0, rows - height + 1))
    placed = 0
    for r in range(height):
        for c in range(width):
            if placed == target:
                return mask
            mask[r0 + r, c0 + c] = True
            placed += 1
    return mask


def _artefact_cells(rng, cols, rows, fraction, lesion_mask) -> np.ndarray:
    """Patch-aligned artefact cells covering ~fraction of the tissue grid,
    preferring non-lesion cells so both plants stay measurable."""
    mask = np.zeros((rows, cols), dtype=bool)
    target = int(round(fraction * cols * rows))
    if target <= 0:
        return mask
    free = [(r, c) for r in range(rows) for c in range(cols) if not lesion_mask[r, c]]
    taken = [(r, c) for r in range(rows) for c in range(cols) if lesion_mask[r, c]]
    order = list(rng.permutation(len(free)))
    chosen = [free[i] for i in order[:target]]
    if len(chosen) < target:
        chosen += taken[: target - len(chosen)]
    for r, c in chosen:
        mask[r, c] = True
    return mask


def _patient_roster(config: SynthConfig):
    n_cd = int(round(config.n_patients * config.cd_fraction))
    roster = []
    for i in range(config.n_patients):
        diagnosis = Diagnosis.CD if i < n_cd else Diagnosis.UC
        positive = (i % 2) == 0 and config.positive_rate > 0
        if config.positive_rate >= 1.0:
            positive = True
        elif config.positive_rate <= 0.0:
            positive = False
        roster.append(
            {
                "patient_id": f"P{i:04d}",
                "diagnosis": diagnosis,
                "positive": positive,
                "location": BiopsyLocation(_LOCATION_PATTERN[i % len(_LOCATION_PATTERN)]),
                "macroscopic": (
                    Macroscopic.EROSIONS_ULCERS if positive and i % 4 == 0
                    else Macroscopic.INFLAMMATION if positive
                    else Macroscopic.NORMAL
                ),
            }
        )
    return roster


def generate_cohort(config: SynthConfig = SynthConfig()) -> SyntheticCohort:
    """Deterministic cohort: manifest, per-slide truth, and bags or slides."""
    cols, rows = config.bag_grid
    roster = _patient_roster(config)
    rng_cohort = np.random.default_rng(np.random.SeedSequence([config.seed, 7001]))
    direction = rng_cohort.standard_normal(config.dim)
    direction /= np.linalg.norm(direction)

    records = []
    truth: dict[str, SlideTruth] = {}
    bags: dict[str, EmbeddingBag] = {}
    slides: dict[str, SyntheticSlide] = {}
    cells: list[tuple[str, float, float, str]] = []

    for index in range(config.n_slides):
        patient = roster[index % config.n_patients]
        slide_id = f"S{index:04d}"
        rng = _slide_rng(config.seed, index)
        positive = patient["positive"]

        lesion_fraction = float(rng.uniform(*config.lesion_fraction))
        lesion = (
            _lesion_block(rng, cols, rows, max(lesion_fraction, 1e-9))
            if positive
            else np.zeros((rows, cols), dtype=bool)
        )
        if positive and not lesion.any():
            lesion[int(rng.integers(rows)), int(rng.integers(cols))] = True
        artefact_fraction = float(rng.uniform(*config.artefact_fraction))
        artefact = _artefact_cells(rng, cols, rows, artefact_fraction, lesion)

        score = int(1 + rng.poisson(2.0)) if positive else 0
        record = SlideRecord(
            slide_id=slide_id,
            patient_id=patient["patient_id"],
            diagnosis=patient["diagnosis"],
            macroscopic=patient["macroscopic"] if positive else Macroscopic.NORMAL,
            biopsy_location=patient["location"],
            endoscopic_score=score,
            microns_per_pixel=config.microns_per_pixel,
            image_path=f"slides/{slide_id}",
        )
        records.append(record)
        margin = config.tissue_margin_tiles if config.mode == "images" else 0
        task_labels = {}
        for task in Task:
            lab = derive_label(record, task)
            task_labels[task.value] = None if lab is None else lab.label
        slide_truth = SlideTruth(
            slide_id=slide_id,
            grid_shape=(cols, rows),
            lesion_mask=lesion,
            artefact_mask=artefact,
            labels=task_labels,
            grid_origin=(margin, margin),
        )
        truth[slide_id] = slide_truth

        if config.mode == "bags":
            n = cols * rows
            instances = (rng.standard_normal((n, config.dim)) / np.sqrt(config.dim))
            flat_lesion = lesion.reshape(-1)  # row-major matches coords below
            instances[flat_lesion] += config.signal_strength * direction
            coords = np.array(
                [(c, r) for r in range(rows) for c in range(cols)], dtype=np.int64
            )
            bags[slide_id] = EmbeddingBag(
                slide_id=slide_id,
                encoder_id=f"synthetic-s{config.seed}",
                instances=instances.astype(np.float32),
                coords=coords,
                tile_size=config.tile_size,
            )
        else:
            slides[slide_id] = SyntheticSlide.from_truth(config, slide_truth, index)

        cells.extend(_slide_cells(config, rng, slide_id, lesion, margin))

    manifest = CohortManifest(records=tuple(records))
    return SyntheticCohort(config, manifest, truth, bags, slides, cells)


def _slide_cells(config: SynthConfig, rng, slide_id: str, lesion: np.ndarray,
                 margin: int) -> list[tuple[str, float, float, str]]:
    cols, rows = config.bag_grid
    span = config.tile_size  # base pixels per grid cell
    out = []
    for r in range(rows):
        for c in range(cols):
            lesional = bool(lesion[r, c])
            x0 = (c + margin) * span
            y0 = (r + margin) * span
            for cls in CELL_CLASSES:
                normal_rate, lesion_rate = config.cell_rates[cls]
                lam = lesion_rate if lesional else normal_rate
                count = int(rng.poisson(lam))
                if count == 0:
                    continue
                xs = x0 + rng.uniform(0, span, count)
                ys = y0 + rng.uniform(0, span, count)
                out.extend(
                    (slide_id, float(x), float(y), cls) for x, y in zip(xs, ys)
                )
    return out


# ---------------------------------------------------------------------------
# procedural slides


def _hash01(xs: np.ndarray, ys: np.ndarray, seed: int) -> np.ndarray:
    """Position-stable uniform noise in [0, 1): hash of (x, y, seed)."""
    x = xs.astype(np.uint64)[None, :]
    y = ys.astype(np.uint64)[:, None]
    h = (x * np.uint64(0x9E3779B97F4A7C15)) ^ (y * np.uint64(0xBF58476D1CE4E5B9))
    h = h ^ np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    h *= np.uint64(0xD6E8FEB86659FD93)
    h ^= h >> np.uint64(27)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@dataclass(frozen=True)
class SyntheticSlide:
    """A virtual slide rendered on demand; implements the SlideSource
    protocol with O(region) memory regardless of slide size."""

    width: int
    height: int
    tile_size: int
    tissue_box: tuple[int, int, int, int]  # x0, y0, x1, y1 (base pixels)
    lesion_cells: tuple[tuple[int, int], ...]  # absolute patch-grid (col, row)
    artefact_cells: tuple[tuple[int, int], ...]
    artefact_style: str = "black"  # or "smooth" (texture-free, trips blur QC)
    noise_seed: int = 0
    texture_sigma: float = 12.0
    lesion_rgb: tuple[float, float, float] = tuple(LESION_TISSUE_RGB)

    @classmethod
    def from_truth(cls, config: SynthConfig, truth: SlideTruth,
                   index: int) -> "SyntheticSlide":
        cols, rows = truth.grid_shape
        t = config.tile_size
        m = config.tissue_margin_tiles
        lesion = [
            (c + m, r + m)
            for r in range(rows) for c in range(cols)
            if truth.lesion_mask[r, c]
        ]
        artefact = [
            (c + m, r + m)
            for r in range(rows) for c in range(cols)
            if truth.artefact_mask[r, c]
        ]
        width, height = config.slide_dims
        mix = np.clip(config.signal_strength, 0.0, 1.0)
        lesion_rgb = tuple(
            NORMAL_TISSUE_RGB + mix * (LESION_TISSUE_RGB - NORMAL_TISSUE_RGB)
        )
        return cls(
            width=width,
            height=height,
            tile_size=t,
            tissue_box=(m * t, m * t, (m + cols) * t, (m + rows) * t),
            lesion_cells=tuple(lesion),
            artefact_cells=tuple(artefact),
            noise_seed=index,
            texture_sigma=config.texture_sigma,
            lesion_rgb=lesion_rgb,
        )

    @property
    def dims(self) -> tuple[int, int]:
        return (self.width, self.height)

    def _cell_mask(self, xs, ys, cells) -> np.ndarray:
        if not cells:
            return np.zeros((len(ys), len(xs)), dtype=bool)
        cell_set = set(cells)
        col = xs // self.tile_size
        row = ys // self.tile_size
        unique_pairs = {
            (int(c), int(r)) for c in np.unique(col) for r in np.unique(row)
        } & cell_set
        mask = np.zeros((len(ys), len(xs)), dtype=bool)
        for c, r in unique_pairs:
            mask[np.ix_(row == r, col == c)] = True
        return mask

    def read_region(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        xs = np.arange(x, x + w)
        ys = np.arange(y, y + h)
        x0, y0, x1, y1 = self.tissue_box
        tissue = ((xs >= x0) & (xs < x1))[None, :] & ((ys >= y0) & (ys < y1))[:, None]
        lesion = self._cell_mask(xs, ys, self.lesion_cells)
        artefact = self._cell_mask(xs, ys, self.artefact_cells)

        out = np.empty((h, w, 3), dtype=np.float64)
        amplitude = self.texture_sigma * np.sqrt(3.0)  # uniform noise, sd sigma
        for ch in range(3):
            noise = (_hash01(xs, ys, self.noise_seed * 3 + ch) - 0.5) * 2.0
            base = np.full((h, w), BACKGROUND_RGB[ch]) + noise * 2.0
            color = np.where(lesion, self.lesion_rgb[ch], NORMAL_TISSUE_RGB[ch])
            textured = color + noise * amplitude
            base = np.where(tissue, textured, base)
            if self.artefact_style == "black":
                base = np.where(artefact & tissue, 8.0 + noise * 2.0, base)
            else:  # smooth: keep the tissue color but kill the texture
                base = np.where(artefact & tissue, color, base)
            out[..., ch] = base
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)

    def thumbnail(self, max_dim: int = 1024) -> np.ndarray:
        scale = max(self.width, self.height) / max_dim
        scale = max(scale, 1.0)
        tw = max(1, int(round(self.width / scale)))
        th = max(1, int(round(self.height / scale)))
        xs = (np.arange(tw) * scale + scale / 2).astype(np.int64)
        ys = (np.arange(th) * scale + scale / 2).astype(np.int64)
        x0, y0, x1, y1 = self.tissue_box
        tissue = ((xs >= x0) & (xs < x1))[None, :] & ((ys >= y0) & (ys < y1))[:, None]
        lesion = self._cell_mask(xs, ys, self.lesion_cells)
        artefact = self._cell_mask(xs, ys, self.artefact_cells)
        out = np.empty((th, tw, 3), dtype=np.float64)
        for ch in range(3):
            base = np.full((th, tw), BACKGROUND_RGB[ch])
            base = np.where(tissue, NORMAL_TISSUE_RGB[ch], base)
            base = np.where(tissue & lesion, self.lesion_rgb[ch], base)
            if self.artefact_style == "black":
                base = np.where(tissue & artefact, 8.0, base)
            out[..., ch] = base
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)

    def qc_reference(self, level_downsample: int = 1) -> np.ndarray:
        """Planted 3-class truth raster at the extraction level."""
        from .qc import ACCEPTED, ARTEFACT, BACKGROUND

        w = self.width // level_downsample
        h = self.height // level_downsample
        xs = np.arange(w) * level_downsample
        ys = np.arange(h) * level_downsample
        x0, y0, x1, y1 = self.tissue_box
        tissue = ((xs >= x0) & (xs < x1))[None, :] & ((ys >= y0) & (ys < y1))[:, None]
        artefact = self._cell_mask(xs, ys, self.artefact_cells)
        ref = np.full((h, w), BACKGROUND, dtype=np.uint8)
        ref[tissue] = ACCEPTED
        ref[tissue & artefact] = ARTEFACT
        return ref


def plant_artefacts(slide: SyntheticSlide, fraction: float,
                    seed: int = 0, style: str = "black"
                    ) -> tuple[SyntheticSlide, np.ndarray]:
    """Cover ~fraction of the slide's tissue with patch-aligned artefacts.

    Returns the modified slide and the artefact mask over the tissue's
    patch grid. The planted area is within +/-2% of the requested fraction
    (exact up to whole patches).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    t = slide.tile_size
    x0, y0, x1, y1 = slide.tissue_box
    cols = (x1 - x0) // t
    rows = (y1 - y0) // t
    c0, r0 = x0 // t, y0 // t
    target = int(round(fraction * cols * rows))
    rng = np.random.default_rng(seed)
    order = rng.permutation(cols * rows)[:target]
    mask = np.zeros((rows, cols), dtype=bool)
    cells = []
    for flat in order:
        r, c = divmod(int(flat), cols)
        mask[r, c] = True
        cells.append((c0 + c, r0 + r))
    planted = replace(slide, artefact_cells=tuple(cells), artefact_style=style)
    return planted, mask


# ---------------------------------------------------------------------------
# cohorts shaped to requested marginals (stratification checks)


def sample_cohort_manifest(n_patients: int, marginals: dict[str, dict[str, float]],
                           slides_per_patient: int = 2, seed: int = 0,
                           positive_rate: float = 0.4) -> CohortManifest:
    """Manifest whose patient-level category proportions match the given
    marginals via largest-remainder quotas."""

    def quota_list(weights: dict[str, float]) -> list[str]:
        exact = {k: v * n_patients for k, v in weights.items()}
        counts = {k: int(np.floor(v)) for k, v in exact.items()}
        leftover = n_patients - sum(counts.values())
        by_frac = sorted(exact, key=lambda k: exact[k] - counts[k], reverse=True)
        for k in by_frac[:leftover]:
            counts[k] += 1
        values = [k for k, c in counts.items() for _ in range(c)]
        return values

    rng = np.random.default_rng(seed)
    diagnosis = quota_list(marginals["diagnosis"])
    location = quota_list(marginals["location"])
    macroscopic = quota_list(marginals["macroscopic"])
    rng.shuffle(location)
    rng.shuffle(macroscopic)

    records = []
    for i in range(n_patients):
        mac = Macroscopic(macroscopic[i])
        positive = mac is not Macroscopic.NORMAL
        score = int(1 + rng.poisson(2.0)) if positive else 0
        for j in range(slides_per_patient):
            records.append(
                SlideRecord(
                    slide_id=f"S{i:04d}_{j}",
                    patient_id=f"P{i:04d}",
                    diagnosis=Diagnosis(diagnosis[i]),
                    macroscopic=mac,
                    biopsy_location=BiopsyLocation(location[i]),
                    endoscopic_score=score,
                    microns_per_pixel=0.25,
                    image_path="",
                )
            )
    return CohortManifest(records=tuple(records))


def write_cells_csv(cells, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["slide_id,x,y,cell_class"]
    lines += [f"{sid},{x!r},{y!r},{cls}" for sid, x, y, cls in cells]
    path.write_text("\n".join(lines) + "\n")
