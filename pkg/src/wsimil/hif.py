"""Cell tables, per-tile density heatmaps, and human-interpretable features
with two-group significance tests.

Cells arrive as a CSV of classified centroids (six classes). Per slide we
report, for every class, its ratio to all cells and its density per mm^2
of accepted tissue; the cohort-level test compares each feature between
the endoscopic score-0 and score>0 groups with a Mann-Whitney U test
(exact by enumeration for small groups, normal approximation otherwise).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .qc import QcSummary
from .stats import MannWhitneyResult, mann_whitney_u
from .tiling import TileGrid

CELL_CLASSES = (
    "epithelial",
    "neutrophil",
    "lymphocyte",
    "plasma",
    "connective",
    "eosinophil",
)


@dataclass(frozen=True)
class CellRecord:
    slide_id: str
    x: float  # base-magnification pixels
    y: float
    cell_class: str

    def __post_init__(self):
        if self.cell_class not in CELL_CLASSES:
            raise ValueError(
                f"unknown cell class {self.cell_class!r}; "
                f"expected one of {CELL_CLASSES}"
            )


def load_cells_csv(path: str | Path) -> list[CellRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"cells table not found: {path}")
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"slide_id", "x", "y", "cell_class"}
        if reader.fieldnames is None or required - set(reader.fieldnames):
            raise DataError(f"{path}: expected header slide_id,x,y,cell_class")
        for i, row in enumerate(reader, start=1):
            try:
                records.append(
                    CellRecord(row["slide_id"], float(row["x"]), float(row["y"]),
                               row["cell_class"])
                )
            except ValueError as exc:
                raise DataError(f"{path} row {i}: {exc}") from None
    return records


@dataclass
class DensityMap:
    slide_id: str
    cell_class: str
    counts: np.ndarray  # (rows, cols) int
    densities: np.ndarray  # (rows, cols) cells per mm^2
    skipped: int  # out-of-bounds centroids


def cell_density_heatmap(cells, grid: TileGrid, cell_class: str,
                         microns_per_pixel: float,
                         slide_id: str = "") -> DensityMap:
    """Per-tile counts and densities of one class over the grid extent.

    Centroids are assigned by half-open tile intervals (a boundary point
    belongs to the tile whose origin is <= the point). Out-of-bounds
    centroids are skipped and counted.
    """
    if cell_class not in CELL_CLASSES:
        raise ValueError(f"unknown cell class {cell_class!r}")
    span = grid.base_tile_span
    counts = np.zeros((grid.n_rows, grid.n_cols), dtype=np.int64)
    skipped = 0
    for cell in cells:
        if cell.cell_class != cell_class:
            continue
        col = int(cell.x // span)
        row = int(cell.y // span)
        if 0 <= col < grid.n_cols and 0 <= row < grid.n_rows:
            counts[row, col] += 1
        else:
            skipped += 1
    tile_mm = span * microns_per_pixel / 1000.0
    densities = counts / (tile_mm * tile_mm)
    return DensityMap(slide_id, cell_class, counts, densities, skipped)


@dataclass
class SlideHifs:
    """Per-slide cell statistics; ratios are None when the slide has no
    cells (missing, not zero)."""

    slide_id: str
    total_cells: int
    ratios: dict[str, float] | None
    densities: dict[str, float]
    accepted_area_mm2: float


def compute_hifs(cells, qc_summary: QcSummary,
                 microns_per_pixel: float) -> SlideHifs:
    """Class ratios and per-mm^2 densities over accepted tissue area."""
    counts = {c: 0 for c in CELL_CLASSES}
    for cell in cells:
        counts[cell.cell_class] += 1
    total = sum(counts.values())
    area = qc_summary.accepted_area_mm2(microns_per_pixel)
    if area <= 0:
        densities = {c: 0.0 for c in CELL_CLASSES}
    else:
        densities = {c: counts[c] / area for c in CELL_CLASSES}
    ratios = None if total == 0 else {c: counts[c] / total for c in CELL_CLASSES}
    return SlideHifs(qc_summary.slide_id, total, ratios, densities, area)


def hif_group_test(values_a, values_b) -> MannWhitneyResult:
    """Mann-Whitney U between two feature-value groups (two-tailed)."""
    if len(values_a) < 2 or len(values_b) < 2:
        raise ValueError("each group needs at least 2 values")
    return mann_whitney_u(values_a, values_b)


@dataclass
class HifTestRow:
    feature: str
    u: float
    p_value: float
    n_a: int
    n_b: int
    method: str


def hif_feature_tests(slide_hifs: list[SlideHifs],
                      groups: dict[str, int]) -> list[HifTestRow]:
    """All 12 feature tests (6 ratios + 6 densities) between group 0 and
    group 1 slides; slides missing ratios are dropped from ratio features.
    """
    rows = []
    for feature_kind in ("ratio", "density"):
        for cls in CELL_CLASSES:
            a, b = [], []
            for hif in slide_hifs:
                if hif.slide_id not in groups:
                    continue
                if feature_kind == "ratio":
                    if hif.ratios is None:
                        continue
                    value = hif.ratios[cls]
                else:
                    value = hif.densities[cls]
                (a if groups[hif.slide_id] == 0 else b).append(value)
            if len(a) < 2 or len(b) < 2:
                continue
            result = hif_group_test(a, b)
            name = (
                f"ratio of {cls} to all cells" if feature_kind == "ratio"
                else f"density of {cls} per mm2 accepted tissue"
            )
            rows.append(HifTestRow(name, result.u, result.p_value,
                                   len(a), len(b), result.method))
    return rows


def write_hif_report_csv(slide_hifs: list[SlideHifs], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["slide_id", "total_cells", "accepted_area_mm2"]
    header += [f"ratio_{c}" for c in CELL_CLASSES]
    header += [f"density_{c}" for c in CELL_CLASSES]
    lines = [",".join(header)]
    for hif in slide_hifs:
        row = [hif.slide_id, str(hif.total_cells), repr(hif.accepted_area_mm2)]
        if hif.ratios is None:
            row += [""] * len(CELL_CLASSES)
        else:
            row += [repr(hif.ratios[c]) for c in CELL_CLASSES]
        row += [repr(hif.densities[c]) for c in CELL_CLASSES]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def write_hif_tests_csv(rows: list[HifTestRow], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["feature,U,p,nA,nB,method"]
    for r in rows:
        lines.append(f"{r.feature},{r.u!r},{r.p_value!r},{r.n_a},{r.n_b},{r.method}")
    path.write_text("\n".join(lines) + "\n")
