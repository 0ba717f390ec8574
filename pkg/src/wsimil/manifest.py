"""Cohort metadata: slide records, endoscopic label derivation, manifest I/O.

The manifest is a UTF-8 CSV with header
``slide_id,patient_id,diagnosis,macroscopic,biopsy_location,endoscopic_score,microns_per_pixel,image_path``
(column order free). One row per slide; ``endoscopic_score`` is the SES-CD
value for CD slides and the modified Mayo endoscopic score for UC slides.
"""

from __future__ import annotations

import csv
import warnings
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

from .errors import ManifestError

MANIFEST_COLUMNS = (
    "slide_id",
    "patient_id",
    "diagnosis",
    "macroscopic",
    "biopsy_location",
    "endoscopic_score",
    "microns_per_pixel",
    "image_path",
)


class Diagnosis(str, Enum):
    CD = "CD"
    UC = "UC"


class Macroscopic(str, Enum):
    NORMAL = "normal"
    EROSIONS_ULCERS = "erosions_ulcers"
    INFLAMMATION = "inflammation"


class BiopsyLocation(str, Enum):
    ILEUM = "ileum"
    COLON = "colon"
    RECTUM = "rectum"
    OTHER = "other"


class Task(str, Enum):
    """The three endoscopic prediction tasks (severity split per diagnosis)."""

    DIAGNOSIS = "diagnosis"
    MACROSCOPIC = "macroscopic"
    SEVERITY_CD = "severity_cd"
    SEVERITY_UC = "severity_uc"


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    patient_id: str
    diagnosis: Diagnosis
    macroscopic: Macroscopic
    biopsy_location: BiopsyLocation
    endoscopic_score: int
    microns_per_pixel: float
    image_path: str

    def __post_init__(self):
        if self.endoscopic_score < 0:
            raise ManifestError(
                f"slide {self.slide_id!r}: negative endoscopic_score "
                f"({self.endoscopic_score})"
            )
        if not self.microns_per_pixel > 0:
            raise ManifestError(
                f"slide {self.slide_id!r}: microns_per_pixel must be > 0"
            )


@dataclass(frozen=True)
class TaskLabel:
    task: Task
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def derive_label(record: SlideRecord, task: Task) -> TaskLabel | None:
    """Binary label for ``record`` under ``task``; None when the slide is
    excluded from the task (severity tasks only apply to one diagnosis).

    Diagnosis: CD -> 0, UC -> 1. Macroscopic: normal -> 0, erosions/ulcers
    and inflammation collapse into the positive "lesional" class. Severity:
    score 0 -> 0, score > 0 -> 1, restricted to the matching diagnosis.
    """
    task = Task(task)
    if task is Task.DIAGNOSIS:
        return TaskLabel(task, 0 if record.diagnosis is Diagnosis.CD else 1)
    if task is Task.MACROSCOPIC:
        label = 0 if record.macroscopic is Macroscopic.NORMAL else 1
        return TaskLabel(task, label)
    wanted = Diagnosis.CD if task is Task.SEVERITY_CD else Diagnosis.UC
    if record.diagnosis is not wanted:
        return None
    return TaskLabel(task, 0 if record.endoscopic_score == 0 else 1)


@dataclass(frozen=True)
class CohortManifest:
    records: tuple[SlideRecord, ...]
    schema_version: int = 1

    def __post_init__(self):
        seen: dict[str, int] = {}
        for i, rec in enumerate(self.records):
            if rec.slide_id in seen:
                raise ManifestError(
                    f"duplicate slide_id {rec.slide_id!r} "
                    f"(records {seen[rec.slide_id]} and {i})"
                )
            seen[rec.slide_id] = i
        self._warn_mixed_diagnoses()

    def _warn_mixed_diagnoses(self):
        by_patient: dict[str, set[Diagnosis]] = {}
        for rec in self.records:
            by_patient.setdefault(rec.patient_id, set()).add(rec.diagnosis)
        mixed = sorted(p for p, d in by_patient.items() if len(d) > 1)
        if mixed:
            warnings.warn(
                f"patients with slides of differing diagnoses: {mixed}",
                stacklevel=3,
            )

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def patient_ids(self) -> tuple[str, ...]:
        return tuple(sorted({r.patient_id for r in self.records}))

    def slides_of(self, patient_id: str) -> tuple[SlideRecord, ...]:
        return tuple(r for r in self.records if r.patient_id == patient_id)

    def record(self, slide_id: str) -> SlideRecord:
        for rec in self.records:
            if rec.slide_id == slide_id:
                return rec
        raise KeyError(slide_id)

    def labels(self, task: Task) -> dict[str, int]:
        """slide_id -> binary label; excluded slides are omitted."""
        out = {}
        for rec in self.records:
            lab = derive_label(rec, task)
            if lab is not None:
                out[rec.slide_id] = lab.label
        return out


def _parse_row(row: dict, line: int) -> SlideRecord:
    def enum_field(cls, key):
        raw = row[key].strip()
        try:
            return cls(raw)
        except ValueError:
            allowed = ", ".join(m.value for m in cls)
            raise ManifestError(
                f"row {line}: invalid {key} {raw!r} (expected one of {allowed})"
            ) from None

    raw_score = row["endoscopic_score"].strip()
    try:
        score = int(raw_score)
    except ValueError:
        raise ManifestError(
            f"row {line}: unparseable endoscopic_score {raw_score!r}"
        ) from None
    if score < 0:
        raise ManifestError(f"row {line}: negative endoscopic_score ({score})")
    try:
        mpp = float(row["microns_per_pixel"].strip())
    except ValueError:
        raise ManifestError(
            f"row {line}: unparseable microns_per_pixel "
            f"{row['microns_per_pixel']!r}"
        ) from None
    if not mpp > 0:
        raise ManifestError(f"row {line}: microns_per_pixel must be > 0")
    return SlideRecord(
        slide_id=row["slide_id"].strip(),
        patient_id=row["patient_id"].strip(),
        diagnosis=enum_field(Diagnosis, "diagnosis"),
        macroscopic=enum_field(Macroscopic, "macroscopic"),
        biopsy_location=enum_field(BiopsyLocation, "biopsy_location"),
        endoscopic_score=score,
        microns_per_pixel=mpp,
        image_path=row["image_path"].strip(),
    )


def load_manifest(path: str | Path) -> CohortManifest:
    """Parse a manifest CSV, enforcing invariants row by row.

    Raises ManifestError naming the offending row (1-based data row index)
    on missing columns, duplicate slide ids, or unparseable values.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty manifest")
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames)
        if missing:
            raise ManifestError(
                f"{path}: missing column(s) {sorted(missing)}"
            )
        records: list[SlideRecord] = []
        seen: dict[str, int] = {}
        for line, row in enumerate(reader, start=1):
            rec = _parse_row(row, line)
            if rec.slide_id in seen:
                raise ManifestError(
                    f"duplicate slide_id {rec.slide_id!r} in rows "
                    f"{seen[rec.slide_id]} and {line}"
                )
            seen[rec.slide_id] = line
            records.append(rec)
    if not records:
        raise ManifestError(f"{path}: manifest has no data rows")
    return CohortManifest(records=tuple(records))


def save_manifest(manifest: CohortManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            writer.writerow(
                [
                    r.slide_id,
                    r.patient_id,
                    r.diagnosis.value,
                    r.macroscopic.value,
                    r.biopsy_location.value,
                    r.endoscopic_score,
                    repr(r.microns_per_pixel),
                    r.image_path,
                ]
            )


_FILTER_FIELDS = {
    "diagnosis": lambda r: r.diagnosis.value,
    "macroscopic": lambda r: r.macroscopic.value,
    "location": lambda r: r.biopsy_location.value,
    "biopsy_location": lambda r: r.biopsy_location.value,
    "patient_id": lambda r: r.patient_id,
    "slide_id": lambda r: r.slide_id,
}


def filter_manifest(manifest: CohortManifest, filters: dict[str, str]) -> CohortManifest:
    """Restrict to records matching every ``field=value`` filter.

    Supports the clinical-subset protocol (e.g. diagnosis=UC, location=colon).
    """
    records = list(manifest.records)
    for key, value in filters.items():
        if key not in _FILTER_FIELDS:
            raise ManifestError(
                f"unknown filter field {key!r}; expected one of "
                f"{sorted(_FILTER_FIELDS)}"
            )
        getter = _FILTER_FIELDS[key]
        records = [r for r in records if getter(r) == value]
    if not records:
        raise ManifestError(f"filters {filters} matched no slides")
    return CohortManifest(records=tuple(records))


def patient_attribute(records, getter) -> str:
    """Modal value of ``getter`` over a patient's records (ties: smallest)."""
    counts = Counter(getter(r) for r in records)
    top = max(counts.values())
    return sorted(v for v, c in counts.items() if c == top)[0]


def with_records(manifest: CohortManifest, records) -> CohortManifest:
    return replace(manifest, records=tuple(records))
