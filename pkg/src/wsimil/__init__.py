"""Whole-slide-image multiple-instance-learning toolkit.

QC-gated tile extraction over gigapixel slides, deterministic patch
embedding bags, two attention-based MIL heads trained with patient-
stratified cross-validation, attention and cell-density heatmaps, and
human-interpretable-feature statistics, all verifiable on a built-in
synthetic cohort generator.
"""

__version__ = "0.1.0"

from .manifest import (  # noqa: F401
    BiopsyLocation,
    CohortManifest,
    Diagnosis,
    Macroscopic,
    SlideRecord,
    Task,
    TaskLabel,
    derive_label,
    filter_manifest,
    load_manifest,
    save_manifest,
)
