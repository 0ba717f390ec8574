"""Patient-stratified cross-validation, fold training and reporting.

Folds partition patients (never slides) so no patient appears in both
sides of a split. Stratification deals patients round-robin within
(location x diagnosis x target-label) strata, smallest strata first, with
a seeded per-stratum fold offset; every patient is tested exactly once
and per-category proportions stay close to the cohort's.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import clone

from .manifest import CohortManifest, Task, derive_label, patient_attribute, with_records
from .stats import auroc, standard_error


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_patient_ids: tuple[str, ...]
    test_patient_ids: tuple[str, ...]
    # category -> value -> (cohort, train, test) patient proportions
    stratification: dict = field(default_factory=dict, compare=False)


def _patient_attributes(manifest: CohortManifest, task: Task):
    """Per-patient modal attributes used for stratification; patients with
    no labelled slide under the task are dropped."""
    attrs = {}
    for pid in manifest.patient_ids:
        slides = manifest.slides_of(pid)
        labels = [
            lab.label
            for lab in (derive_label(r, task) for r in slides)
            if lab is not None
        ]
        if not labels:
            continue
        attrs[pid] = {
            "location": patient_attribute(slides, lambda r: r.biopsy_location.value),
            "diagnosis": patient_attribute(slides, lambda r: r.diagnosis.value),
            "macroscopic": patient_attribute(slides, lambda r: r.macroscopic.value),
            "target": str(int(np.mean(labels) >= 0.5)),
        }
    return attrs


def _proportions(attrs, pids, category):
    values = [attrs[p][category] for p in pids]
    total = len(values)
    out = {}
    for v in values:
        out[v] = out.get(v, 0) + 1
    return {v: c / total for v, c in out.items()}


def stratified_kfold(manifest: CohortManifest, task: Task, k: int = 5,
                     seed: int = 0) -> list[FoldSplit]:
    """Greedy balanced patient assignment into k folds.

    Strata are processed smallest first; within each stratum patients are
    sorted by id and dealt round-robin starting at a seeded fold offset.
    """
    task = Task(task)
    attrs = _patient_attributes(manifest, task)
    if len(attrs) < k:
        raise ValueError(
            f"need at least {k} patients with labels for task {task.value}, "
            f"have {len(attrs)}"
        )
    strata: dict[tuple, list[str]] = {}
    for pid, a in attrs.items():
        strata.setdefault((a["location"], a["diagnosis"], a["target"]), []).append(pid)

    small = sorted(len(m) for m in strata.values())[0]
    if small < k:
        warnings.warn(
            f"stratum with {small} patient(s) < k={k}; best-effort assignment",
            stacklevel=2,
        )

    rng = np.random.default_rng(seed)
    # one dealing pointer per target label: each fold receives each class
    # n/k (+-1) times, and the pointer continues across strata so sub-k
    # strata still spread evenly over folds
    targets = sorted({key[2] for key in strata})
    pointers = {t: int(rng.integers(k)) for t in targets}
    fold_of: dict[str, int] = {}
    for key in sorted(strata, key=lambda key: (len(strata[key]), key)):
        target = key[2]
        for pid in sorted(strata[key]):
            fold_of[pid] = pointers[target] % k
            pointers[target] += 1

    all_pids = sorted(attrs)
    folds = []
    for fold in range(k):
        test = tuple(p for p in all_pids if fold_of[p] == fold)
        train = tuple(p for p in all_pids if fold_of[p] != fold)
        report = {}
        for category in ("location", "diagnosis", "macroscopic", "target"):
            cohort = _proportions(attrs, all_pids, category)
            tr = _proportions(attrs, train, category) if train else {}
            te = _proportions(attrs, test, category) if test else {}
            report[category] = {
                v: (cohort.get(v, 0.0), tr.get(v, 0.0), te.get(v, 0.0))
                for v in cohort
            }
        folds.append(FoldSplit(fold, train, test, report))
    return folds


@dataclass
class FoldResult:
    fold_index: int
    estimator: object
    auroc: float
    scores: dict[str, float]  # test slide -> positive-class probability
    labels: dict[str, int]
    epoch_losses: list[float]


@dataclass
class CvResult:
    task: str
    head: str
    fold_results: list[FoldResult]

    @property
    def fold_aurocs(self) -> list[float]:
        return [f.auroc for f in self.fold_results]

    @property
    def mean_auroc(self) -> float:
        return float(np.mean(self.fold_aurocs))

    @property
    def standard_error(self) -> float:
        return standard_error(self.fold_aurocs)

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "head": self.head,
            "k": len(self.fold_results),
            "fold_aurocs": self.fold_aurocs,
            "mean_auroc": self.mean_auroc,
            "standard_error": self.standard_error,
        }

    def all_scores(self) -> tuple[dict[str, float], dict[str, int]]:
        scores: dict[str, float] = {}
        labels: dict[str, int] = {}
        for f in self.fold_results:
            scores.update(f.scores)
            labels.update(f.labels)
        return scores, labels


def fit_fold(estimator, fold: FoldSplit, bags: dict, labels: dict[str, int],
             owners: dict[str, str], seed: int = 0) -> FoldResult:
    """Train a cloned estimator on one fold's train patients and score every
    held-out patient's slides independently."""
    return _fit_fold_task((estimator, fold, bags, labels, owners, seed))


def _fit_fold_task(args):
    (estimator, fold, slide_bags, slide_labels, owners, seed) = args
    train_patients = set(fold.train_patient_ids)
    test_patients = set(fold.test_patient_ids)
    train_ids = [s for s in sorted(slide_labels) if owners[s] in train_patients]
    test_ids = [s for s in sorted(slide_labels) if owners[s] in test_patients]
    est = clone(estimator)
    est.set_params(seed=seed)
    est.fit([slide_bags[s] for s in train_ids],
            [slide_labels[s] for s in train_ids])
    probs = est.predict_proba([slide_bags[s] for s in test_ids])[:, 1]
    scores = {s: float(p) for s, p in zip(test_ids, probs)}
    labels = {s: slide_labels[s] for s in test_ids}
    fold_auroc = auroc(list(scores.values()), list(labels.values()))
    return FoldResult(fold.fold_index, est, fold_auroc, scores, labels,
                      est.epoch_losses_)


def cross_validate(estimator, manifest: CohortManifest, task: Task,
                   bags: dict, k: int = 5, seed: int = 0,
                   workers: int = 1) -> CvResult:
    """k-fold patient-stratified cross-validation of one estimator.

    ``bags`` maps slide_id to its embedding bag. Results are independent
    of ``workers``; each fold trains with a seed derived from (seed, fold).
    """
    task = Task(task)
    slide_labels = manifest.labels(task)
    missing = sorted(s for s in slide_labels if s not in bags)
    if missing:
        raise ValueError(f"missing embedding bags for slides: {missing[:5]}")
    owners = {r.slide_id: r.patient_id for r in manifest}
    folds = stratified_kfold(manifest, task, k=k, seed=seed)
    jobs = [
        (estimator, fold, bags, slide_labels, owners,
         _fold_seed(seed, fold.fold_index))
        for fold in folds
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_fold_task, jobs))
    else:
        results = [_fit_fold_task(job) for job in jobs]
    return CvResult(task.value, getattr(estimator, "head_name", "mil"), results)


def _fold_seed(seed: int, fold_index: int) -> int:
    return int(np.random.SeedSequence([int(seed), 977, fold_index]).generate_state(1)[0])


@dataclass
class ConfusionReport:
    threshold: float
    tp: list[tuple[str, float]]
    tn: list[tuple[str, float]]
    fp: list[tuple[str, float]]
    fn: list[tuple[str, float]]
    confident_errors: list[tuple[str, float, int]]  # most confident first

    @property
    def counts(self) -> dict[str, int]:
        return {"tp": len(self.tp), "tn": len(self.tn),
                "fp": len(self.fp), "fn": len(self.fn)}


def misclassification_report(scores: dict[str, float], labels: dict[str, int],
                             threshold: float = 0.5) -> ConfusionReport:
    """Confusion lists plus errors ranked by confidence for expert review."""
    tp, tn, fp, fn = [], [], [], []
    for sid in sorted(scores):
        s, y = scores[sid], labels[sid]
        predicted = s >= threshold
        bucket = tp if (predicted and y == 1) else \
            fn if (not predicted and y == 1) else \
            fp if predicted else tn
        bucket.append((sid, s))
    errors = [(sid, s, labels[sid]) for sid, s in fp + fn]
    errors.sort(key=lambda t: (-abs(t[1] - threshold), t[0]))
    return ConfusionReport(threshold, tp, tn, fp, fn, errors)


def shuffle_task_labels(manifest: CohortManifest, task: Task,
                        seed: int = 0) -> CohortManifest:
    """Permute the task's label-bearing field among patients (null control).

    Each patient's modal value moves as a unit to a permuted patient; all of
    that patient's slides receive it. For severity tasks the permutation
    stays within the task's diagnosis subset.
    """
    task = Task(task)
    rng = np.random.default_rng(seed)
    field_of = {
        Task.DIAGNOSIS: "diagnosis",
        Task.MACROSCOPIC: "macroscopic",
        Task.SEVERITY_CD: "endoscopic_score",
        Task.SEVERITY_UC: "endoscopic_score",
    }[task]

    def eligible(records):
        if task in (Task.SEVERITY_CD, Task.SEVERITY_UC):
            return any(derive_label(r, task) is not None for r in records)
        return True

    pids = [p for p in manifest.patient_ids if eligible(manifest.slides_of(p))]
    values = [
        patient_attribute(manifest.slides_of(p), lambda r: getattr(r, field_of))
        for p in pids
    ]
    permuted = [values[i] for i in rng.permutation(len(values))]
    new_value = dict(zip(pids, permuted))

    from dataclasses import replace

    records = []
    for rec in manifest:
        if rec.patient_id in new_value:
            records.append(replace(rec, **{field_of: new_value[rec.patient_id]}))
        else:
            records.append(rec)
    return with_records(manifest, records)
