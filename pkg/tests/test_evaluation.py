import numpy as np
import pytest

from wsimil.estimators import DsmilClassifier
from wsimil.evaluation import (
    cross_validate,
    misclassification_report,
    shuffle_task_labels,
    stratified_kfold,
)
from wsimil.manifest import (
    BiopsyLocation,
    CohortManifest,
    Diagnosis,
    Macroscopic,
    SlideRecord,
    Task,
)
from wsimil.synthetic import SynthConfig, generate_cohort, sample_cohort_manifest


def two_strata_manifest():
    """10 patients: 5 CD-normal-colon, 5 UC-lesional-ileum; 1 slide each."""
    records = []
    for i in range(5):
        records.append(SlideRecord(
            f"a{i}", f"pa{i}", Diagnosis.CD, Macroscopic.NORMAL,
            BiopsyLocation.COLON, 0, 0.25, ""))
        records.append(SlideRecord(
            f"b{i}", f"pb{i}", Diagnosis.UC, Macroscopic.INFLAMMATION,
            BiopsyLocation.ILEUM, 3, 0.25, ""))
    return CohortManifest(records=tuple(records))


class TestStratifiedKfold:
    def test_two_strata_of_five_one_each_per_fold(self):
        folds = stratified_kfold(two_strata_manifest(), Task.MACROSCOPIC, k=5,
                                 seed=0)
        for fold in folds:
            assert len(fold.test_patient_ids) == 2
            assert sum(p.startswith("pa") for p in fold.test_patient_ids) == 1
            assert sum(p.startswith("pb") for p in fold.test_patient_ids) == 1

    def test_partition_property(self):
        cohort = generate_cohort(SynthConfig(n_patients=23, n_slides=60,
                                             dim=8, bag_grid=(3, 3), seed=5))
        with pytest.warns(UserWarning):
            folds = stratified_kfold(cohort.manifest, Task.MACROSCOPIC, k=5,
                                     seed=3)
        tested = [p for f in folds for p in f.test_patient_ids]
        assert sorted(tested) == sorted(set(tested))
        assert set(tested) == set(cohort.manifest.patient_ids)
        for fold in folds:
            assert not set(fold.train_patient_ids) & set(fold.test_patient_ids)
            assert (
                sorted(fold.train_patient_ids + fold.test_patient_ids)
                == sorted(cohort.manifest.patient_ids)
            )

    def test_deterministic_given_seed(self):
        m = two_strata_manifest()
        a = stratified_kfold(m, Task.MACROSCOPIC, k=5, seed=7)
        b = stratified_kfold(m, Task.MACROSCOPIC, k=5, seed=7)
        assert [f.test_patient_ids for f in a] == [f.test_patient_ids for f in b]

    def test_severity_task_drops_other_diagnosis(self):
        m = two_strata_manifest()
        folds = stratified_kfold(m, Task.SEVERITY_UC, k=5, seed=0)
        tested = {p for f in folds for p in f.test_patient_ids}
        assert all(p.startswith("pb") for p in tested)

    def test_too_few_patients(self):
        m = two_strata_manifest()
        with pytest.raises(ValueError, match="at least"):
            stratified_kfold(m, Task.SEVERITY_CD, k=6, seed=0)

    def test_proportions_638_patient_cohort(self):
        marginals = {
            "diagnosis": {"CD": 0.66, "UC": 0.34},
            "location": {"colon": 0.50, "ileum": 0.25, "rectum": 0.15,
                         "other": 0.10},
            "macroscopic": {"normal": 0.60, "erosions_ulcers": 0.15,
                            "inflammation": 0.25},
        }
        manifest = sample_cohort_manifest(638, marginals, seed=2)
        folds = stratified_kfold(manifest, Task.MACROSCOPIC, k=5, seed=1)
        tested = [p for f in folds for p in f.test_patient_ids]
        assert sorted(tested) == sorted(set(manifest.patient_ids))
        for fold in folds:
            for category, table in fold.stratification.items():
                for value, (cohort_p, train_p, test_p) in table.items():
                    if cohort_p * 638 >= 5:  # categories with >= k members
                        assert abs(train_p - cohort_p) <= 0.05
                        assert abs(test_p - cohort_p) <= 0.05


@pytest.fixture(scope="module")
def planted():
    cfg = SynthConfig(n_patients=20, n_slides=50, dim=12, bag_grid=(5, 5),
                      signal_strength=1.5, seed=21)
    return generate_cohort(cfg)


class TestCrossValidate:
    def test_planted_cohort_high_auroc(self, planted):
        cv = cross_validate(DsmilClassifier(epochs=40, learning_rate=3e-3),
                            planted.manifest,
                            Task.MACROSCOPIC, planted.bags, k=5, seed=0)
        assert len(cv.fold_results) == 5
        assert cv.mean_auroc >= 0.95
        payload = cv.to_json()
        assert payload["k"] == 5
        assert 0 <= payload["standard_error"]

    def test_worker_count_does_not_change_results(self, planted):
        est = DsmilClassifier(epochs=5)
        a = cross_validate(est, planted.manifest, Task.MACROSCOPIC,
                           planted.bags, k=3, seed=2, workers=1)
        b = cross_validate(est, planted.manifest, Task.MACROSCOPIC,
                           planted.bags, k=3, seed=2, workers=2)
        assert a.fold_aurocs == b.fold_aurocs
        sa, _ = a.all_scores()
        sb, _ = b.all_scores()
        assert sa == sb

    def test_missing_bag_detected(self, planted):
        bags = dict(planted.bags)
        bags.pop(sorted(bags)[0])
        with pytest.raises(ValueError, match="missing embedding bags"):
            cross_validate(DsmilClassifier(epochs=1), planted.manifest,
                           Task.MACROSCOPIC, bags, k=3, seed=0)

    def test_label_shuffled_cohort_near_chance(self, planted):
        shuffled = shuffle_task_labels(planted.manifest, Task.MACROSCOPIC,
                                       seed=5)
        cv = cross_validate(DsmilClassifier(epochs=10), shuffled,
                            Task.MACROSCOPIC, planted.bags, k=5, seed=0)
        assert 0.3 <= cv.mean_auroc <= 0.7  # generous band for a small cohort


class TestShuffleLabels:
    def test_patient_level_consistency(self, planted):
        shuffled = shuffle_task_labels(planted.manifest, Task.MACROSCOPIC,
                                       seed=3)
        for pid in shuffled.patient_ids:
            values = {r.macroscopic for r in shuffled.slides_of(pid)}
            assert len(values) == 1

    def test_label_multiset_preserved(self, planted):
        before = sorted(
            r.macroscopic.value for r in planted.manifest
        )
        shuffled = shuffle_task_labels(planted.manifest, Task.MACROSCOPIC,
                                       seed=3)
        # patients have uniform labels and equal slide counts is not
        # guaranteed, so compare at patient level
        from wsimil.manifest import patient_attribute

        def patient_values(m):
            return sorted(
                patient_attribute(m.slides_of(p), lambda r: r.macroscopic.value)
                for p in m.patient_ids
            )

        assert patient_values(shuffled) == patient_values(planted.manifest)

    def test_actually_changes_assignments(self, planted):
        shuffled = shuffle_task_labels(planted.manifest, Task.MACROSCOPIC,
                                       seed=3)
        assert any(
            a.macroscopic != b.macroscopic
            for a, b in zip(planted.manifest, shuffled)
        )


class TestMisclassificationReport:
    def test_perfect_model(self):
        scores = {"a": 0.9, "b": 0.8, "c": 0.1, "d": 0.2}
        labels = {"a": 1, "b": 1, "c": 0, "d": 0}
        rep = misclassification_report(scores, labels)
        assert rep.counts == {"tp": 2, "tn": 2, "fp": 0, "fn": 0}
        assert rep.confident_errors == []

    def test_inverted_model(self):
        scores = {"a": 0.1, "b": 0.2, "c": 0.9, "d": 0.8}
        labels = {"a": 1, "b": 1, "c": 0, "d": 0}
        rep = misclassification_report(scores, labels)
        assert rep.counts == {"tp": 0, "tn": 0, "fp": 2, "fn": 2}

    def test_planted_mislabels_rank_top(self, planted):
        labels = planted.manifest.labels(Task.MACROSCOPIC)
        ids = sorted(labels)
        bags = [planted.bags[s] for s in ids]
        est = DsmilClassifier(epochs=30, learning_rate=3e-3, seed=0).fit(
            bags, [labels[s] for s in ids]
        )
        probs = est.predict_proba(bags)[:, 1]
        scores = dict(zip(ids, probs))
        # plant two flipped labels among confidently-scored slides
        flipped = [
            sid for sid in ids
            if abs(scores[sid] - 0.5) > 0.4
        ][:2]
        noisy = dict(labels)
        for sid in flipped:
            noisy[sid] = 1 - noisy[sid]
        rep = misclassification_report(scores, noisy)
        top5 = {sid for sid, _, _ in rep.confident_errors[:5]}
        assert set(flipped) <= top5
