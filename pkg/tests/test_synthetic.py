import numpy as np
import pytest

from wsimil.manifest import Task
from wsimil.qc import ACCEPTED, ARTEFACT, BACKGROUND, run_slide_qc
from wsimil.synthetic import (
    SynthConfig,
    SyntheticSlide,
    generate_cohort,
    plant_artefacts,
    sample_cohort_manifest,
)


class TestBagCohorts:
    def test_same_seed_identical(self):
        cfg = SynthConfig(n_patients=8, n_slides=16, dim=8, bag_grid=(4, 4),
                          seed=9)
        a = generate_cohort(cfg)
        b = generate_cohort(cfg)
        assert a.manifest == b.manifest
        for sid in a.bags:
            np.testing.assert_array_equal(a.bags[sid].instances,
                                          b.bags[sid].instances)
        assert a.cells == b.cells

    def test_lesion_fraction_exact_on_10x10(self):
        cfg = SynthConfig(n_patients=4, n_slides=8, dim=8, bag_grid=(10, 10),
                          lesion_fraction=(0.1, 0.1), seed=2)
        cohort = generate_cohort(cfg)
        for sid, truth in cohort.truth.items():
            if truth.labels["macroscopic"] == 1:
                assert abs(int(truth.lesion_mask.sum()) - 10) <= 1

    def test_labels_match_planted_content(self):
        cohort = generate_cohort(SynthConfig(n_patients=10, n_slides=20, dim=8,
                                             bag_grid=(4, 4), seed=3))
        for sid, truth in cohort.truth.items():
            assert truth.labels["macroscopic"] == int(truth.lesion_mask.any())

    def test_zero_signal_strength_removes_separation(self):
        cfg = SynthConfig(n_patients=20, n_slides=40, dim=16, bag_grid=(5, 5),
                          signal_strength=0.0, seed=4)
        cohort = generate_cohort(cfg)
        labels = cohort.manifest.labels(Task.MACROSCOPIC)
        pos = np.concatenate([
            cohort.bags[s].instances.reshape(-1)
            for s, y in labels.items() if y == 1
        ])
        neg = np.concatenate([
            cohort.bags[s].instances.reshape(-1)
            for s, y in labels.items() if y == 0
        ])
        assert abs(float(pos.mean()) - float(neg.mean())) < 0.01
        assert abs(float(pos.std()) - float(neg.std())) < 0.01

    def test_cells_elevated_in_lesion_patches(self):
        cfg = SynthConfig(n_patients=6, n_slides=12, dim=8, bag_grid=(6, 6),
                          lesion_fraction=(0.2, 0.2), seed=5)
        cohort = generate_cohort(cfg)
        span = cfg.tile_size
        lesion_counts, normal_counts = [], []
        for sid, truth in cohort.truth.items():
            grid_counts = {}
            for s, x, y, cls in cohort.cells:
                if s != sid or cls != "neutrophil":
                    continue
                key = (int(x // span), int(y // span))
                grid_counts[key] = grid_counts.get(key, 0) + 1
            cols, rows = truth.grid_shape
            for r in range(rows):
                for c in range(cols):
                    count = grid_counts.get((c, r), 0)
                    if truth.lesion_mask[r, c]:
                        lesion_counts.append(count)
                    else:
                        normal_counts.append(count)
        assert np.mean(lesion_counts) > np.mean(normal_counts) + 2

    def test_signal_indicator_alignment(self):
        cohort = generate_cohort(SynthConfig(n_patients=4, n_slides=8, dim=8,
                                             bag_grid=(4, 4), seed=6))
        for sid, bag in cohort.bags.items():
            truth = cohort.truth[sid]
            ind = truth.signal_indicator(bag.coords)
            assert ind.sum() == truth.lesion_mask.sum()


class TestSyntheticSlides:
    def make_slide(self, **kw):
        cfg = SynthConfig(mode="images", n_patients=2, n_slides=2, dim=8,
                          bag_grid=(6, 6), lesion_fraction=(0.15, 0.15), seed=7,
                          **kw)
        cohort = generate_cohort(cfg)
        sid = sorted(cohort.slides)[0]
        return cfg, cohort, cohort.slides[sid]

    def test_read_region_position_stable(self):
        _, _, slide = self.make_slide()
        whole = slide.read_region(100, 150, 300, 200)
        part = slide.read_region(200, 200, 64, 64)
        np.testing.assert_array_equal(
            whole[50:114, 100:164], part,
        )

    def test_deterministic(self):
        _, _, a = self.make_slide()
        _, _, b = self.make_slide()
        np.testing.assert_array_equal(
            a.read_region(0, 0, 256, 256), b.read_region(0, 0, 256, 256)
        )

    def test_thumbnail_shows_tissue(self):
        _, _, slide = self.make_slide()
        thumb = slide.thumbnail(128)
        assert thumb.shape[0] <= 128 and thumb.shape[1] <= 128
        # center is tissue-pink, corners are background-white
        h, w = thumb.shape[:2]
        assert thumb[h // 2, w // 2, 0] > thumb[h // 2, w // 2, 1]
        assert thumb[0, 0].min() > 230

    def test_qc_reference_matches_planted(self):
        _, cohort, slide = self.make_slide()
        ref = slide.qc_reference()
        x0, y0, x1, y1 = slide.tissue_box
        assert (ref == BACKGROUND)[0, 0]
        assert np.all(ref[y0:y1, x0:x1] != BACKGROUND)
        planted, mask = plant_artefacts(slide, 0.25, seed=1)
        ref2 = planted.qc_reference()
        t = slide.tile_size
        frac = (ref2[y0:y1, x0:x1] == ARTEFACT).mean()
        assert frac == pytest.approx(0.25, abs=0.02)

    def test_plant_artefacts_fractions(self):
        _, _, slide = self.make_slide()
        planted, mask = plant_artefacts(slide, 0.0, seed=0)
        assert not mask.any()
        planted, mask = plant_artefacts(slide, 0.25, seed=0)
        assert mask.mean() == pytest.approx(0.25, abs=0.02)

    def test_planted_artefacts_drive_qc_exclusion(self):
        _, _, slide = self.make_slide()
        heavy, _ = plant_artefacts(slide, 0.55, seed=2)
        qc = run_slide_qc(heavy, "heavy", tile_size=224)
        assert qc.summary.excluded
        light, _ = plant_artefacts(slide, 0.45, seed=2)
        qc2 = run_slide_qc(light, "light", tile_size=224)
        assert not qc2.summary.excluded

    def test_smooth_artefacts_trip_blur_rule(self):
        _, _, slide = self.make_slide()
        planted, mask = plant_artefacts(slide, 0.3, seed=3, style="smooth")
        qc = run_slide_qc(planted, "smooth", tile_size=224)
        assert qc.summary.tissue_fraction_rejected == pytest.approx(0.3, abs=0.05)


class TestMarginalCohorts:
    def test_quota_exactness(self):
        marginals = {
            "diagnosis": {"CD": 0.66, "UC": 0.34},
            "location": {"colon": 0.5, "ileum": 0.25, "rectum": 0.15,
                         "other": 0.1},
            "macroscopic": {"normal": 0.6, "erosions_ulcers": 0.15,
                            "inflammation": 0.25},
        }
        manifest = sample_cohort_manifest(100, marginals, seed=0)
        patients = manifest.patient_ids
        assert len(patients) == 100
        diag = [manifest.slides_of(p)[0].diagnosis.value for p in patients]
        assert diag.count("CD") == 66
        loc = [manifest.slides_of(p)[0].biopsy_location.value for p in patients]
        assert loc.count("colon") == 50
        assert loc.count("other") == 10
