import pytest

from wsimil.errors import ManifestError
from wsimil.manifest import (
    BiopsyLocation,
    CohortManifest,
    Diagnosis,
    Macroscopic,
    SlideRecord,
    Task,
    derive_label,
    filter_manifest,
    load_manifest,
    save_manifest,
)

HEADER = (
    "slide_id,patient_id,diagnosis,macroscopic,biopsy_location,"
    "endoscopic_score,microns_per_pixel,image_path"
)


def write_csv(tmp_path, rows, header=HEADER):
    path = tmp_path / "manifest.csv"
    path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    return path


def record(slide="s1", patient="p1", diagnosis=Diagnosis.CD,
           macroscopic=Macroscopic.NORMAL, location=BiopsyLocation.COLON,
           score=0, mpp=0.25):
    return SlideRecord(slide, patient, diagnosis, macroscopic, location,
                       score, mpp, "")


class TestLoadManifest:
    def test_well_formed_three_rows(self, tmp_path):
        path = write_csv(tmp_path, [
            "s1,p1,CD,normal,ileum,0,0.25,a.tiff",
            "s2,p1,CD,erosions_ulcers,colon,3,0.25,b.tiff",
            "s3,p2,UC,inflammation,rectum,2,0.5,c.tiff",
        ])
        m = load_manifest(path)
        assert len(m) == 3
        assert m.record("s2").macroscopic is Macroscopic.EROSIONS_ULCERS
        assert m.record("s3").diagnosis is Diagnosis.UC
        assert m.record("s3").microns_per_pixel == 0.5

    def test_duplicate_slide_id_names_both_rows(self, tmp_path):
        path = write_csv(tmp_path, [
            "s1,p1,CD,normal,ileum,0,0.25,a.tiff",
            "s2,p1,CD,normal,ileum,0,0.25,b.tiff",
            "s1,p2,UC,normal,colon,0,0.25,c.tiff",
        ])
        with pytest.raises(ManifestError, match=r"duplicate slide_id 's1'.*1.*3"):
            load_manifest(path)

    def test_negative_score(self, tmp_path):
        path = write_csv(tmp_path, ["s1,p1,CD,normal,ileum,-1,0.25,a.tiff"])
        with pytest.raises(ManifestError, match="negative endoscopic_score"):
            load_manifest(path)

    def test_unparseable_score_names_row(self, tmp_path):
        path = write_csv(tmp_path, [
            "s1,p1,CD,normal,ileum,0,0.25,a.tiff",
            "s2,p1,CD,normal,ileum,high,0.25,b.tiff",
        ])
        with pytest.raises(ManifestError, match="row 2.*endoscopic_score"):
            load_manifest(path)

    def test_missing_column(self, tmp_path):
        path = write_csv(
            tmp_path,
            ["s1,p1,CD,normal,ileum,0,0.25"],
            header=HEADER.rsplit(",", 1)[0],
        )
        with pytest.raises(ManifestError, match="missing column"):
            load_manifest(path)

    def test_column_order_free(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(
            "patient_id,slide_id,image_path,diagnosis,macroscopic,"
            "biopsy_location,endoscopic_score,microns_per_pixel\n"
            "p1,s1,a.tiff,UC,normal,colon,0,0.25\n"
        )
        m = load_manifest(path)
        assert m.record("s1").patient_id == "p1"

    def test_invalid_diagnosis_value(self, tmp_path):
        path = write_csv(tmp_path, ["s1,p1,cd,normal,ileum,0,0.25,a.tiff"])
        with pytest.raises(ManifestError, match="invalid diagnosis 'cd'"):
            load_manifest(path)

    def test_round_trip(self, tmp_path):
        m = CohortManifest(records=(
            record("s1", "p1"),
            record("s2", "p2", diagnosis=Diagnosis.UC, score=4, mpp=0.5),
        ))
        path = tmp_path / "rt.csv"
        save_manifest(m, path)
        assert load_manifest(path) == m

    def test_mixed_diagnosis_patient_warns(self):
        with pytest.warns(UserWarning, match="differing diagnoses"):
            CohortManifest(records=(
                record("s1", "p1", diagnosis=Diagnosis.CD),
                record("s2", "p1", diagnosis=Diagnosis.UC),
            ))


class TestDeriveLabel:
    def test_lesional_class(self):
        rec = record(macroscopic=Macroscopic.EROSIONS_ULCERS)
        assert derive_label(rec, Task.MACROSCOPIC).label == 1
        rec = record(macroscopic=Macroscopic.INFLAMMATION)
        assert derive_label(rec, Task.MACROSCOPIC).label == 1
        rec = record(macroscopic=Macroscopic.NORMAL)
        assert derive_label(rec, Task.MACROSCOPIC).label == 0

    def test_severity_binarized_at_zero(self):
        assert derive_label(record(score=0), Task.SEVERITY_CD).label == 0
        assert derive_label(record(score=5), Task.SEVERITY_CD).label == 1

    def test_task_diagnosis_mismatch_excluded(self):
        assert derive_label(record(diagnosis=Diagnosis.CD), Task.SEVERITY_UC) is None
        assert derive_label(record(diagnosis=Diagnosis.UC), Task.SEVERITY_CD) is None

    def test_diagnosis_direction(self):
        assert derive_label(record(diagnosis=Diagnosis.CD), Task.DIAGNOSIS).label == 0
        assert derive_label(record(diagnosis=Diagnosis.UC), Task.DIAGNOSIS).label == 1

    def test_deterministic_and_total(self):
        recs = [
            record(f"s{i}", f"p{i}", diagnosis=d, macroscopic=m, score=s)
            for i, (d, m, s) in enumerate([
                (Diagnosis.CD, Macroscopic.NORMAL, 0),
                (Diagnosis.UC, Macroscopic.INFLAMMATION, 3),
                (Diagnosis.CD, Macroscopic.EROSIONS_ULCERS, 7),
            ])
        ]
        for rec in recs:
            for task in Task:
                assert derive_label(rec, task) == derive_label(rec, task)

    def test_diagnosis_labels_partition_counts(self):
        records = tuple(
            record(f"s{i}", f"p{i}",
                   diagnosis=Diagnosis.CD if i % 3 else Diagnosis.UC)
            for i in range(30)
        )
        m = CohortManifest(records=records)
        labels = m.labels(Task.DIAGNOSIS)
        n_cd = sum(1 for r in records if r.diagnosis is Diagnosis.CD)
        assert sum(1 for v in labels.values() if v == 0) == n_cd
        assert sum(1 for v in labels.values() if v == 1) == len(records) - n_cd


class TestFilters:
    def setup_method(self):
        self.manifest = CohortManifest(records=(
            record("s1", "p1", diagnosis=Diagnosis.CD, location=BiopsyLocation.ILEUM),
            record("s2", "p2", diagnosis=Diagnosis.UC, location=BiopsyLocation.COLON),
            record("s3", "p3", diagnosis=Diagnosis.UC, location=BiopsyLocation.ILEUM),
        ))

    def test_filter_by_diagnosis(self):
        sub = filter_manifest(self.manifest, {"diagnosis": "UC"})
        assert {r.slide_id for r in sub} == {"s2", "s3"}

    def test_filter_combination(self):
        sub = filter_manifest(self.manifest, {"diagnosis": "UC", "location": "ileum"})
        assert {r.slide_id for r in sub} == {"s3"}

    def test_filter_unknown_field(self):
        with pytest.raises(ManifestError, match="unknown filter field"):
            filter_manifest(self.manifest, {"flavour": "x"})

    def test_filter_empty_result(self):
        with pytest.raises(ManifestError, match="matched no slides"):
            filter_manifest(self.manifest, {"diagnosis": "UC", "location": "rectum"})
