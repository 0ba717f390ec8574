import json
from pathlib import Path

import pytest

from wsimil.cli import main


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def bag_cohort_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    code = run("synth", "--out", str(out), "--mode", "bags", "--patients", "10",
               "--slides", "24", "--dim", "16", "--seed", "3")
    assert code == 0
    return out


@pytest.fixture(scope="module")
def image_cohort_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("imgcohort")
    code = run("synth", "--out", str(out), "--mode", "images", "--patients", "6",
               "--slides", "8", "--dim", "16", "--seed", "5")
    assert code == 0
    return out


class TestSynth:
    def test_outputs_exist(self, bag_cohort_dir):
        assert (bag_cohort_dir / "manifest.csv").exists()
        assert (bag_cohort_dir / "cells.csv").exists()
        assert (bag_cohort_dir / "run.json").exists()
        bags = list((bag_cohort_dir / "bags").glob("*.bag"))
        assert len(bags) == 24
        truth = list((bag_cohort_dir / "truth").glob("*.npz"))
        assert len(truth) == 24

    def test_image_mode_writes_tile_dirs(self, image_cohort_dir):
        slides = list((image_cohort_dir / "slides").iterdir())
        assert len(slides) == 8
        assert (slides[0] / "slide.json").exists()

    def test_run_json_captures_config(self, bag_cohort_dir):
        payload = json.loads((bag_cohort_dir / "run.json").read_text())
        assert payload["config"]["slides"] == 24
        assert "version" in payload and "timestamp" in payload


class TestUsageAndErrors:
    def test_usage_error_exit_1(self, capsys):
        assert run("train", "--nope") == 1
        assert "usage error" in capsys.readouterr().err

    def test_missing_manifest_exit_2(self, tmp_path, capsys):
        code = run("qc", "--manifest", str(tmp_path / "none.csv"),
                   "--out", str(tmp_path / "qc"))
        assert code == 2
        assert "data error" in capsys.readouterr().err

    def test_train_without_embed_exit_2(self, bag_cohort_dir, tmp_path, capsys):
        code = run("train", "--manifest", str(bag_cohort_dir / "manifest.csv"),
                   "--bags", str(tmp_path / "missing_bags"),
                   "--task", "macroscopic", "--head", "dsmil",
                   "--out", str(tmp_path / "train"))
        assert code == 2
        assert "missing embedding bags" in capsys.readouterr().err

    def test_help_exits_zero(self, capsys):
        assert run("--help") == 0
        out = capsys.readouterr().out
        for sub in ("synth", "qc", "train", "pipeline", "report"):
            assert sub in out

    def test_env_seed_fallback(self, bag_cohort_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("WMK_SEED", "17")
        out = tmp_path / "split_env"
        assert run("split", "--manifest", str(bag_cohort_dir / "manifest.csv"),
                   "--task", "macroscopic", "--out", str(out)) == 0
        payload = json.loads((out / "splits.json").read_text())
        assert payload["seed"] == 17

    def test_config_file_defaults(self, bag_cohort_dir, tmp_path):
        cfg = tmp_path / "flags.toml"
        cfg.write_text('folds = 4\nseed = 9\n')
        out = tmp_path / "split_cfg"
        assert run("split", "--manifest", str(bag_cohort_dir / "manifest.csv"),
                   "--task", "macroscopic", "--out", str(out),
                   "--config", str(cfg)) == 0
        payload = json.loads((out / "splits.json").read_text())
        assert payload["k"] == 4
        assert payload["seed"] == 9


class TestSplit:
    def test_splits_json(self, bag_cohort_dir, tmp_path):
        out = tmp_path / "splits"
        assert run("split", "--manifest", str(bag_cohort_dir / "manifest.csv"),
                   "--task", "macroscopic", "--folds", "5",
                   "--out", str(out), "--seed", "0") == 0
        payload = json.loads((out / "splits.json").read_text())
        assert len(payload["folds"]) == 5
        tested = [p for f in payload["folds"] for p in f["test_patient_ids"]]
        assert len(tested) == len(set(tested)) == 10

    def test_filter_restricts(self, bag_cohort_dir, tmp_path):
        out = tmp_path / "splits_cd"
        assert run("split", "--manifest", str(bag_cohort_dir / "manifest.csv"),
                   "--task", "macroscopic", "--folds", "2",
                   "--filter", "diagnosis=CD", "--out", str(out)) == 0
        payload = json.loads((out / "splits.json").read_text())
        tested = [p for f in payload["folds"] for p in f["test_patient_ids"]]
        assert 0 < len(tested) < 10


@pytest.fixture(scope="module")
def trained_dir(bag_cohort_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "dsmil"
    code = run("train", "--manifest", str(bag_cohort_dir / "manifest.csv"),
               "--bags", str(bag_cohort_dir / "bags"),
               "--task", "macroscopic", "--head", "dsmil",
               "--epochs", "8", "--learning-rate", "0.003",
               "--folds", "3", "--seed", "0", "--out", str(out))
    assert code == 0
    return out


class TestTrainEvalAttention:
    def test_train_outputs(self, trained_dir):
        payload = json.loads((trained_dir / "cv_result.json").read_text())
        assert payload["k"] == 3
        assert len(payload["fold_aurocs"]) == 3
        for i in range(3):
            assert (trained_dir / f"fold{i}.ckpt").exists()
            meta = json.loads((trained_dir / f"fold{i}.json").read_text())
            assert meta["head_type"] == "dsmil"
            assert meta["task"] == "macroscopic"
        assert (trained_dir / "confusion.csv").exists()
        assert (trained_dir / "scores.csv").exists()

    def test_eval_with_filter(self, bag_cohort_dir, trained_dir, tmp_path):
        out = tmp_path / "eval_uc"
        code = run("eval", "--manifest", str(bag_cohort_dir / "manifest.csv"),
                   "--bags", str(bag_cohort_dir / "bags"),
                   "--train-dir", str(trained_dir),
                   "--filter", "diagnosis=UC", "--out", str(out))
        assert code == 0
        payload = json.loads((out / "eval_result.json").read_text())
        assert payload["filters"] == {"diagnosis": "UC"}
        assert payload["n_slides"] > 0

    def test_attention_maps(self, bag_cohort_dir, trained_dir, tmp_path):
        out = tmp_path / "att"
        code = run("attention", "--manifest", str(bag_cohort_dir / "manifest.csv"),
                   "--bags", str(bag_cohort_dir / "bags"),
                   "--train-dir", str(trained_dir), "--out", str(out))
        assert code == 0
        pngs = list(out.glob("attention_*.png"))
        csvs = list(out.glob("attention_*.csv"))
        assert len(pngs) == len(csvs) == 24

    def test_cells_and_hif(self, bag_cohort_dir, tmp_path):
        cells_out = tmp_path / "cells_maps"
        code = run("cells", "--manifest", str(bag_cohort_dir / "manifest.csv"),
                   "--cells", str(bag_cohort_dir / "cells.csv"),
                   "--bags", str(bag_cohort_dir / "bags"),
                   "--out", str(cells_out))
        assert code == 0
        assert (cells_out / "S0000_neutrophil.csv").exists()
        hif_out = tmp_path / "hif"
        code = run("hif", "--manifest", str(bag_cohort_dir / "manifest.csv"),
                   "--cells", str(bag_cohort_dir / "cells.csv"),
                   "--bags", str(bag_cohort_dir / "bags"),
                   "--out", str(hif_out))
        assert code == 0
        tests_csv = (hif_out / "hif_tests.csv").read_text().splitlines()
        assert tests_csv[0] == "feature,U,p,nA,nB,method"
        assert len(tests_csv) > 1


class TestQcStage:
    def test_qc_on_image_cohort(self, image_cohort_dir, tmp_path):
        out = tmp_path / "qc"
        code = run("qc", "--manifest", str(image_cohort_dir / "manifest.csv"),
                   "--out", str(out), "--workers", "2")
        assert code == 0
        summaries = list(out.glob("S*.json"))
        assert len(summaries) == 8
        payload = json.loads(summaries[0].read_text())
        assert payload["denominator"] == "tissue"

    def test_embed_requires_qc(self, image_cohort_dir, tmp_path, capsys):
        code = run("embed", "--manifest", str(image_cohort_dir / "manifest.csv"),
                   "--qc", str(tmp_path / "missing"),
                   "--out", str(tmp_path / "bags"))
        assert code == 2

    def test_tile_stage(self, image_cohort_dir, tmp_path):
        out = tmp_path / "tiles"
        code = run("tile", "--manifest", str(image_cohort_dir / "manifest.csv"),
                   "--out", str(out))
        assert code == 0
        plans = list(out.glob("S*.csv"))
        assert len(plans) == 8
        lines = plans[0].read_text().splitlines()
        assert lines[0] == "col,row"
        assert len(lines) > 1
