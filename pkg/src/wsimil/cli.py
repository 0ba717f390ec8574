"""Command-line interface: one executable, one subcommand per pipeline
stage, plus an end-to-end runner.

Every run writes ``run.json`` (resolved configuration + tool version) into
its output directory. Exit codes: 0 success, 1 usage error, 2 data error
(malformed or missing inputs), 3 internal error. A flat key = value TOML
file passed with --config supplies defaults for any long flag; the
``WMK_SEED`` environment variable is the fallback seed.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, StageError
from .manifest import (
    CohortManifest,
    Task,
    filter_manifest,
    load_manifest,
    save_manifest,
)
from .estimators import make_estimator
from .evaluation import (
    cross_validate,
    misclassification_report,
    shuffle_task_labels,
    stratified_kfold,
)
from .stats import paired_t_test

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _env_seed() -> int:
    raw = os.environ.get("WMK_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"WMK_SEED must be an integer, got {raw!r}") from None


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (default: WMK_SEED or 0)")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel workers for fold training / tile QC")
    p.add_argument("--config", default=None,
                   help="flat key = value TOML file providing flag defaults")


def build_parser() -> _Parser:
    parser = _Parser(prog="wsimil", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    _add_common(p)
    p.add_argument("--mode", choices=["bags", "images"], default=None)
    p.add_argument("--patients", type=int, default=None)
    p.add_argument("--slides", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--signal-strength", type=float, default=None)

    p = sub.add_parser("tile", help="plan tissue tiles per slide")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tile-size", type=int, default=224)
    p.add_argument("--downsample", type=int, default=1, choices=[1, 2, 4, 8])

    p = sub.add_parser("qc", help="per-tile quality control and exclusion")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tile-size", type=int, default=224)
    p.add_argument("--downsample", type=int, default=1, choices=[1, 2, 4, 8])

    p = sub.add_parser("embed", help="encode kept tiles into embedding bags")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--qc", required=True, help="qc output directory")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--downsample", type=int, default=1, choices=[1, 2, 4, 8])

    p = sub.add_parser("split", help="patient-stratified fold assignment")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--filter", action="append", default=[],
                   metavar="FIELD=VALUE")

    p = sub.add_parser("train", help="cross-validated head training")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--bags", required=True, help="bag directory")
    p.add_argument("--qc", default=None, help="qc directory (drops excluded slides)")
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--head", required=True, choices=["dsmil", "transformer"])
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--region-factor", type=int, default=1)
    p.add_argument("--filter", action="append", default=[],
                   metavar="FIELD=VALUE")
    p.add_argument("--shuffle-labels", action="store_true",
                   help="patient-level label shuffle (null control)")

    p = sub.add_parser("eval", help="re-score stored fold models")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--bags", required=True)
    p.add_argument("--train-dir", required=True)
    p.add_argument("--filter", action="append", default=[],
                   metavar="FIELD=VALUE")

    p = sub.add_parser("attention", help="attention maps from fold models")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--bags", required=True)
    p.add_argument("--train-dir", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--annotations", default=None,
                   help="annotations.json for Dice scoring")

    p = sub.add_parser("cells", help="cell-density heatmaps from cells.csv")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cells", required=True)
    p.add_argument("--bags", required=True,
                   help="bag directory (provides grid geometry)")

    p = sub.add_parser("hif", help="cell statistics and group tests")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cells", required=True)
    p.add_argument("--qc", default=None,
                   help="qc directory (accepted-tissue areas)")
    p.add_argument("--bags", default=None,
                   help="fallback geometry when no qc directory exists")
    p.add_argument("--task", default=None,
                   choices=[Task.SEVERITY_CD.value, Task.SEVERITY_UC.value],
                   help="severity grouping; default: per-diagnosis runs")

    p = sub.add_parser("report", help="HTML + CSV review bundle")
    _add_common(p)
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("pipeline", help="synth -> qc -> embed -> train -> maps")
    _add_common(p)
    p.add_argument("--synth", default="default",
                   help="'default' or a synth TOML config")
    p.add_argument("--task", default=Task.MACROSCOPIC.value,
                   choices=[t.value for t in Task])
    p.add_argument("--heads", default="dsmil,transformer")
    p.add_argument("--folds", type=int, default=5)
    return parser


def _apply_config_defaults(args: argparse.Namespace, argv: list[str]):
    if not getattr(args, "config", None):
        return
    path = Path(args.config)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        values = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise DataError(f"{path}: invalid config: {exc}") from None
    for key, value in values.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise UsageError(f"{path}: unknown config key {key!r}")
        flag = "--" + key.replace("_", "-")
        explicit = any(tok == flag or tok.startswith(flag + "=") for tok in argv)
        if not explicit:
            setattr(args, dest, value)


def _write_run_json(out: Path, args: argparse.Namespace):
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k != "func"
    }
    payload = {
        "version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": resolved,
    }
    (out / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _parse_filters(pairs) -> dict:
    filters = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--filter expects FIELD=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        filters[key.strip()] = value.strip()
    return filters


def _load_filtered_manifest(args) -> CohortManifest:
    manifest = load_manifest(args.manifest)
    filters = _parse_filters(getattr(args, "filter", []))
    if filters:
        manifest = filter_manifest(manifest, filters)
    return manifest


def _open_record_slide(record, manifest_path: Path):
    from .slides import open_slide

    path = Path(record.image_path)
    if not path.is_absolute():
        path = manifest_path.parent / path
    return open_slide(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .slides import write_tile_directory
    from .synthetic import SynthConfig, generate_cohort, write_cells_csv

    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.patients:
        overrides["n_patients"] = args.patients
    if args.slides:
        overrides["n_slides"] = args.slides
    if args.dim:
        overrides["dim"] = args.dim
    if args.signal_strength is not None:
        overrides["signal_strength"] = args.signal_strength
    config = SynthConfig(seed=args.seed, **overrides)
    cohort = generate_cohort(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(cohort.manifest, out / "manifest.csv")
    write_cells_csv(cohort.cells, out / "cells.csv")
    truth_dir = out / "truth"
    truth_dir.mkdir(exist_ok=True)
    for sid, t in sorted(cohort.truth.items()):
        np.savez(
            truth_dir / f"{sid}.npz",
            lesion_mask=t.lesion_mask,
            artefact_mask=t.artefact_mask,
            grid_origin=np.array(t.grid_origin),
            labels=json.dumps(t.labels, sort_keys=True),
        )
    if config.mode == "bags":
        from .embeddings import write_bag

        for sid, bag in sorted(cohort.bags.items()):
            write_bag(bag, out / "bags" / f"{sid}.bag")
    else:
        for sid, slide in sorted(cohort.slides.items()):
            write_tile_directory(out / "slides" / sid, slide,
                                 tile_size=config.tile_size)
    _write_run_json(out, args)
    print(f"cohort: {len(cohort.manifest)} slides, "
          f"{len(cohort.manifest.patient_ids)} patients -> {out}")
    return 0


def cmd_tile(args) -> int:
    from .tiling import detect_tissue, plan_tiles

    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(args.manifest)
    for record in manifest:
        slide = _open_record_slide(record, manifest_path)
        width, height = slide.dims
        mask = detect_tissue(slide.thumbnail(1024))
        grid = plan_tiles(
            (width // args.downsample, height // args.downsample),
            args.tile_size, mask, args.downsample,
        )
        lines = ["col,row"] + [f"{c},{r}" for c, r in grid.tiles]
        (out / f"{record.slide_id}.csv").write_text("\n".join(lines) + "\n")
    meta = {"tile_size": args.tile_size, "downsample": args.downsample}
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    _write_run_json(out, args)
    print(f"planned tiles for {len(manifest)} slides -> {out}")
    return 0


def cmd_qc(args) -> int:
    from .qc import run_slide_qc, write_qc_outputs

    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    manifest_path = Path(args.manifest)
    excluded = []
    for record in manifest:
        slide = _open_record_slide(record, manifest_path)
        qc = run_slide_qc(slide, record.slide_id, tile_size=args.tile_size,
                          level_downsample=args.downsample,
                          workers=args.workers)
        write_qc_outputs(qc, out)
        if qc.summary.excluded:
            excluded.append(record.slide_id)
    _write_run_json(out, args)
    print(f"qc complete: {len(manifest)} slides, {len(excluded)} excluded "
          f"({excluded if excluded else 'none'})")
    return 0


def _qc_keep_flags(qc_dir: Path, slide_id: str):
    path = qc_dir / f"{slide_id}_patches.csv"
    if not path.exists():
        raise StageError(
            f"missing qc output for slide {slide_id}: run `wsimil qc` first"
        )
    keeps = {}
    with path.open() as fh:
        for row in csv.DictReader(fh):
            keeps[(int(row["col"]), int(row["row"]))] = row["keep"] == "1"
    return keeps


def _qc_summary(qc_dir: Path, slide_id: str):
    from .qc import QcSummary

    path = qc_dir / f"{slide_id}.json"
    if not path.exists():
        raise StageError(f"missing qc summary for slide {slide_id}")
    raw = json.loads(path.read_text())
    return QcSummary(
        slide_id=raw["slide_id"],
        tissue_fraction_rejected=raw["tissue_fraction_rejected"],
        excluded=raw["excluded"],
        background_fraction=raw["fractions"]["background"],
        accepted_fraction=raw["fractions"]["accepted"],
        artefact_fraction=raw["fractions"]["artefact"],
        n_patches=raw["n_patches"],
        tile_size=raw["tile_size"],
        level_downsample=raw["level_downsample"],
    )


def cmd_embed(args) -> int:
    from .embeddings import PseudoPatchEncoder, extract_bag, write_bag
    from .tiling import TileGrid

    manifest = load_manifest(args.manifest)
    qc_dir = Path(args.qc)
    if not qc_dir.exists():
        raise StageError(f"qc directory not found: {qc_dir}; run `wsimil qc`")
    out = Path(args.out)
    manifest_path = Path(args.manifest)
    encoder = PseudoPatchEncoder(dim=args.dim, seed=args.seed)
    skipped = []
    for record in manifest:
        summary = _qc_summary(qc_dir, record.slide_id)
        if summary.excluded:
            skipped.append(record.slide_id)
            continue
        keeps = _qc_keep_flags(qc_dir, record.slide_id)
        slide = _open_record_slide(record, manifest_path)
        width, height = slide.dims
        d = summary.level_downsample
        grid = TileGrid(
            (width // d, height // d), summary.tile_size, d,
            tuple(keeps.keys()),
        )
        bag = extract_bag(slide, record.slide_id, grid,
                          [keeps[t] for t in grid.tiles], encoder)
        write_bag(bag, out / f"{record.slide_id}.bag")
    _write_run_json(out, args)
    print(f"embedded {len(manifest) - len(skipped)} slides "
          f"({len(skipped)} excluded by qc) -> {out}")
    return 0


def _fold_payload(fold):
    return {
        "fold_index": fold.fold_index,
        "train_patient_ids": list(fold.train_patient_ids),
        "test_patient_ids": list(fold.test_patient_ids),
        "stratification": fold.stratification,
    }


def cmd_split(args) -> int:
    manifest = _load_filtered_manifest(args)
    folds = stratified_kfold(manifest, Task(args.task), k=args.folds,
                             seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "task": args.task,
        "k": args.folds,
        "seed": args.seed,
        "folds": [_fold_payload(f) for f in folds],
    }
    (out / "splits.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_run_json(out, args)
    print(f"{args.folds} folds over {len(manifest.patient_ids)} patients -> {out}")
    return 0


def _load_bags(bag_dir: Path, manifest: CohortManifest) -> dict:
    from .embeddings import read_bag

    if not bag_dir.exists():
        raise StageError(
            f"missing embedding bags: {bag_dir} does not exist; run `wsimil embed`"
        )
    bags = {}
    for record in manifest:
        path = bag_dir / f"{record.slide_id}.bag"
        if path.exists():
            bags[record.slide_id] = read_bag(path)
    if not bags:
        raise StageError(f"missing embedding bags under {bag_dir}")
    return bags


def _drop_slides_without_bags(manifest, bags, qc_dir):
    """Slides excluded by QC have no bags; restrict the manifest to covered
    slides so training matches the post-exclusion cohort."""
    if qc_dir is None:
        return manifest
    from .manifest import with_records

    kept = [r for r in manifest if r.slide_id in bags]
    if not kept:
        raise StageError("no slides remain after qc exclusion")
    return with_records(manifest, kept)


def cmd_train(args) -> int:
    manifest = _load_filtered_manifest(args)
    bags = _load_bags(Path(args.bags), manifest)
    manifest = _drop_slides_without_bags(manifest, bags, args.qc)
    if args.shuffle_labels:
        manifest = shuffle_task_labels(manifest, Task(args.task),
                                       seed=args.seed + 1)
    overrides = {"region_factor": args.region_factor} \
        if args.head == "transformer" else {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.learning_rate is not None:
        overrides["learning_rate"] = args.learning_rate
    estimator = make_estimator(args.head, **overrides)
    cv = cross_validate(estimator, manifest, Task(args.task), bags,
                        k=args.folds, seed=args.seed, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    folds = stratified_kfold(manifest, Task(args.task), k=args.folds,
                             seed=args.seed)
    splits_payload = {
        "task": args.task,
        "k": args.folds,
        "seed": args.seed,
        "folds": [_fold_payload(f) for f in folds],
    }
    (out / "splits.json").write_text(
        json.dumps(splits_payload, indent=2, sort_keys=True) + "\n"
    )
    for fr in cv.fold_results:
        fr.estimator.save_weights(out / f"fold{fr.fold_index}.ckpt")
        meta = {
            "head_type": args.head,
            "dim": int(fr.estimator.n_features_in_),
            "task": args.task,
            "fold": fr.fold_index,
            "seed": args.seed,
            "hyperparameters": fr.estimator.get_params(),
        }
        (out / f"fold{fr.fold_index}.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n"
        )
    (out / "cv_result.json").write_text(
        json.dumps(cv.to_json(), indent=2, sort_keys=True) + "\n"
    )
    scores, labels = cv.all_scores()
    lines = ["slide_id,label,score"]
    lines += [f"{sid},{labels[sid]},{scores[sid]!r}" for sid in sorted(scores)]
    (out / "scores.csv").write_text("\n".join(lines) + "\n")
    report = misclassification_report(scores, labels)
    lines = ["slide_id,label,score,outcome"]
    for name in ("tp", "tn", "fp", "fn"):
        for sid, score in getattr(report, name):
            lines.append(f"{sid},{labels[sid]},{score!r},{name}")
    (out / "confusion.csv").write_text("\n".join(lines) + "\n")
    _write_run_json(out, args)
    print(f"{args.head} {args.task}: mean AUROC "
          f"{cv.mean_auroc:.3f} ± {cv.standard_error:.3f} -> {out}")
    return 0


def _load_fold_models(train_dir: Path):
    splits_path = train_dir / "splits.json"
    if not splits_path.exists():
        raise StageError(f"{train_dir}: missing splits.json; run `wsimil train`")
    splits = json.loads(splits_path.read_text())
    models = {}
    for fold in splits["folds"]:
        idx = fold["fold_index"]
        meta_path = train_dir / f"fold{idx}.json"
        ckpt_path = train_dir / f"fold{idx}.ckpt"
        if not meta_path.exists() or not ckpt_path.exists():
            raise StageError(f"{train_dir}: missing fold {idx} checkpoint")
        meta = json.loads(meta_path.read_text())
        est = make_estimator(meta["head_type"], **meta["hyperparameters"])
        est.load_weights(ckpt_path)
        models[idx] = (est, set(fold["test_patient_ids"]))
    return splits, models


def _out_of_fold_model(models, patient_id):
    for est, test_patients in models.values():
        if patient_id in test_patients:
            return est
    return None


def cmd_eval(args) -> int:
    from .stats import auroc

    manifest = _load_filtered_manifest(args)
    bags = _load_bags(Path(args.bags), manifest)
    splits, models = _load_fold_models(Path(args.train_dir))
    task = Task(splits["task"])
    labels = manifest.labels(task)
    per_fold = {}
    scores = {}
    for record in manifest:
        sid = record.slide_id
        if sid not in labels or sid not in bags:
            continue
        model = _out_of_fold_model(models, record.patient_id)
        if model is None:
            continue
        score = float(model.predict_proba([bags[sid]])[0, 1])
        scores[sid] = score
        for idx, (est, test_patients) in models.items():
            if record.patient_id in test_patients:
                per_fold.setdefault(idx, {"scores": [], "labels": []})
                per_fold[idx]["scores"].append(score)
                per_fold[idx]["labels"].append(labels[sid])
    if not scores:
        raise StageError("no evaluable slides (check filters and bags)")
    fold_aurocs = {}
    for idx, data in sorted(per_fold.items()):
        if len(set(data["labels"])) == 2:
            fold_aurocs[idx] = auroc(data["scores"], data["labels"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    values = list(fold_aurocs.values())
    from .stats import standard_error

    payload = {
        "task": splits["task"],
        "filters": _parse_filters(args.filter),
        "n_slides": len(scores),
        "fold_aurocs": fold_aurocs,
        "mean_auroc": float(np.mean(values)) if values else None,
        "standard_error": standard_error(values) if len(values) > 1 else 0.0,
    }
    (out / "eval_result.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )
    _write_run_json(out, args)
    print(f"eval: {len(scores)} slides, mean AUROC {payload['mean_auroc']} -> {out}")
    return 0


def cmd_attention(args) -> int:
    from .embeddings import patch_grid, region_grid
    from .heatmaps import (
        dice,
        load_annotations,
        rasterize_annotation,
        rasterize_attention,
        save_attention_csv,
        save_attention_png,
        threshold_map,
    )

    manifest = load_manifest(args.manifest)
    bags = _load_bags(Path(args.bags), manifest)
    splits, models = _load_fold_models(Path(args.train_dir))
    annotations = load_annotations(args.annotations) if args.annotations else {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dice_rows = []
    written = 0
    for record in manifest:
        sid = record.slide_id
        if sid not in bags:
            continue
        model = _out_of_fold_model(models, record.patient_id)
        if model is None:
            continue
        bag = bags[sid]
        output = model.attention_output(bag)
        if model.head_name == "transformer":
            rbag = model.region_bag(bag)
            grid = region_grid(rbag)
        else:
            grid = patch_grid(bag)
        amap = rasterize_attention(output, grid, sid)
        save_attention_png(amap, out / f"attention_{sid}.png")
        save_attention_csv(amap, out / f"attention_{sid}.csv")
        written += 1
        if sid in annotations:
            annotated = rasterize_annotation(annotations[sid], grid)
            predicted = threshold_map(amap, args.threshold)
            dice_rows.append((sid, dice(predicted, annotated)))
    if dice_rows:
        lines = ["slide_id,dice"] + [f"{s},{d!r}" for s, d in dice_rows]
        (out / "annotation_dice.csv").write_text("\n".join(lines) + "\n")
    _write_run_json(out, args)
    print(f"attention maps for {written} slides -> {out}")
    return 0


def cmd_cells(args) -> int:
    from .heatmaps import AttentionMap, save_attention_png
    from .hif import CELL_CLASSES, cell_density_heatmap, load_cells_csv

    manifest = load_manifest(args.manifest)
    cells = load_cells_csv(args.cells)
    bags = _load_bags(Path(args.bags), manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    by_slide = {}
    for cell in cells:
        by_slide.setdefault(cell.slide_id, []).append(cell)
    from .embeddings import patch_grid

    for record in manifest:
        sid = record.slide_id
        if sid not in bags:
            continue
        grid = patch_grid(bags[sid])
        slide_cells = by_slide.get(sid, [])
        for cls in CELL_CLASSES:
            dm = cell_density_heatmap(slide_cells, grid, cls,
                                      record.microns_per_pixel, sid)
            lines = ["slide_id,col,row,count,density"]
            for r in range(dm.counts.shape[0]):
                for c in range(dm.counts.shape[1]):
                    lines.append(
                        f"{sid},{c},{r},{int(dm.counts[r, c])},"
                        f"{float(dm.densities[r, c])!r}"
                    )
            (out / f"{sid}_{cls}.csv").write_text("\n".join(lines) + "\n")
            peak = dm.densities.max()
            values = dm.densities / peak if peak > 0 else dm.densities
            amap = AttentionMap(sid, grid.level_downsample,
                                values.astype(np.float64), grid.tile_size)
            save_attention_png(amap, out / f"{sid}_{cls}.png")
    _write_run_json(out, args)
    print(f"cell heatmaps -> {out}")
    return 0


def cmd_hif(args) -> int:
    from .hif import (
        compute_hifs,
        hif_feature_tests,
        load_cells_csv,
        write_hif_report_csv,
        write_hif_tests_csv,
    )
    from .manifest import Diagnosis, derive_label

    manifest = load_manifest(args.manifest)
    cells = load_cells_csv(args.cells)
    by_slide = {}
    for cell in cells:
        by_slide.setdefault(cell.slide_id, []).append(cell)

    qc_dir = Path(args.qc) if args.qc else None
    bags = _load_bags(Path(args.bags), manifest) if args.bags else None
    if qc_dir is None and bags is None:
        raise UsageError("hif needs --qc or --bags for tissue-area geometry")

    from .qc import QcSummary

    hifs = []
    for record in manifest:
        sid = record.slide_id
        if qc_dir is not None and (qc_dir / f"{sid}.json").exists():
            summary = _qc_summary(qc_dir, sid)
        elif bags is not None and sid in bags:
            bag = bags[sid]
            summary = QcSummary(sid, 0.0, False, accepted_fraction=1.0,
                                n_patches=bag.n_instances,
                                tile_size=bag.tile_size,
                                level_downsample=bag.level_downsample)
        else:
            continue
        if summary.excluded:
            continue
        hifs.append(compute_hifs(by_slide.get(sid, []), summary,
                                 record.microns_per_pixel))
    out = Path(args.out)
    write_hif_report_csv(hifs, out / "hif_report.csv")

    tasks = [Task(args.task)] if args.task else [Task.SEVERITY_CD,
                                                 Task.SEVERITY_UC]
    all_rows = []
    for task in tasks:
        labels = manifest.labels(task)
        rows = hif_feature_tests(hifs, labels)
        suffix = task.value
        for row in rows:
            row.feature = f"{row.feature} [{suffix}]"
        all_rows.extend(rows)
    write_hif_tests_csv(all_rows, out / "hif_tests.csv")
    _write_run_json(out, args)
    print(f"hif report for {len(hifs)} slides, {len(all_rows)} tests -> {out}")
    return 0


def cmd_report(args) -> int:
    from .report import build_report

    run_dir = Path(args.run_dir)
    if not run_dir.exists():
        raise StageError(f"run directory not found: {run_dir}")
    out = Path(args.out)
    build_report(run_dir, out)
    _write_run_json(out, args)
    print(f"report -> {out / 'index.html'}")
    return 0


def cmd_pipeline(args) -> int:
    from types import SimpleNamespace

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def ns(**kw):
        base = {"seed": args.seed, "workers": args.workers, "config": None,
                "filter": []}
        base.update(kw)
        return SimpleNamespace(**base)

    synth_overrides = {}
    if args.synth not in (None, "default"):
        synth_path = Path(args.synth)
        if not synth_path.exists():
            raise DataError(f"synth config not found: {synth_path}")
        synth_overrides = tomllib.loads(synth_path.read_text())
    synth_defaults = {
        "mode": "images",
        "patients": 10,
        "slides": 20,
        "dim": 32,
        "signal_strength": 1.0,
    }
    synth_defaults.update(synth_overrides)
    cohort_dir = out / "cohort"
    cmd_synth(ns(out=str(cohort_dir), **synth_defaults))

    manifest_path = cohort_dir / "manifest.csv"
    qc_dir = out / "qc"
    cmd_qc(ns(out=str(qc_dir), manifest=str(manifest_path), tile_size=224,
              downsample=1))
    bags_dir = out / "bags"
    cmd_embed(ns(out=str(bags_dir), manifest=str(manifest_path),
                 qc=str(qc_dir), dim=synth_defaults["dim"], downsample=1))

    heads = [h.strip() for h in args.heads.split(",") if h.strip()]
    cv_payloads = {}
    for head in heads:
        train_dir = out / "train" / f"{args.task}_{head}"
        cmd_train(ns(out=str(train_dir), manifest=str(manifest_path),
                     bags=str(bags_dir), qc=str(qc_dir), task=args.task,
                     head=head, folds=args.folds, epochs=None,
                     learning_rate=None, region_factor=1,
                     shuffle_labels=False))
        cv_payloads[head] = json.loads((train_dir / "cv_result.json").read_text())
        attention_dir = out / "attention" / head
        cmd_attention(ns(out=str(attention_dir), manifest=str(manifest_path),
                         bags=str(bags_dir), train_dir=str(train_dir),
                         threshold=0.5, annotations=None))
    cmd_cells(ns(out=str(out / "cells_maps"), manifest=str(manifest_path),
                 cells=str(cohort_dir / "cells.csv"), bags=str(bags_dir)))
    cmd_hif(ns(out=str(out / "hif"), manifest=str(manifest_path),
               cells=str(cohort_dir / "cells.csv"), qc=str(qc_dir),
               bags=str(bags_dir), task=None))

    summary = {"task": args.task, "heads": cv_payloads}
    if len(heads) == 2:
        a, b = (cv_payloads[h]["fold_aurocs"] for h in heads)
        if len(a) == len(b) >= 2:
            summary["paired_t_test_p"] = paired_t_test(a, b)
    (out / "cv_result.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    cmd_report(SimpleNamespace(run_dir=str(out), out=str(out / "report"),
                               seed=args.seed, workers=args.workers,
                               config=None))
    _write_run_json(out, args)
    print(f"pipeline complete -> {out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "tile": cmd_tile,
    "qc": cmd_qc,
    "embed": cmd_embed,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "attention": cmd_attention,
    "cells": cmd_cells,
    "hif": cmd_hif,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(argv)
        _apply_config_defaults(args, list(argv))
        if getattr(args, "seed", None) is None:
            args.seed = _env_seed()
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse --help / --version
        code = exc.code if isinstance(exc.code, int) else 0
        return code
    except Exception as exc:  # noqa: BLE001 - the CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
