"""Static HTML + CSV review bundle assembled from a pipeline run directory.

The bundle replaces an interactive review platform at desk scale: a CV
results table per head, the head-comparison t-test when both heads ran,
confusion lists, HIF test tables, and per-slide attention / cell-density
overlays referenced in place.
"""

from __future__ import annotations

import csv
import html
import json
from pathlib import Path

_STYLE = """
body { font-family: sans-serif; margin: 2em; color: #222; }
table { border-collapse: collapse; margin: 1em 0; }
td, th { border: 1px solid #999; padding: 4px 10px; text-align: left; }
th { background: #eee; }
img { image-rendering: pixelated; border: 1px solid #ccc; margin: 2px; }
h2 { margin-top: 1.6em; }
.small { color: #666; font-size: 0.85em; }
"""


def _table(rows, header) -> str:
    out = ["<table>", "<tr>" + "".join(f"<th>{html.escape(h)}</th>" for h in header) + "</tr>"]
    for row in rows:
        cells = "".join(f"<td>{html.escape(str(v))}</td>" for v in row)
        out.append(f"<tr>{cells}</tr>")
    out.append("</table>")
    return "\n".join(out)


def _read_csv(path: Path):
    with path.open() as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    return rows[0], rows[1:]


def build_report(run_dir: Path, out_dir: Path) -> Path:
    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = [f"<html><head><meta charset='utf-8'><title>wsimil report</title>"
             f"<style>{_STYLE}</style></head><body>"]
    parts.append("<h1>Run report</h1>")
    parts.append(f"<p class='small'>source run: {html.escape(str(run_dir))}</p>")

    summary_path = run_dir / "cv_result.json"
    cv_rows = []
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        for head, payload in sorted(summary.get("heads", {}).items()):
            cv_rows.append(
                (head, payload["task"],
                 f"{payload['mean_auroc']:.3f} ± {payload['standard_error']:.3f}",
                 ", ".join(f"{a:.3f}" for a in payload["fold_aurocs"]))
            )
        parts.append("<h2>Cross-validated AUROC</h2>")
        parts.append(_table(cv_rows, ("model", "task", "mean ± SE", "per fold")))
        if "paired_t_test_p" in summary:
            parts.append(
                f"<p>Two-tailed paired t-test between heads on fold AUROCs: "
                f"p = {summary['paired_t_test_p']:.4g}</p>"
            )

    for train_dir in sorted(run_dir.glob("train/*")):
        confusion = train_dir / "confusion.csv"
        if not confusion.exists():
            continue
        header, rows = _read_csv(confusion)
        counts = {}
        for row in rows:
            counts[row[-1]] = counts.get(row[-1], 0) + 1
        parts.append(f"<h2>Confusion — {html.escape(train_dir.name)}</h2>")
        parts.append(_table(
            [[counts.get(k, 0) for k in ("tp", "tn", "fp", "fn")]],
            ("TP", "TN", "FP", "FN"),
        ))
        errors = [r for r in rows if r[-1] in ("fp", "fn")]
        errors.sort(key=lambda r: -abs(float(r[2]) - 0.5))
        if errors:
            parts.append("<h3>Most confident errors</h3>")
            parts.append(_table(errors[:10], header))

    hif_tests = run_dir / "hif" / "hif_tests.csv"
    if hif_tests.exists():
        header, rows = _read_csv(hif_tests)
        rows.sort(key=lambda r: float(r[2]))
        parts.append("<h2>HIF group tests (score 0 vs &gt; 0)</h2>")
        parts.append(_table(rows, header))

    attention_pngs = sorted(run_dir.glob("attention/*/attention_*.png"))
    if attention_pngs:
        parts.append("<h2>Attention overlays</h2>")
        for png in attention_pngs[:40]:
            rel = png.relative_to(run_dir)
            parts.append(
                f"<figure style='display:inline-block'>"
                f"<img src='../{rel}' width='160'>"
                f"<figcaption class='small'>{html.escape(str(rel))}</figcaption>"
                f"</figure>"
            )

    cell_pngs = sorted(run_dir.glob("cells_maps/*_neutrophil.png"))
    if cell_pngs:
        parts.append("<h2>Neutrophil density maps</h2>")
        for png in cell_pngs[:20]:
            rel = png.relative_to(run_dir)
            parts.append(f"<img src='../{rel}' width='160' title='{html.escape(str(rel))}'>")

    parts.append("</body></html>")
    index = out_dir / "index.html"
    index.write_text("\n".join(parts))

    if cv_rows:
        lines = ["model,task,mean_auroc_se,per_fold"]
        for row in cv_rows:
            lines.append(",".join(f'"{v}"' for v in row))
        (out_dir / "cv_table.csv").write_text("\n".join(lines) + "\n")
    return index
