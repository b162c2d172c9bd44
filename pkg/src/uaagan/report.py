"""Report files: JSON documents, per-query tables, image grids and a Markdown summary."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .retrieval import CMC_KS, EvalReport, TransferMatrix

__all__ = ["write_eval", "read_eval", "write_transfer", "read_transfer", "save_grid", "render_summary"]


def write_eval(report: EvalReport, path, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    if extra:
        doc["run"] = extra
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "ap", "first_hit_rank"])
        for qid, ap, r in zip(report.query_ids, report.per_query_ap, report.first_hit_rank):
            w.writerow([qid, repr(ap), r])
    return path


def read_eval(path):
    doc = json.loads(Path(path).read_text())
    run = doc.pop("run", {})
    return EvalReport.from_dict(doc), run


def write_transfer(matrix: TransferMatrix, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(matrix.to_dict(), indent=1, sort_keys=True))
    return path


def read_transfer(path) -> TransferMatrix:
    doc = json.loads(Path(path).read_text())
    cells = {(c["source"], c["target"]): c["mAP"] for c in doc["cells"]}
    return TransferMatrix(doc["sources"], doc["targets"], cells, doc["clean"])


def save_grid(path, originals, deltas, adversarial, results, correct, epsilon, cell=64, pad=4):
    """One row per query: original, amplified perturbation, adversarial query, top results.

    ``results`` is ``[q, k, 3, h, w]``; ``correct`` is ``[q, k]`` booleans
    drawn as green (hit) or red (miss) frames.
    """
    from PIL import Image, ImageDraw

    q, k = correct.shape
    cols = 3 + k
    width = cols * (cell + pad) + pad + pad * 2
    height = q * (cell + pad) + pad
    canvas = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)

    def tile(arr):
        img = np.clip(np.asarray(arr).transpose(1, 2, 0), 0, 1)
        return Image.fromarray((img * 255).round().astype(np.uint8)).resize((cell, cell), Image.NEAREST)

    for i in range(q):
        y = pad + i * (cell + pad)
        shown = [originals[i], np.asarray(deltas[i]) / (2 * epsilon) + 0.5, adversarial[i]]
        x = pad
        for j, arr in enumerate(shown):
            canvas.paste(tile(arr), (x, y))
            x += cell + pad
        x += pad * 2  # gap between the query columns and the results
        for j in range(k):
            canvas.paste(tile(results[i][j]), (x, y))
            color = (0, 170, 0) if correct[i, j] else (220, 0, 0)
            draw.rectangle([x, y, x + cell - 1, y + cell - 1], outline=color, width=3)
            x += cell + pad
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path)
    return path


def _fmt(v, digits=3):
    return "n/a" if v is None else f"{v:.{digits}f}"


def render_summary(run_dir) -> str:
    """Markdown summary of every report found under ``run_dir/reports``."""
    run_dir = Path(run_dir)
    reports = run_dir / "reports"
    lines = [f"# Attack report for `{run_dir.name}`", ""]
    target_doc = reports / "target.json"
    if target_doc.exists():
        t = json.loads(target_doc.read_text())
        lines += [f"Target training accuracy {_fmt(t.get('train_accuracy'))}, "
                  f"clean self-retrieval mAP {_fmt(t.get('clean_mAP'))}.", ""]
    evals = {}
    for p in sorted(reports.glob("eval-*.json")):
        rep, run = read_eval(p)
        evals[(run.get("variant"), run.get("row"))] = (rep, run)
    variants = sorted({v for v, _ in evals})
    order = [("original", "Original"), ("gaussian", "Gaussian noise"),
             ("uaa-gan", "UAA-GAN"), ("uaa-g", "UAA-G (no discriminator)")]
    for v in variants:
        lines += [f"## Target pooling: {v}", "",
                  "| Queries | mAP | " + " | ".join(f"CMC@{k}" for k in CMC_KS) + " | RMS(δ) | L∞(δ) |",
                  "|---|---|" + "---|" * len(CMC_KS) + "---|---|"]
        clean = evals.get((v, "original"))
        for key, label in order:
            if (v, key) not in evals:
                continue
            rep, _ = evals[(v, key)]
            cm = " | ".join(_fmt(rep.cmc.get(k)) for k in CMC_KS)
            lines.append(f"| {label} | {_fmt(rep.mAP)} | {cm} | {_fmt(rep.noise.get('rms'), 4)} "
                         f"| {_fmt(rep.noise.get('linf'), 4)} |")
        lines.append("")
        if clean:
            base = clean[0].mAP
            for key, label in order[1:]:
                if (v, key) in evals and base:
                    m = evals[(v, key)][0].mAP
                    lines.append(f"- {label}: mAP {_fmt(m)} = {_fmt(m / base, 2)} x original "
                                 f"(delta {_fmt(m - base)})")
        if (v, "uaa-gan") in evals and (v, "uaa-g") in evals:
            a, b = evals[(v, "uaa-gan")][0], evals[(v, "uaa-g")][0]
            lines.append(f"- Ablation: UAA-G minus UAA-GAN mAP = {_fmt(b.mAP - a.mAP)}; "
                         f"perturbation RMS {_fmt(a.noise.get('rms'), 4)} (GAN) vs "
                         f"{_fmt(b.noise.get('rms'), 4)} (no D)")
        lines.append("")
    tpath = reports / "transfer.json"
    if tpath.exists():
        m = read_transfer(tpath)
        lines += ["## Transfer (attacked mAP, rows = generator source, columns = evaluated target)", "",
                  "| Source | " + " | ".join(m.targets) + " |",
                  "|---|" + "---|" * len(m.targets)]
        for row in m.rows():
            lines.append(f"| {row[0]} | " + " | ".join(_fmt(v) for v in row[1:]) + " |")
        lines.append("")
    grids = sorted((run_dir / "grids").glob("*.png")) if (run_dir / "grids").exists() else []
    if grids:
        lines += ["## Example grids", ""] + [f"- `grids/{g.name}`" for g in grids] + [""]
    return "\n".join(lines)
