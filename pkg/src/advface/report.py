"""Aggregate metric JSON files into tables (JSON, CSV, markdown) and plots."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

ARCH_NAMES = {"resnet_style": "ResNet", "inception_style": "InceptionNet"}
LOSS_NAMES = {"sphereface": "SphereFace", "deepid": "DeepID"}
COLUMNS = ("attack", "name", "architecture", "n_models", "loss", "v_auc", "v_acc", "recall", "r1_acc")
HEADERS = ("Attack", "Name", "Architecture", "# Models", "Loss", "V-AUC", "V-Acc.", "Recall", "R1-Acc.")


def load_records(metrics_dir: str | Path) -> list[dict]:
    metrics_dir = Path(metrics_dir)
    if not metrics_dir.is_dir():
        return []
    return [json.loads(p.read_text()) for p in sorted(metrics_dir.glob("*.json"))
            if not p.name.endswith(".manifest.json")]


def table_rows(records: list[dict]) -> list[dict]:
    """One row per (attack, target set), merging verification and identification records."""
    rows: dict[tuple, dict] = {}
    for rec in records:
        key = (rec["attack"]["tag"], rec["target"])
        row = rows.setdefault(key, {
            "attack": rec["attack"]["tag"],
            "method": rec["attack"]["method"],
            "eps": rec["attack"]["eps"],
            "trained_on": rec["attack"]["trained_on"],
            "name": rec["target"],
            "architecture": ARCH_NAMES.get(rec["architecture"], rec["architecture"]),
            "n_models": rec["n_models"],
            "loss": LOSS_NAMES.get(rec["loss"], rec["loss"]),
            "v_auc": None, "v_acc": None, "recall": None, "r1_acc": None,
        })
        s = rec["summary"]
        if rec["task"] == "verification":
            row.update(v_auc=s["v_auc"], v_acc=s["v_acc"], recall=s["recall_pos"])
        else:
            row["r1_acc"] = s["rank1_acc"]
    return sorted(rows.values(), key=lambda r: (r["attack"] != "clean", r["attack"], r["name"]))


def _fmt(v, digits):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{v:.{digits}f}" if isinstance(v, float) else str(v)


def markdown_table(rows: list[dict]) -> str:
    digits = {"v_auc": 3, "v_acc": 1, "recall": 1, "r1_acc": 1}
    lines = ["| " + " | ".join(HEADERS) + " |", "|" + "---|" * len(HEADERS)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r[c], digits.get(c, 0)) for c in COLUMNS) + " |")
    return "\n".join(lines)


def transfer_grid(rows: list[dict], metric: str = "v_auc") -> tuple[list[str], list[str], list[list]]:
    """Attack (rows) x target model set (columns) matrix of one metric, clean row first."""
    attacks = list(dict.fromkeys(r["attack"] for r in rows))
    targets = list(dict.fromkeys(r["name"] for r in rows))
    lookup = {(r["attack"], r["name"]): r[metric] for r in rows}
    return attacks, targets, [[lookup.get((a, t)) for t in targets] for a in attacks]


def roc_curve(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-scores, kind="stable")
    lab = labels[order].astype(bool)
    tpr = np.concatenate([[0.0], np.cumsum(lab) / max(lab.sum(), 1)])
    fpr = np.concatenate([[0.0], np.cumsum(~lab) / max((~lab).sum(), 1)])
    return fpr, tpr


def plot_roc(score_files: list[Path], path: Path) -> Path | None:
    if not score_files:
        return None
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for f in score_files:
        data = np.load(f)
        fpr, tpr = roc_curve(data["scores"], data["labels"])
        ax.plot(fpr, tpr, label=f.stem.split("--", 1)[1].replace("--", " on "))
    ax.plot([0, 1], [0, 1], color="gray", lw=0.5, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_eps_sweep(rows: list[dict], path: Path) -> Path | None:
    """V-AUC against eps for every (method, target) with at least two eps values."""
    series: dict[tuple, list] = {}
    for r in rows:
        if r["eps"] is not None and r["v_auc"] is not None:
            series.setdefault((r["method"], r["name"]), []).append((r["eps"], r["v_auc"]))
    series = {k: sorted(v) for k, v in series.items() if len({e for e, _ in v}) >= 2}
    if not series:
        return None
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for (method, target), pts in sorted(series.items()):
        ax.plot([e for e, _ in pts], [v for _, v in pts], marker="o", label=f"{method.upper()} on {target}")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("V-AUC")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def build_report(metrics_dir: str | Path, out_dir: str | Path, timing_path: str | Path | None = None) -> dict:
    metrics_dir, out_dir = Path(metrics_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = table_rows(load_records(metrics_dir))
    (out_dir / "table.json").write_text(json.dumps(rows, indent=2) + "\n")
    with open(out_dir / "table.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(COLUMNS) + ["method", "eps", "trained_on"])
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "trained_on": "+".join(r["trained_on"])})
    parts = ["## Model sets and attacks", "", markdown_table(rows)]
    attacks, targets, grid = transfer_grid(rows)
    if len(attacks) > 1:
        parts += ["", "## V-AUC by attack (rows) and target (columns)", "",
                  "| Attack | " + " | ".join(targets) + " |", "|" + "---|" * (len(targets) + 1)]
        parts += ["| " + a + " | " + " | ".join(_fmt(v, 3) for v in line) + " |" for a, line in zip(attacks, grid)]
    timing = None
    if timing_path and Path(timing_path).exists():
        timing = json.loads(Path(timing_path).read_text())["seconds_per_image"]
        parts += ["", "## Wall-clock seconds per image", "", "| Method | Seconds |", "|---|---|"]
        parts += [f"| {k} | {v:.3e} |" for k, v in timing.items()]
    markdown = "\n".join(parts) + "\n"
    (out_dir / "report.md").write_text(markdown)
    plots = [p for p in (
        plot_roc(sorted((metrics_dir / "scores").glob("*.npz")), out_dir / "roc.png"),
        plot_eps_sweep(rows, out_dir / "eps_sweep.png"),
    ) if p is not None]
    return {"rows": rows, "markdown": markdown, "plots": [str(p) for p in plots], "timing": timing}
