"""CSV output and matplotlib figures for finished runs.

The CSVs are the record; figures are re-derived from them and can be
regenerated at any time with ``fleetlab report <run_dir>``.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import numpy as np
import yaml

from .orchestrator import TRAINING_COLUMNS, _fmt
from .experiments import PROFILER_COLUMNS

METRICS_FILE = "metrics.csv"
PROFILER_FILE = "profiler.csv"
MANIFEST_FILE = "manifest.yaml"


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _fmt(row.get(c)) if not isinstance(row.get(c), str) else row[c]
                             for c in columns})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _float(value: str) -> float:
    return float(value) if value not in ("", None) else math.nan


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_accuracy(rows: list[dict], path, x_key: str = "update_index", x_label: str = "model updates"):
    plt = _pyplot()
    curves = defaultdict(list)
    for row in rows:
        if row["event"] == "eval":
            curves[row["run_id"]].append((_float(row[x_key]), _float(row["test_accuracy"])))
    fig, ax = plt.subplots(figsize=(6, 4))
    for run_id, pts in curves.items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, label=run_id)
    ax.set_xlabel(x_label)
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_class_recall(rows: list[dict], labels, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    curves = defaultdict(list)
    for row in rows:
        if row["event"] == "eval" and row["per_class_recall"]:
            recall = [_float(v) for v in row["per_class_recall"].split(";")]
            curves[row["run_id"]].append((int(row["update_index"]), recall))
    for run_id, pts in curves.items():
        for label in labels:
            ax.plot([p[0] for p in pts], [p[1][label] for p in pts], label=f"{run_id} class {label}")
    ax.set_xlabel("model updates")
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_weight_cdf(rows: list[dict], path):
    plt = _pyplot()
    per_run = defaultdict(list)
    for row in rows:
        if row["event"] == "update" and row["weight"]:
            per_run[row["run_id"]].append(_float(row["weight"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for run_id, weights in per_run.items():
        w = np.sort(weights)
        ax.step(w, np.arange(1, w.size + 1) / w.size, where="post", label=run_id)
    ax.set_xscale("log")
    ax.set_xlabel("gradient weight")
    ax.set_ylabel("CDF")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_profiler(rows: list[dict], path):
    plt = _pyplot()
    runs = sorted({row["run_id"] for row in rows})
    fig, axes = plt.subplots(1, len(runs), figsize=(5 * len(runs), 4), squeeze=False)
    for ax, run_id in zip(axes[0], runs):
        mine = [row for row in rows if row["run_id"] == run_id]
        key = "deviation_t" if mine[0]["deviation_t"] else "deviation_e"
        for predictor in ("iprof", "maui"):
            by_req = defaultdict(list)
            for row in mine:
                if row["predictor"] == predictor:
                    by_req[int(row["request_index"])].append(abs(_float(row[key])))
            xs = sorted(by_req)
            ax.plot(xs, [np.mean(by_req[x]) for x in xs], marker="o", label=predictor)
        ax.set_title(run_id, fontsize=9)
        ax.set_xlabel("request index")
        ax.set_ylabel(f"mean |{key}|")
        ax.set_yscale("log")
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_run(run_dir) -> list[Path]:
    """Draw every figure that applies to the run directory's CSVs."""
    run_dir = Path(run_dir)
    manifest = yaml.safe_load((run_dir / MANIFEST_FILE).read_text()) if (run_dir / MANIFEST_FILE).exists() else {}
    config = manifest.get("config", {})
    written = []
    metrics = read_csv(run_dir / METRICS_FILE) if (run_dir / METRICS_FILE).exists() else []
    if any(row["event"] == "eval" for row in metrics):
        path = run_dir / "accuracy.png"
        if config.get("kind") == "stream":
            plot_accuracy(metrics, path, "sim_time", "chunk")
        else:
            plot_accuracy(metrics, path)
        written.append(path)
    tail = (config.get("staleness") or {}).get("tail_labels") or []
    if tail and any(row["per_class_recall"] for row in metrics):
        path = run_dir / "recall_tail.png"
        plot_class_recall(metrics, tail, path)
        written.append(path)
    if any(row["event"] == "update" and row["weight"] for row in metrics):
        path = run_dir / "weights_cdf.png"
        plot_weight_cdf(metrics, path)
        written.append(path)
    if (run_dir / PROFILER_FILE).exists():
        prof = read_csv(run_dir / PROFILER_FILE)
        if prof and any(row["predictor"] == "maui" for row in prof):
            path = run_dir / "profiler_deviation.png"
            plot_profiler(prof, path)
            written.append(path)
    return written


__all__ = ["write_csv", "read_csv", "render_run", "TRAINING_COLUMNS", "PROFILER_COLUMNS"]
