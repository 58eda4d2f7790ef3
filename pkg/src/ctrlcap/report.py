"""Report rendering: metric figures and delimited per-sample output.

Training and evaluation commands drop PNG figures next to their JSON/JSONL
artifacts so a run directory is self-describing.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_training_curves(rows: list[dict], path):
    """Loss/accuracy curves for the XE phase, reward curve for the RL phase."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xe = [r for r in rows if r.get("phase") == "xe" and r["split"] == "train"]
    val = [r for r in rows if r.get("phase") == "xe" and r["split"] == "val"]
    rl = [r for r in rows if r.get("phase") == "rl"]

    n_panels = 2 + bool(rl)
    fig, axes = plt.subplots(1, n_panels, figsize=(4.5 * n_panels, 3.5))
    axes = list(axes) if n_panels > 1 else [axes]

    ax = axes[0]
    if xe:
        ax.plot([r["epoch"] for r in xe], [r["xe_loss"] for r in xe], label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy loss")
    if xe:
        ax.legend(loc="best")

    ax = axes[1]
    if xe:
        ax.plot([r["epoch"] for r in xe], [r["token_acc"] for r in xe], label="token acc")
        ax.plot([r["epoch"] for r in xe], [r["gate_acc"] for r in xe], label="gate acc")
    if val:
        ax.plot([r["epoch"] for r in val], [r["cider_d"] for r in val], label="val CIDEr-D / 10",
                linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    if xe or val:
        ax.legend(loc="best")

    if rl:
        ax = axes[2]
        ax.plot([r["epoch"] for r in rl], [r["mean_greedy_reward"] for r in rl], label="greedy reward")
        ax.plot([r["epoch"] for r in rl], [r["mean_sampled_reward"] for r in rl], label="sampled reward")
        ax.set_xlabel("RL step")
        ax.set_ylabel("reward")
        ax.legend(loc="best")

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sorter_curves(rows: list[dict], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot([r["epoch"] for r in rows], [r["mse"] for r in rows])
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("reconstruction MSE")
    ax2.plot([r["epoch"] for r in rows], [r["accuracy"] for r in rows], label="accuracy")
    ax2.plot([r["epoch"] for r in rows], [r["tau"] for r in rows], label="Kendall tau")
    ax2.set_xlabel("epoch")
    ax2.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_figures(report: dict, path):
    """Per-sample metric histograms for an evaluation report."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics = ["cider_d", "nw", "iou"] + (["tau"] if report["mode"] == "set" else [])
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.5 * len(metrics), 3.2))
    for ax, name in zip(axes, metrics):
        vals = [row[name] for row in report["per_sample"]]
        ax.hist(vals, bins=20)
        ax.set_xlabel(name)
        if report.get(name) is not None:
            ax.axvline(report[name], color="crimson", linestyle="--")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_per_sample_csv(report: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = report["per_sample"]
    fields = list(rows[0].keys())
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
