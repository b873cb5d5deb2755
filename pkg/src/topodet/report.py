"""Result export: the metrics CSV, feature dumps, and rendered figures.

The CSV and feature dumps are the machine-readable record of a run and must
be byte-identical across repeat runs of the same config. Figures are a human
convenience rendered alongside them: a 2-D projection of the semantic
features against the anchor layout per task, and the metric trajectory across
tasks.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsRecord
from .topology import UNKNOWN_NAME

CSV_COLUMNS = ("task", "WI", "A-OSE", "mAP_prev", "mAP_curr", "mAP_both")


def _cell(value) -> str:
    """Empty for undefined; repr for floats (shortest round-trip, stable)."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path, records: Sequence[MetricsRecord]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for task, rec in enumerate(records, start=1):
            writer.writerow([task, _cell(rec.wi), _cell(rec.a_ose),
                             _cell(rec.map_prev), _cell(rec.map_curr),
                             _cell(rec.map_both)])


def write_feature_dump(path, rows: Sequence[tuple[str, np.ndarray, float]]) -> None:
    """Line-delimited (label, f_hat, own-anchor distance) records."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for label, f_hat, distance in rows:
            rec = {"label": label, "f_hat": [float(v) for v in f_hat],
                   "own_anchor_distance": float(distance)}
            fh.write(json.dumps(rec) + "\n")


def _project_2d(features: np.ndarray, anchors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shared PCA projection of features and anchor vectors onto 2 axes."""
    if features.shape[1] < 2:
        pad = np.zeros((len(features), 2 - features.shape[1]))
        return np.hstack([features, pad]), np.hstack(
            [anchors, np.zeros((len(anchors), 2 - anchors.shape[1]))])
    mu = features.mean(axis=0)
    centered = features - mu
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:2].T
    return centered @ basis, (anchors - mu) @ basis


def render_feature_figure(path, rows: Sequence[tuple[str, np.ndarray, float]],
                          anchor_vectors: dict[str, np.ndarray],
                          title: str = "semantic features") -> None:
    """Scatter of projected f_hat colored by label, anchors as stars."""
    if not rows:
        return
    labels = [label for label, _, _ in rows]
    feats = np.array([f for _, f, _ in rows], dtype=np.float64)
    anchor_names = list(anchor_vectors)
    anchor_mat = np.array([anchor_vectors[n] for n in anchor_names], dtype=np.float64)
    pts, anchor_pts = _project_2d(feats, anchor_mat)

    names = sorted(set(labels) | set(anchor_names),
                   key=lambda n: (n == UNKNOWN_NAME, n))
    cmap = plt.get_cmap("tab20")
    colors = {n: ("0.3" if n == UNKNOWN_NAME else cmap(i % 20))
              for i, n in enumerate(names)}

    fig, ax = plt.subplots(figsize=(7, 6))
    for name in names:
        idx = [i for i, lab in enumerate(labels) if lab == name]
        if idx:
            ax.scatter(pts[idx, 0], pts[idx, 1], s=10, alpha=0.5,
                       color=colors[name], label=name,
                       marker="x" if name == UNKNOWN_NAME else "o")
    for name, pt in zip(anchor_names, anchor_pts):
        ax.scatter([pt[0]], [pt[1]], marker="*", s=220, color=colors[name],
                   edgecolors="black", linewidths=0.8, zorder=5)
    ax.set_title(title)
    ax.legend(fontsize=8, loc="best")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_metrics_figure(path, records: Sequence[MetricsRecord]) -> None:
    """mAP splits, WI, and absorption count across the task sequence."""
    if not records:
        return
    tasks = np.arange(1, len(records) + 1)

    def series(attr):
        return [getattr(r, attr) for r in records]

    fig, (ax_map, ax_open) = plt.subplots(1, 2, figsize=(11, 4.5))
    for attr, label, style in (("map_prev", "mAP previous", "s--"),
                               ("map_curr", "mAP current", "^--"),
                               ("map_both", "mAP both", "o-")):
        values = series(attr)
        xs = [t for t, v in zip(tasks, values) if v is not None]
        ys = [v for v in values if v is not None]
        if xs:
            ax_map.plot(xs, ys, style, label=label)
    ax_map.set_xlabel("task")
    ax_map.set_ylabel("mAP@IoU")
    ax_map.set_ylim(-0.02, 1.02)
    ax_map.set_xticks(tasks)
    ax_map.legend()
    ax_map.set_title("known-class detection quality")

    wi_xs = [t for t, r in zip(tasks, records) if r.wi is not None]
    wi_ys = [r.wi for r in records if r.wi is not None]
    if wi_xs:
        ax_open.plot(wi_xs, wi_ys, "o-", color="tab:red", label="WI")
    ax_open.set_xlabel("task")
    ax_open.set_ylabel("wilderness impact", color="tab:red")
    ax_open.set_xticks(tasks)
    ax_aose = ax_open.twinx()
    ax_aose.bar(tasks, series("a_ose"), width=0.35, alpha=0.35,
                color="tab:blue", label="A-OSE")
    ax_aose.set_ylabel("absorbed unknowns", color="tab:blue")
    ax_open.set_title("open-set behavior")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
