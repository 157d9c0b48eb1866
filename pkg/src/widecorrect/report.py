"""Evaluation reports: JSON, per-sample CSV, and rendered figures."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricReport

__all__ = ["write_report", "flow_figure", "metrics_figure", "history_figure"]

_FIELDS = ("id", "lineacc", "shapeacc", "epe")


def write_report(
    report: MetricReport,
    json_path: str | os.PathLike,
    csv_path: str | os.PathLike | None = None,
    figures_dir: str | os.PathLike | None = None,
) -> list[Path]:
    """Serialize a metric report; returns the paths written.

    ``csv_path`` gets the per-sample table; ``figures_dir`` gets PNG figures
    (score distributions per sample).
    """
    written = [Path(json_path)]
    Path(json_path).parent.mkdir(parents=True, exist_ok=True)
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=1))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=_FIELDS)
            writer.writeheader()
            for row in report.per_sample:
                writer.writerow({k: row.get(k, "") for k in _FIELDS})
        written.append(Path(csv_path))
    if figures_dir is not None:
        written.extend(metrics_figure(report, figures_dir))
    return written


def metrics_figure(report: MetricReport, out_dir: str | os.PathLike) -> list[Path]:
    """Render per-sample metric distributions to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    panels = [
        ("lineacc", "line accuracy", report.lineacc),
        ("shapeacc", "shape accuracy", report.shapeacc),
        ("epe", "end-point error [px]", report.epe),
    ]
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.2))
    for ax, (key, label, mean_val) in zip(axes, panels):
        vals = [r[key] for r in report.per_sample if key in r]
        if vals:
            ax.hist(vals, bins=min(20, max(5, len(vals) // 4)), color="#4878cf", alpha=0.85)
            ax.axvline(mean_val, color="k", linestyle="--", linewidth=1)
        ax.set_xlabel(label)
        ax.set_ylabel("samples")
    fig.tight_layout()
    path = out_dir / "metrics_hist.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    paths.append(path)
    return paths


def flow_figure(
    image: np.ndarray, flow: np.ndarray, out_path: str | os.PathLike, stride: int = 4
) -> Path:
    """Image with the correction flow drawn as a quiver field plus magnitude map."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _, h, w = flow.shape
    ys, xs = np.mgrid[0:h:stride, 0:w:stride]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].imshow(np.transpose(image, (1, 2, 0)))
    axes[0].quiver(
        xs, ys, flow[0, ::stride, ::stride], flow[1, ::stride, ::stride],
        angles="xy", scale_units="xy", scale=1.0, color="r", width=0.004,
    )
    axes[0].set_title("correction flow")
    axes[0].set_axis_off()
    mag = np.hypot(flow[0], flow[1])
    im = axes[1].imshow(mag, cmap="viridis")
    axes[1].set_title("|flow| [px]")
    axes[1].set_axis_off()
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def history_figure(history: list[dict], out_path: str | os.PathLike) -> Path:
    """Loss and validation-metric curves from a training history."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [h["epoch"] for h in history]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for key, label in (("loss_s", "supervised"), ("loss_u", "unsupervised")):
        pts = [(e, h[key]) for e, h in zip(epochs, history) if h.get(key) is not None]
        if pts:
            axes[0].plot(*zip(*pts), label=label)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[1].plot(epochs, [h["epe"] for h in history], color="#d65f5f")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("validation EPE [px]")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
