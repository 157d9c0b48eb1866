"""Line straightness and face shape metrics, plus whole-dataset evaluation.

Both metrics are reported on a 0-100 scale where 100 means a perfect
correction. Annotated points live in distorted-image coordinates and are
mapped into the corrected frame by inverting the predicted flow before
scoring.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import invert_flow_at_points
from .model import MSUnet
from .synth import Sample

__all__ = ["MetricReport", "line_acc", "shape_acc", "evaluate_dataset", "flow_epe"]

logger = logging.getLogger(__name__)


def line_acc(corrected_points: np.ndarray, reference_endpoints: np.ndarray) -> float:
    """Slope similarity between a corrected line and its straight reference.

    Averages |segment slope - reference slope| over consecutive corrected
    points and reports 100 * (1 - average). Near-vertical references
    (|slope| > 1) are handled by rotating every point 90 degrees into a
    slope-safe frame first.
    """
    pts = np.asarray(corrected_points, dtype=np.float64)
    ref = np.asarray(reference_endpoints, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2 or ref.shape != (2, 2):
        raise ValueError(
            f"need >=3 corrected points and 2 reference endpoints, got {pts.shape}, {ref.shape}"
        )
    span = ref[1] - ref[0]
    if abs(span[1]) > abs(span[0]):  # rotate (x,y) -> (y,-x) so |slope| <= 1
        pts = np.stack([pts[:, 1], -pts[:, 0]], axis=1)
        ref = np.stack([ref[:, 1], -ref[:, 0]], axis=1)
        span = ref[1] - ref[0]
    if abs(span[0]) < 1e-9:
        raise ValueError("reference endpoints coincide")
    gaps = np.diff(pts[:, 0])
    if np.abs(gaps).min() < 1e-6:
        raise ValueError("corrected points have degenerate x-gaps")
    slopes = np.diff(pts[:, 1]) / gaps
    ref_slope = span[1] / span[0]
    return float(100.0 * (1.0 - np.abs(slopes - ref_slope).mean()))


def shape_acc(corrected_landmarks: np.ndarray, reference_landmarks: np.ndarray) -> float:
    """Cosine-weighted landmark similarity after centering and scale removal.

    Each landmark set is centered on its centroid and scaled to unit mean
    squared norm, then scored as 100 * mean(<g_i, d_i>), which equals
    100 * mean(|g_i| |d_i| cos theta_i). Identical sets give exactly 100;
    a 90-degree relative rotation gives 0.
    """
    cor = np.asarray(corrected_landmarks, dtype=np.float64)
    ref = np.asarray(reference_landmarks, dtype=np.float64)
    if cor.shape != ref.shape or cor.ndim != 2 or cor.shape[0] < 3 or cor.shape[1] != 2:
        raise ValueError(f"landmark sets must match with >=3 points, got {cor.shape}, {ref.shape}")

    def normalize(p):
        v = p - p.mean(axis=0)
        scale = np.sqrt((v**2).sum(axis=1).mean())
        if scale < 1e-9:
            raise ValueError("landmarks are degenerate (all points coincide)")
        return v / scale

    return float(100.0 * (normalize(ref) * normalize(cor)).sum(axis=1).mean())


def flow_epe(flow_pred: torch.Tensor, flow_gt: torch.Tensor) -> float:
    """Mean absolute flow error in pixels."""
    if flow_pred.shape != flow_gt.shape:
        raise ValueError(f"flow shapes differ: {flow_pred.shape} vs {flow_gt.shape}")
    return float((flow_pred - flow_gt).abs().mean())


@dataclass
class MetricReport:
    lineacc: float
    shapeacc: float
    epe: float
    per_sample: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "lineacc": self.lineacc,
            "shapeacc": self.shapeacc,
            "epe": self.epe,
            "per_sample": self.per_sample,
        }


def _sample_metrics(sample: Sample, flow: torch.Tensor) -> dict:
    record: dict = {"id": sample.id}
    if sample.flow_gt is not None:
        record["epe"] = flow_epe(flow, torch.from_numpy(sample.flow_gt).to(flow.dtype))
    if sample.lines:
        vals = []
        for line in sample.lines:
            pts, _ = invert_flow_at_points(flow, line.points.tolist())
            vals.append(line_acc(pts.numpy(), line.ref_endpoints))
        record["lineacc"] = float(np.mean(vals))
    if sample.faces:
        vals = []
        for facee in sample.faces:
            pts, _ = invert_flow_at_points(flow, facee.landmarks.tolist())
            vals.append(shape_acc(pts.numpy(), facee.ref_landmarks))
        record["shapeacc"] = float(np.mean(vals))
    return record


def evaluate_dataset(
    samples: list[Sample],
    model: MSUnet | None,
    flows: list[torch.Tensor] | None = None,
) -> MetricReport:
    """Score predicted flows over a dataset.

    Either a model (flows predicted per sample) or a precomputed flow list
    aligned with ``samples`` must be given. Samples without annotations are
    skipped for the line/shape averages with a logged warning; EPE averages
    over every sample that has ground truth.
    """
    if (model is None) == (flows is None):
        raise ValueError("pass exactly one of model or flows")
    per_sample = []
    for i, sample in enumerate(samples):
        if flows is not None:
            flow = flows[i]
        else:
            with torch.no_grad():
                flow, _ = model(torch.from_numpy(sample.distorted).float())
        if not sample.lines and not sample.faces and sample.flow_gt is None:
            logger.warning("sample %s has no annotations; skipped", sample.id)
            continue
        per_sample.append(_sample_metrics(sample, flow))

    def mean_of(key):
        vals = [r[key] for r in per_sample if key in r]
        return float(np.mean(vals)) if vals else float("nan")

    return MetricReport(
        lineacc=mean_of("lineacc"),
        shapeacc=mean_of("shapeacc"),
        epe=mean_of("epe"),
        per_sample=per_sample,
    )
