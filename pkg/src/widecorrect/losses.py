"""Training objectives: weighted flow regression, edge (sobel) matching,
segmentation cross-entropy, and the two consistency terms used on
unlabeled image pairs.

All losses reduce by mean over pixels and flow components, so their
magnitude is resolution-independent. Every function accepts either a
single sample (``2xHxW`` flow, ``HxW`` mask, ``2x3xHxW`` logits) or a
leading batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .geometry import flow_to_seg, make_weight_mask, sobel

__all__ = [
    "LossWeights",
    "loss_m1",
    "loss_ms",
    "loss_ce",
    "loss_supervised",
    "loss_unsupervised",
]


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the sobel and cross-entropy terms."""

    lambda1: float = 10.0
    lambda2: float = 10.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _expand_mask(mask: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    # HxW (or BxHxW) broadcast over the 2 flow channels
    if mask.shape != flow.shape[:-3] + flow.shape[-2:]:
        raise ValueError(
            f"mask shape {tuple(mask.shape)} does not match flow {tuple(flow.shape)}"
        )
    return mask.unsqueeze(-3)


def loss_m1(flow_pred: torch.Tensor, flow_ref: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Weighted L1 between flow maps: mean(|pred - ref| * M)."""
    _check_pair(flow_pred, flow_ref)
    return ((flow_pred - flow_ref).abs() * _expand_mask(weight, flow_pred)).mean()


def loss_ms(flow_pred: torch.Tensor, flow_ref: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Weighted L1 between sobel responses of the flow maps."""
    _check_pair(flow_pred, flow_ref)
    shape = flow_pred.shape
    diff = (flow_pred - flow_ref).reshape(-1, *shape[-2:])
    gx, gy = sobel(diff)
    edge = (gx.abs() + gy.abs()).reshape(shape)
    return (edge * _expand_mask(weight, flow_pred)).mean()


def loss_ce(seg_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Categorical cross-entropy of the two per-component 3-way classifiers.

    ``seg_logits``: (B,)2x3xHxW; ``target``: (B,)2xHxW with classes {0,1,2}.
    """
    if seg_logits.shape[-3] != 3 or seg_logits.shape[-4] != 2:
        raise ValueError(f"seg logits must be (B,)2x3xHxW, got {tuple(seg_logits.shape)}")
    if target.shape != seg_logits.shape[:-4] + (2,) + seg_logits.shape[-2:]:
        raise ValueError(
            f"target shape {tuple(target.shape)} does not match logits {tuple(seg_logits.shape)}"
        )
    if ((target < 0) | (target > 2)).any():
        raise ValueError("target classes must be in {0,1,2}")
    logits = seg_logits.reshape(-1, 3, *seg_logits.shape[-2:])
    return F.cross_entropy(logits, target.reshape(-1, *target.shape[-2:]))


def loss_supervised(
    flow_pred: torch.Tensor,
    seg_logits: torch.Tensor,
    flow_gt: torch.Tensor,
    face_mask: torch.Tensor,
    weights: LossWeights = LossWeights(),
    delta: float = 5.0,
    w_face: float = 3.0,
    w_bg: float = 1.0,
    include_ce: bool = True,
) -> torch.Tensor:
    """Labeled-image loss: L_m1 + lambda1 * L_ms + lambda2 * L_ce.

    The segmentation target is the ground-truth flow thresholded at
    ``delta``; the weight mask raises portrait pixels to ``w_face``.
    ``include_ce=False`` drops the segmentation term (flow-predictor
    pretraining).
    """
    if face_mask.ndim == flow_gt.ndim - 1:  # (B,)HxW
        flat = face_mask.reshape(-1, *face_mask.shape[-2:])
        mask = torch.stack([make_weight_mask(m, w_face, w_bg) for m in flat]).reshape(
            face_mask.shape
        )
    else:
        raise ValueError(f"face mask shape {tuple(face_mask.shape)} does not match flow")
    total = loss_m1(flow_pred, flow_gt, mask) + weights.lambda1 * loss_ms(
        flow_pred, flow_gt, mask
    )
    if include_ce:
        total = total + weights.lambda2 * loss_ce(seg_logits, flow_to_seg(flow_gt, delta))
    return total


def loss_unsupervised(
    flow1: torch.Tensor,
    flow2: torch.Tensor,
    seg_logits1: torch.Tensor,
    seg_logits2: torch.Tensor,
    weights: LossWeights = LossWeights(),
    delta: float = 5.0,
    use_rc: bool = True,
    use_drc: bool = True,
) -> torch.Tensor:
    """Unlabeled-pair loss: flow consistency between the two branches plus
    cross-entropy of each branch's segmentation against its own flow-derived
    pseudo-label.

    Pseudo-labels are constants (no gradient flows through the
    thresholding). The sobel consistency term shares the single lambda the
    two printed loss forms both set to 10. ``use_rc``/``use_drc`` switch the
    regression/segmentation consistency parts off for ablations.
    """
    ones = torch.ones(flow1.shape[:-3] + flow1.shape[-2:], dtype=flow1.dtype, device=flow1.device)
    total = flow1.new_zeros(())
    if use_rc:
        total = total + loss_m1(flow1, flow2, ones) + weights.lambda2 * loss_ms(flow1, flow2, ones)
    if use_drc:
        pseudo1 = flow_to_seg(flow1.detach(), delta)
        pseudo2 = flow_to_seg(flow2.detach(), delta)
        total = total + loss_ce(seg_logits1, pseudo1) + loss_ce(seg_logits2, pseudo2)
    return total
