"""Flow-map primitives: thresholding, warping, inversion, sobel, weight masks.

Conventions used throughout the package:

* a flow map is a ``2 x H x W`` float tensor of backward-sampling offsets in
  pixels (channel 0 = horizontal dx, channel 1 = vertical dy): the corrected
  image fetches ``corrected(p) = distorted(p + flow(p))``;
* images are ``C x H x W`` floats in ``[0, 1]``;
* segmentation masks are ``2 x H x W`` integer tensors with classes {0, 1, 2},
  one 3-class mask per flow component;
* out-of-frame sample coordinates are clamped to the image border.
"""

from __future__ import annotations

import torch

__all__ = [
    "flow_to_seg",
    "warp_image",
    "invert_flow_at_points",
    "sobel",
    "make_weight_mask",
    "check_flow",
    "check_image",
]


def check_flow(flow: torch.Tensor, allow_batch: bool = False) -> None:
    """Reject tensors that are not finite 2xHxW flow maps (optionally batched)."""
    ok_dims = (3, 4) if allow_batch else (3,)
    if flow.ndim not in ok_dims or flow.shape[-3] != 2:
        raise ValueError(f"flow must have shape (B x )2xHxW, got {tuple(flow.shape)}")
    if not torch.isfinite(flow).all():
        raise ValueError("flow contains non-finite entries")


def check_image(image: torch.Tensor) -> None:
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"image must have shape CxHxW with C in {{1,3}}, got {tuple(image.shape)}")


def flow_to_seg(flow: torch.Tensor, delta: float) -> torch.Tensor:
    """Threshold a flow map into per-component 3-class masks.

    Class 0: offset <= -delta, class 1: offset in (-delta, delta),
    class 2: offset >= delta. Both boundaries are inclusive.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    check_flow(flow, allow_batch=True)
    seg = torch.ones_like(flow, dtype=torch.long)
    seg[flow <= -delta] = 0
    seg[flow >= delta] = 2
    return seg


def _bilinear_sample(field: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Sample a CxHxW field at real coordinates, clamped to the border.

    ``xs``/``ys`` share an arbitrary shape; the result is C x that shape.
    Exact (bit-for-bit) at integer coordinates.
    """
    _, h, w = field.shape
    xs = xs.clamp(0.0, w - 1.0)
    ys = ys.clamp(0.0, h - 1.0)
    x0 = xs.floor().clamp(0, w - 2) if w > 1 else torch.zeros_like(xs)
    y0 = ys.floor().clamp(0, h - 2) if h > 1 else torch.zeros_like(ys)
    wx = xs - x0
    wy = ys - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    v00 = field[:, y0, x0]
    v01 = field[:, y0, x1]
    v10 = field[:, y1, x0]
    v11 = field[:, y1, x1]
    top = v00 + wx * (v01 - v00)
    bot = v10 + wx * (v11 - v10)
    return top + wy * (bot - top)


def warp_image(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp an image: output(p) = bilinear sample of image at p + flow(p)."""
    if image.ndim != 3:
        raise ValueError(f"image must be CxHxW, got {tuple(image.shape)}")
    check_flow(flow)
    if image.shape[1:] != flow.shape[1:]:
        raise ValueError(
            f"image {tuple(image.shape[1:])} and flow {tuple(flow.shape[1:])} sizes differ"
        )
    _, h, w = image.shape
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=flow.dtype, device=flow.device),
        torch.arange(w, dtype=flow.dtype, device=flow.device),
        indexing="ij",
    )
    return _bilinear_sample(image, xs + flow[0], ys + flow[1])


def invert_flow_at_points(
    flow: torch.Tensor,
    points: list[tuple[float, float]] | torch.Tensor,
    max_iter: int = 25,
    tol: float = 0.01,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Map distorted-image points into the corrected frame.

    For each query q finds p with p + flow(p) = q by fixed-point iteration
    p <- q - flow(p). Iterates up to ``max_iter`` times (stopping early only
    once the update falls below 1e-9 px, far inside ``tol``); the returned
    flag marks points whose final update was below ``tol`` pixels.

    Returns ``(points_nx2, converged_n)``.
    """
    check_flow(flow)
    q = torch.as_tensor(points, dtype=flow.dtype, device=flow.device).reshape(-1, 2)
    p = q.clone()
    step = torch.full((q.shape[0],), float("inf"), dtype=flow.dtype, device=flow.device)
    with torch.no_grad():
        for _ in range(max_iter):
            f = _bilinear_sample(flow, p[:, 0], p[:, 1])
            p_next = q - f.T
            step = (p_next - p).norm(dim=1)
            p = p_next
            if float(step.max()) < 1e-9:
                break
    return p, step < tol


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel(field: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Horizontal and vertical sobel responses of a KxHxW field.

    Cross-correlates each channel with Gx = [[-1,0,1],[-2,0,2],[-1,0,1]] and
    Gy = Gx^T under replicate padding, so a horizontal unit ramp answers 8
    in Gx and 0 in Gy on the interior.
    """
    if field.ndim != 3:
        raise ValueError(f"field must be KxHxW, got {tuple(field.shape)}")
    k, h, w = field.shape
    if h < 3 or w < 3:
        raise ValueError(f"field spatial size must be at least 3x3, got {h}x{w}")
    gx = _SOBEL_X.to(dtype=field.dtype, device=field.device).view(1, 1, 3, 3)
    gy = gx.transpose(-1, -2)
    padded = torch.nn.functional.pad(field.unsqueeze(1), (1, 1, 1, 1), mode="replicate")
    out_x = torch.nn.functional.conv2d(padded, gx).squeeze(1)
    out_y = torch.nn.functional.conv2d(padded, gy).squeeze(1)
    return out_x, out_y


def make_weight_mask(
    face_mask: torch.Tensor, w_face: float = 3.0, w_bg: float = 1.0
) -> torch.Tensor:
    """Per-pixel loss weights: ``w_face`` on portrait pixels, ``w_bg`` elsewhere."""
    if face_mask.ndim != 2:
        raise ValueError(f"face mask must be HxW, got {tuple(face_mask.shape)}")
    fm = face_mask.float()
    if not torch.logical_or(fm == 0, fm == 1).all():
        raise ValueError("face mask must be binary (0/1)")
    if not w_face >= w_bg > 0:
        raise ValueError(f"weights must satisfy w_face >= w_bg > 0, got {w_face}, {w_bg}")
    return w_bg + (w_face - w_bg) * fm
