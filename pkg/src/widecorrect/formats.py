"""On-disk formats: Middlebury .flo flow files, PNG images and masks."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "DataFileError",
    "FLO_MAGIC",
    "write_flo",
    "read_flo",
    "write_image_png",
    "read_image_png",
    "write_mask_png",
    "read_mask_png",
    "write_seg_png",
]

FLO_MAGIC = 202021.25


class DataFileError(Exception):
    """A data file is missing, truncated, or otherwise malformed."""


def write_flo(path: str | os.PathLike, flow: np.ndarray) -> None:
    """Write a 2xHxW float flow to Middlebury .flo.

    Layout: float32 magic 202021.25, int32 width, int32 height, then
    row-major interleaved (dx, dy) float32 pairs. Little-endian throughout.
    """
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be 2xHxW, got {flow.shape}")
    _, h, w = flow.shape
    interleaved = np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4")
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        interleaved.tofile(f)


def read_flo(path: str | os.PathLike) -> np.ndarray:
    """Read a Middlebury .flo file back into a 2xHxW float32 array."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFileError(f"cannot read flow file {path}: {exc}") from exc
    if len(raw) < 12:
        raise DataFileError(f"flow file {path} is truncated (no header)")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise DataFileError(f"flow file {path} has bad magic {magic!r}")
    w, h = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise DataFileError(f"flow file {path} declares invalid size {w}x{h}")
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise DataFileError(
            f"flow file {path} is corrupt: expected {expected} bytes, found {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return np.ascontiguousarray(data.transpose(2, 0, 1))


def write_image_png(path: str | os.PathLike, image: np.ndarray) -> None:
    """Save a CxHxW float image in [0, 1] as an 8-bit PNG."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"image must be CxHxW with C in {{1,3}}, got {image.shape}")
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    PILImage.fromarray(arr).save(path)


def read_image_png(path: str | os.PathLike) -> np.ndarray:
    """Load a PNG as a CxHxW float32 image in [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB" if im.mode not in ("L", "I;16") else "L"))
    except (OSError, SyntaxError) as exc:
        raise DataFileError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32) / 255.0


def write_mask_png(path: str | os.PathLike, mask: np.ndarray) -> None:
    """Save an HxW binary mask as a single-channel PNG with raw 0/1 values."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be HxW, got {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    PILImage.fromarray(mask.astype(np.uint8), mode="L").save(path)


def read_mask_png(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, SyntaxError) as exc:
        raise DataFileError(f"cannot read mask {path}: {exc}") from exc
    if not np.isin(arr, (0, 1)).all():
        raise DataFileError(f"mask {path} holds values outside {{0,1}}")
    return arr.astype(np.uint8)


def write_seg_png(path: str | os.PathLike, seg: np.ndarray) -> None:
    """Save a 2xHxW segmentation mask (classes {0,1,2}) as one PNG.

    The two component masks sit side by side (H x 2W) with raw class values;
    a ``<path>.preview.png`` sidecar stores values x100 for visibility.
    """
    seg = np.asarray(seg)
    if seg.ndim != 3 or seg.shape[0] != 2:
        raise ValueError(f"seg mask must be 2xHxW, got {seg.shape}")
    if not np.isin(seg, (0, 1, 2)).all():
        raise ValueError("seg values must be in {0,1,2}")
    panel = np.concatenate([seg[0], seg[1]], axis=1).astype(np.uint8)
    PILImage.fromarray(panel, mode="L").save(path)
    preview = Path(str(path)).with_suffix(".preview.png")
    PILImage.fromarray(panel * 100, mode="L").save(preview)
