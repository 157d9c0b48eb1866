"""Synthetic wide-angle scenes with exact correction-flow ground truth.

A scene is an analytic color function (straight-line strokes, disk "faces",
smooth background) that can be evaluated at any real coordinate. Distortion
is a radial squeeze around a jittered center plus a gaussian bulge per face.
The stored per-pixel flow map is the single source of truth for the camera
geometry: annotation points are pushed through the bilinearly-interpolated
stored flow, and the distorted image is rendered through the numerically
inverted same map. Correcting with the ground-truth flow therefore recovers
annotations exactly and the image up to resampling error.

Dataset layout on disk: ``<id>.png`` (distorted image), ``<id>.flo`` (flow),
``<id>.mask.png`` (face mask), ``<id>.anno.json`` (lines, landmarks,
reference points, distortion params), ``manifest.json`` (version, ids,
labeled flags). Unlabeled samples store only the image.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import (
    DataFileError,
    read_flo,
    read_image_png,
    read_mask_png,
    write_flo,
    write_image_png,
    write_mask_png,
)

__all__ = [
    "Scene",
    "DistortionParams",
    "Sample",
    "LineAnno",
    "FaceAnno",
    "gen_scene",
    "random_params",
    "gen_distortion",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
]

MANIFEST_VERSION = 1
POINTS_PER_LINE = 32
LANDMARKS_PER_FACE = 16


@dataclass
class SceneLine:
    start: np.ndarray  # (2,) ideal endpoint
    end: np.ndarray  # (2,)
    contrast: np.ndarray  # (3,), subtracted at the stroke core
    sigma: float  # stroke half-width


@dataclass
class SceneFace:
    center: np.ndarray  # (2,)
    radius: float
    color: np.ndarray  # (3,)


@dataclass
class Scene:
    height: int
    width: int
    bg_base: np.ndarray  # (3,)
    bg_grad: np.ndarray  # (3, 2) per-channel horizontal/vertical slope
    lines: list[SceneLine]
    faces: list[SceneFace]

    def color_at(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Evaluate the scene color at real coordinates; returns (3, *shape)."""
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        u = xs / max(self.width - 1, 1)
        v = ys / max(self.height - 1, 1)
        out = (
            self.bg_base[:, None]
            + self.bg_grad[:, 0, None] * u.reshape(-1)[None]
            + self.bg_grad[:, 1, None] * v.reshape(-1)[None]
        )
        px = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=0)
        for line in self.lines:
            d = _segment_distance(px, line.start, line.end)
            out = out - line.contrast[:, None] * np.exp(-(d**2) / (2 * line.sigma**2))
        for facee in self.faces:
            d = np.hypot(px[0] - facee.center[0], px[1] - facee.center[1])
            alpha = 1.0 / (1.0 + np.exp((d - facee.radius) / 0.9))
            shade = facee.color[:, None] * (1.0 - 0.18 * (d / facee.radius) ** 2)
            out = out * (1 - alpha) + shade * alpha
        return np.clip(out, 0.0, 1.0).reshape((3,) + xs.shape)

    def render(self) -> np.ndarray:
        ys, xs = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return self.color_at(xs, ys)

    def line_points(self) -> list[np.ndarray]:
        """32 evenly spaced ideal points per line (exactly collinear)."""
        ts = np.linspace(0.0, 1.0, POINTS_PER_LINE)
        return [l.start[None] + ts[:, None] * (l.end - l.start)[None] for l in self.lines]

    def face_landmarks(self) -> list[np.ndarray]:
        """16 ideal landmarks per face: 12 on the boundary, 4 interior."""
        boundary = np.linspace(0.0, 2 * np.pi, 13)[:12]
        interior = np.deg2rad([45.0, 135.0, 225.0, 315.0])
        out = []
        for facee in self.faces:
            ring = facee.center[None] + facee.radius * np.stack(
                [np.cos(boundary), np.sin(boundary)], axis=1
            )
            inner = facee.center[None] + 0.5 * facee.radius * np.stack(
                [np.cos(interior), np.sin(interior)], axis=1
            )
            out.append(np.concatenate([ring, inner], axis=0))
        return out


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = ((px[0] - a[0]) * ab[0] + (px[1] - a[1]) * ab[1]) / (ab @ ab)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px[0] - (a[0] + t * ab[0]), px[1] - (a[1] + t * ab[1]))


def gen_scene(seed: int, size: tuple[int, int] = (48, 64)) -> Scene:
    """Deterministically generate a scene with straight lines and disk faces.

    ``size`` is (height, width); both must be multiples of 16 so every model
    stage keeps a whole number of windows.
    """
    h, w = size
    if h % 16 or w % 16:
        raise ValueError(f"scene size {h}x{w} must be a multiple of 16")
    rng = np.random.default_rng(seed)
    bg_base = rng.uniform(0.55, 0.8, 3)
    bg_grad = rng.uniform(-0.15, 0.15, (3, 2))

    lines = []
    margin = 2.0
    min_len = 0.6 * min(h, w)
    while len(lines) < rng.integers(3, 6):
        theta = rng.uniform(0, np.pi)
        direction = np.array([np.cos(theta), np.sin(theta)])
        anchor = np.array([rng.uniform(margin, w - 1 - margin), rng.uniform(margin, h - 1 - margin)])
        span = _clip_to_box(anchor, direction, margin, w - 1 - margin, margin, h - 1 - margin)
        if span is None:
            continue
        start, end = span
        if np.hypot(*(end - start)) < min_len:
            continue
        contrast = rng.uniform(0.3, 0.5) * rng.uniform(0.8, 1.0, 3)
        lines.append(SceneLine(start, end, contrast, sigma=rng.uniform(1.0, 1.3)))

    faces = []
    n_faces = int(rng.integers(1, 4))
    attempts = 0
    while len(faces) < n_faces and attempts < 200:
        attempts += 1
        radius = rng.uniform(0.11, 0.18) * min(h, w)
        cx = rng.uniform(radius + 4, w - 1 - radius - 4)
        cy = rng.uniform(radius + 4, h - 1 - radius - 4)
        if any(np.hypot(cx - f.center[0], cy - f.center[1]) < radius + f.radius + 2 for f in faces):
            continue
        color = np.array([0.85, 0.62, 0.5]) * rng.uniform(0.85, 1.1)
        faces.append(SceneFace(np.array([cx, cy]), radius, np.clip(color, 0, 1)))
    return Scene(h, w, bg_base, bg_grad, lines, faces)


def _clip_to_box(anchor, direction, x0, x1, y0, y1):
    """Intersect the infinite line anchor + t*direction with a box."""
    ts = []
    for dim, lo, hi in ((0, x0, x1), (1, y0, y1)):
        if abs(direction[dim]) > 1e-12:
            ts.extend([(lo - anchor[dim]) / direction[dim], (hi - anchor[dim]) / direction[dim]])
    inside = []
    for t in ts:
        p = anchor + t * direction
        if x0 - 1e-9 <= p[0] <= x1 + 1e-9 and y0 - 1e-9 <= p[1] <= y1 + 1e-9:
            inside.append(t)
    if len(inside) < 2:
        return None
    t_lo, t_hi = min(inside), max(inside)
    return anchor + t_lo * direction, anchor + t_hi * direction


@dataclass
class DistortionParams:
    """Radial squeeze + one gaussian bulge per scene face.

    ``k1``/``k2`` act on the radius normalized by the farthest-corner
    distance; ``face_bulge[i]`` is the dimensionless strength of face i's
    local bulge. The resulting warp must stay invertible (positive Jacobian
    everywhere), which :func:`gen_distortion` checks numerically.
    """

    k1: float
    k2: float
    center: tuple[float, float]
    face_bulge: tuple[float, ...] = ()

    def identity(self) -> bool:
        return self.k1 == 0 and self.k2 == 0 and all(b == 0 for b in self.face_bulge)


def random_params(scene: Scene, rng: np.random.Generator) -> DistortionParams:
    """Default-strength distortion: strong enough that the horizontal flow
    crosses the +/-5 px segmentation thresholds near both left and right
    corners, gentle enough that the flow stays a comfortable contraction
    (grid slope < 0.5) so fixed-point inversion converges tightly."""
    h, w = scene.height, scene.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    target = rng.uniform(5.3, 5.8) * (w / 64.0)
    for _ in range(50):
        center = (
            (w - 1) / 2 + rng.uniform(-1.5, 1.5),
            (h - 1) / 2 + rng.uniform(-1.5, 1.5),
        )
        # solve the radial strength against the weaker horizontal side
        rho_n = np.hypot(
            max(center[0], w - 1 - center[0]), max(center[1], h - 1 - center[1])
        )
        dy = max(center[1], h - 1 - center[1])
        ratio = rng.uniform(0.1, 0.2)
        k1 = 0.0
        for dx in (center[0], w - 1 - center[0]):
            u2 = (dx**2 + dy**2) / rho_n**2
            m_side = 1.0 - target / dx
            k1 = max(k1, (1.0 / m_side - 1.0) / (u2 + ratio * u2**2))
        bulges = tuple(rng.uniform(0.05, 0.1) * rng.choice([-1.0, 1.0]) for _ in scene.faces)
        params = DistortionParams(k1=k1, k2=k1 * ratio, center=center, face_bulge=bulges)
        flow = _forward_displacement(scene, params, xs, ys)
        slope = max(np.abs(np.diff(flow, axis=1)).max(), np.abs(np.diff(flow, axis=2)).max())
        if flow[0].max() >= 5.15 and flow[0].min() <= -5.15 and slope < 0.5:
            return params
    raise RuntimeError("could not sample default-strength distortion parameters")


def _forward_displacement(scene: Scene, params: DistortionParams, xs, ys):
    """Analytic ideal->distorted offsets at real coordinates (2, *shape)."""
    h, w = scene.height, scene.width
    cx, cy = params.center
    rel_x = xs - cx
    rel_y = ys - cy
    rho_n = max(np.hypot(max(cx, w - 1 - cx), max(cy, h - 1 - cy)), 1.0)
    r2 = (rel_x**2 + rel_y**2) / rho_n**2
    m = 1.0 / (1.0 + params.k1 * r2 + params.k2 * r2**2)
    gx = (m - 1.0) * rel_x
    gy = (m - 1.0) * rel_y
    for facee, beta in zip(scene.faces, params.face_bulge):
        fx = xs - facee.center[0]
        fy = ys - facee.center[1]
        sigma = 2.2 * facee.radius
        env = beta * np.exp(-(fx**2 + fy**2) / (2 * sigma**2))
        gx = gx + env * fx
        gy = gy + env * fy
    return np.stack([gx, gy])


def _bilinear_flow(flow: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample a 2xHxW grid field at real coordinates with clamped borders."""
    _, h, w = flow.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xs), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, h - 2).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    v00 = flow[:, y0, x0]
    v01 = flow[:, y0, x0 + 1]
    v10 = flow[:, y0 + 1, x0]
    v11 = flow[:, y0 + 1, x0 + 1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return top + fy * (bot - top)


def _invert_grid_map(flow: np.ndarray, qx: np.ndarray, qy: np.ndarray, iters: int = 60):
    """Solve x + flow(x) = q by fixed-point iteration, to machine tolerance."""
    px, py = qx.astype(np.float64).copy(), qy.astype(np.float64).copy()
    for _ in range(iters):
        f = _bilinear_flow(flow, px, py)
        nx = qx - f[0]
        ny = qy - f[1]
        delta = max(np.abs(nx - px).max(), np.abs(ny - py).max())
        px, py = nx, ny
        if delta < 1e-12:
            break
    return px, py


@dataclass
class LineAnno:
    points: np.ndarray  # (n, 2) distorted-image coords
    ref_endpoints: np.ndarray  # (2, 2) ideal endpoints of the straight line


@dataclass
class FaceAnno:
    landmarks: np.ndarray  # (n, 2) distorted-image coords
    ref_landmarks: np.ndarray  # (n, 2) ideal coords


@dataclass
class Sample:
    id: str
    distorted: np.ndarray  # (3, H, W) float32 in [0, 1]
    flow_gt: np.ndarray | None = None  # (2, H, W) float32
    face_mask: np.ndarray | None = None  # (H, W) uint8
    lines: list[LineAnno] = field(default_factory=list)
    faces: list[FaceAnno] = field(default_factory=list)
    params: dict | None = None

    @property
    def labeled(self) -> bool:
        return self.flow_gt is not None


def gen_distortion(scene: Scene, params: DistortionParams, sample_id: str = "sample") -> Sample:
    """Distort a scene and derive every label from one stored flow map."""
    h, w = scene.height, scene.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    flow = _forward_displacement(scene, params, xs, ys)

    # invertibility: Jacobian determinant of x + flow(x) on the pixel grid
    jxx = 1.0 + np.gradient(flow[0], axis=1)
    jxy = np.gradient(flow[0], axis=0)
    jyx = np.gradient(flow[1], axis=1)
    jyy = 1.0 + np.gradient(flow[1], axis=0)
    det = jxx * jyy - jxy * jyx
    if det.min() <= 0:
        raise ValueError(f"distortion params are not invertible (min Jacobian {det.min():.3f})")

    if params.identity():
        ideal_x, ideal_y = xs, ys
    else:
        ideal_x, ideal_y = _invert_grid_map(flow, xs, ys)
    distorted = scene.color_at(ideal_x, ideal_y)
    distorted = np.rint(distorted * 255.0) / 255.0  # 8-bit grid: PNG roundtrip is exact

    mask = np.zeros((h, w), dtype=np.uint8)
    for facee in scene.faces:
        d = np.hypot(ideal_x - facee.center[0], ideal_y - facee.center[1])
        mask[d <= facee.radius] = 1

    lines = []
    for pts in scene.line_points():
        moved = pts + _bilinear_flow(flow, pts[:, 0], pts[:, 1]).T
        lines.append(LineAnno(points=moved, ref_endpoints=pts[[0, -1]].copy()))
    faces = []
    for marks in scene.face_landmarks():
        moved = marks + _bilinear_flow(flow, marks[:, 0], marks[:, 1]).T
        faces.append(FaceAnno(landmarks=moved, ref_landmarks=marks.copy()))

    return Sample(
        id=sample_id,
        distorted=distorted.astype(np.float32),
        flow_gt=flow.astype(np.float32),
        face_mask=mask,
        lines=lines,
        faces=faces,
        params={
            "k1": params.k1,
            "k2": params.k2,
            "center": list(params.center),
            "face_bulge": list(params.face_bulge),
        },
    )


def generate_dataset(
    count: int,
    seed: int,
    size: tuple[int, int] = (48, 64),
    labeled_frac: float = 1.0,
    id_prefix: str = "sample",
) -> list[Sample]:
    """Generate ``count`` samples; the first round(labeled_frac*count) keep labels."""
    rng = np.random.default_rng(seed)
    n_labeled = int(round(labeled_frac * count))
    samples = []
    for i in range(count):
        scene = gen_scene(int(rng.integers(0, 2**31)), size)
        params = random_params(scene, rng)
        sample = gen_distortion(scene, params, sample_id=f"{id_prefix}_{i:05d}")
        if i >= n_labeled:
            sample = Sample(id=sample.id, distorted=sample.distorted)
        samples.append(sample)
    return samples


def write_dataset(samples: list[Sample], directory: str | os.PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"version": MANIFEST_VERSION, "samples": []}
    for s in samples:
        write_image_png(directory / f"{s.id}.png", s.distorted)
        if s.labeled:
            write_flo(directory / f"{s.id}.flo", s.flow_gt)
            write_mask_png(directory / f"{s.id}.mask.png", s.face_mask)
            anno = {
                "lines": [
                    {"points": l.points.tolist(), "ref_endpoints": l.ref_endpoints.tolist()}
                    for l in s.lines
                ],
                "faces": [
                    {
                        "landmarks": f.landmarks.tolist(),
                        "ref_landmarks": f.ref_landmarks.tolist(),
                    }
                    for f in s.faces
                ],
                "params": s.params,
            }
            (directory / f"{s.id}.anno.json").write_text(json.dumps(anno))
        manifest["samples"].append({"id": s.id, "labeled": s.labeled})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def _read_sample(directory: Path, sample_id: str, labeled: bool) -> Sample:
    sample = Sample(id=sample_id, distorted=read_image_png(directory / f"{sample_id}.png"))
    if not labeled:
        return sample
    sample.flow_gt = read_flo(directory / f"{sample_id}.flo")
    sample.face_mask = read_mask_png(directory / f"{sample_id}.mask.png")
    anno_path = directory / f"{sample_id}.anno.json"
    try:
        anno = json.loads(anno_path.read_text())
    except OSError as exc:
        raise DataFileError(f"cannot read annotations {anno_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataFileError(f"annotations {anno_path} are malformed: {exc}") from exc
    sample.lines = [
        LineAnno(np.asarray(l["points"]), np.asarray(l["ref_endpoints"])) for l in anno["lines"]
    ]
    sample.faces = [
        FaceAnno(np.asarray(f["landmarks"]), np.asarray(f["ref_landmarks"]))
        for f in anno["faces"]
    ]
    sample.params = anno.get("params")
    return sample


def read_dataset(directory: str | os.PathLike) -> list[Sample]:
    """Load a dataset directory written by :func:`write_dataset`."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise DataFileError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataFileError(f"manifest {manifest_path} is malformed: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataFileError(
            f"manifest {manifest_path} has unsupported version {manifest.get('version')!r}"
        )
    workers = int(os.environ.get("WIDECORRECT_NUM_WORKERS", "1"))
    entries = manifest["samples"]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(
                pool.map(lambda e: _read_sample(directory, e["id"], e["labeled"]), entries)
            )
    return [_read_sample(directory, e["id"], e["labeled"]) for e in entries]
