"""Sketch ingestion and the 2D/3D geometry connecting masks to field points.

Each sketch view carries a filled binary mask and a precomputed exact
Euclidean distance transform in normalized image units (pixels divided by
``max(H, W)``, so distances are resolution-independent). The per-view distance
of a 3D point is the squared normalized distance of its rounded projection to
the nearest mask pixel, with a monotone extension outside the frustum; the
multiview distance is the mean over views and drives the preservation weight
``w = 1 - exp(-D^2 / (2 beta^2))``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy import ndimage

from sketchfield.errors import (
    BehindCamera,
    ConfigError,
    EmptyIntersection,
    EmptySketchSet,
)
from sketchfield.errors import OpenCurve
from sketchfield.field import AABox
from sketchfield.render import Camera

# Unsquared normalized distance assigned to behind-camera projections; at or
# above the image diagonal (<= sqrt(2) in normalized units) so it dominates
# any in-frustum distance.
BEHIND_DISTANCE = 2.0


@dataclass
class SketchView:
    camera: Camera
    mask: np.ndarray  # (H, W) bool, True inside the sketch region
    dist_field: np.ndarray  # (H, W) float32, normalized exact EDT of the mask
    canvas: np.ndarray | None = None  # optional (H, W, 3) render under the sketch

    @staticmethod
    def from_mask(camera: Camera, mask: np.ndarray, canvas: np.ndarray | None = None) -> "SketchView":
        mask = np.asarray(mask).astype(bool)
        if mask.shape != (camera.height, camera.width):
            raise ValueError(
                f"mask shape {mask.shape} != camera image {(camera.height, camera.width)}"
            )
        dist = distance_to_mask(mask)
        return SketchView(camera=camera, mask=mask, dist_field=dist, canvas=canvas)


def distance_to_mask(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance (normalized by max(H, W)) to the nearest mask
    pixel; zero on mask pixels, large constant if the mask is empty."""
    H, W = mask.shape
    norm = float(max(H, W))
    if not mask.any():
        return np.full((H, W), BEHIND_DISTANCE, dtype=np.float32)
    dist_px = ndimage.distance_transform_edt(~mask)
    return (dist_px / norm).astype(np.float32)


@dataclass
class FillResult:
    mask: np.ndarray
    open_curve: bool = False


def fill_scribble(strokes, height: int, width: int) -> FillResult:
    """Rasterize scribble strokes (width 2 px) and flood-fill their interior.

    ``strokes`` is either a list of polylines ([[x, y], ...] in pixel
    coordinates) or an (H, W) bitmap. A bitmap that is already a filled blob is
    returned unchanged. If the strokes enclose nothing, an ``OpenCurve``
    warning is issued and the dilated strokes themselves become the mask.
    """
    if isinstance(strokes, np.ndarray) and strokes.ndim == 2:
        raster = strokes.astype(bool)
        if raster.shape != (height, width):
            raise ValueError("bitmap shape does not match requested size")
    else:
        if not strokes or all(len(s) == 0 for s in strokes):
            raise ValueError("strokes must be non-empty")
        from PIL import Image, ImageDraw

        img = Image.new("L", (width, height), 0)
        draw = ImageDraw.Draw(img)
        for poly in strokes:
            pts = [(float(x), float(y)) for x, y in poly]
            if len(pts) == 1:
                draw.point(pts, fill=255)
            else:
                draw.line(pts, fill=255, width=2)
        raster = np.array(img) > 0
    filled = ndimage.binary_fill_holes(raster)
    if filled.sum() > raster.sum():
        return FillResult(mask=filled, open_curve=False)
    # Nothing enclosed; the raster may already be a filled region (identity)
    # or an open curve (fallback to the dilated strokes).
    interior = raster & ~ndimage.binary_erosion(raster)
    is_blob = raster.sum() > 0 and (raster.sum() > 2.5 * interior.sum())
    if not is_blob:
        warnings.warn("strokes enclose no region; using dilated strokes", OpenCurve)
        return FillResult(mask=raster, open_curve=True)
    return FillResult(mask=raster, open_curve=False)


# --- projection ------------------------------------------------------------------


def project_points(points: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pinhole projection of (N, 3) world points.

    Returns continuous pixel coords (N, 2) as (u, v) = (col, row) with integer
    coordinates at pixel centers (so flooring uv + 1/2 gives the nearest pixel
    index), depths (N,) along the view axis, and an in-front mask (depth > 0).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    w2c = camera.world_to_camera()
    cam = pts @ w2c[:3, :3].T + w2c[:3, 3]
    depth = -cam[:, 2]
    in_front = depth > 0
    f = camera.focal
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (camera.width - 1) / 2.0 + f * cam[:, 0] / depth
        v = (camera.height - 1) / 2.0 - f * cam[:, 1] / depth
    uv = np.stack([u, v], axis=-1)
    return uv, depth, in_front


def project(point: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Single-point projection: (continuous (u, v), rounded pixel).

    Raises :class:`BehindCamera` when the point sits at or behind the camera
    plane; callers treat that as maximal distance.
    """
    uv, depth, in_front = project_points(point, camera)
    if not in_front[0]:
        raise BehindCamera(f"point {point} has non-positive depth {depth[0]}")
    rounded = np.floor(uv[0] + 0.5).astype(np.int64)
    return uv[0], rounded


# --- distances -------------------------------------------------------------------


def per_view_distances(
    points: np.ndarray, view: SketchView, distance_power: int = 2
) -> np.ndarray:
    """Vectorized per-view distance of (N, 3) points.

    In-frustum points look up the precomputed distance field at their rounded
    projection. Out-of-bounds projections extend monotonically: distance at the
    clamped boundary pixel plus the normalized overshoot. Behind-camera points
    get the (large) ``BEHIND_DISTANCE``. The result is raised to
    ``distance_power`` (2 reproduces the squared-norm form literally).
    """
    H, W = view.mask.shape
    norm = float(max(H, W))
    uv, depth, in_front = project_points(points, view.camera)
    pix = np.floor(uv + 0.5)
    col = np.clip(pix[:, 0], 0, W - 1).astype(np.int64)
    row = np.clip(pix[:, 1], 0, H - 1).astype(np.int64)
    base = view.dist_field[row, col].astype(np.float64)
    overshoot = (
        np.hypot(pix[:, 0] - np.clip(pix[:, 0], 0, W - 1), pix[:, 1] - np.clip(pix[:, 1], 0, H - 1))
        / norm
    )
    d = base + overshoot
    d = np.where(in_front, d, BEHIND_DISTANCE)
    return d**distance_power


def per_view_distance(point: np.ndarray, view: SketchView, distance_power: int = 2) -> float:
    return float(per_view_distances(np.atleast_2d(point), view, distance_power)[0])


@dataclass
class SketchSet:
    views: list[SketchView]
    edit_bbox: AABox
    beta: float = 0.05
    distance_power: int = 2

    @staticmethod
    def build(
        views: list[SketchView],
        field_bbox: AABox,
        resolution: tuple[int, int, int] | int = 64,
        beta: float = 0.05,
        distance_power: int = 2,
    ) -> "SketchSet":
        if not views:
            raise EmptySketchSet("a sketch set needs at least one view")
        if len(views) < 2:
            warnings.warn("fewer than two sketch views; the edit region is a full frustum slab")
        box = edit_bbox(views, field_bbox, resolution)
        return SketchSet(views=views, edit_bbox=box, beta=beta, distance_power=distance_power)


def multiview_distance(
    points: np.ndarray, sketches: SketchSet, distance_power: int | None = None
) -> np.ndarray:
    """Mean per-view distance over all sketch views."""
    power = sketches.distance_power if distance_power is None else distance_power
    pts = np.atleast_2d(points)
    acc = np.zeros(len(pts), dtype=np.float64)
    for view in sketches.views:
        acc += per_view_distances(pts, view, power)
    return acc / len(sketches.views)


def preservation_weight(D: np.ndarray | float, beta: float) -> np.ndarray | float:
    """w = 1 - exp(-D^2 / (2 beta^2)); zero on the sketches, ~1 far away."""
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    D = np.asarray(D, dtype=np.float64)
    w = 1.0 - np.exp(-(D**2) / (2.0 * beta * beta))
    return w if w.ndim else float(w)


# --- 3D edit region ----------------------------------------------------------------


def _mask_rect(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        return None
    r0, r1 = np.where(rows)[0][[0, -1]]
    c0, c1 = np.where(cols)[0][[0, -1]]
    return int(r0), int(r1), int(c0), int(c1)


def edit_bbox(
    views: list[SketchView],
    field_bbox: AABox,
    resolution: tuple[int, int, int] | int = 64,
) -> AABox:
    """Axis-aligned bound of the intersection of the mask-rectangle frusta.

    Each view's mask bounding rectangle is extruded between its near and far
    planes; the intersection is found by testing voxel centers at the given
    resolution and bounding the survivors, clipped to ``field_bbox``.
    """
    if not views:
        raise EmptySketchSet("edit_bbox needs at least one view")
    if isinstance(resolution, int):
        resolution = (resolution, resolution, resolution)
    res = np.array(resolution)
    h = field_bbox.size / res
    ax = [field_bbox.lo[i] + (np.arange(res[i]) + 0.5) * h[i] for i in range(3)]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    centers = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    keep = np.ones(len(centers), dtype=bool)
    for view in views:
        rect = _mask_rect(view.mask)
        if rect is None:
            keep &= False
            break
        r0, r1, c0, c1 = rect
        uv, depth, in_front = project_points(centers, view.camera)
        ok = (
            in_front
            & (depth >= view.camera.near)
            & (depth <= view.camera.far)
            & (uv[:, 0] >= c0 - 0.5)
            & (uv[:, 0] <= c1 + 0.5)
            & (uv[:, 1] >= r0 - 0.5)
            & (uv[:, 1] <= r1 + 0.5)
        )
        keep &= ok
    if not keep.any():
        raise EmptyIntersection("back-projected mask rectangles share no voxel")
    pts = centers[keep]
    lo = np.maximum(pts.min(axis=0) - 0.5 * h, field_bbox.lo)
    hi = np.minimum(pts.max(axis=0) + 0.5 * h, field_bbox.hi)
    return AABox(lo, hi)


# --- sketch package I/O ---------------------------------------------------------------


def save_package(sketches: SketchSet, directory: str | Path) -> None:
    """Write ``view_%02d/{mask.png,camera.json[,canvas.png]}`` + sketchset.json."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(sketches.views):
        vdir = directory / f"view_{i:02d}"
        vdir.mkdir(exist_ok=True)
        Image.fromarray((view.mask.astype(np.uint8)) * 255, mode="L").save(vdir / "mask.png")
        (vdir / "camera.json").write_text(json.dumps(view.camera.to_json(), indent=2))
        if view.canvas is not None:
            rgb = (np.clip(view.canvas, 0, 1) * 255 + 0.5).astype(np.uint8)
            Image.fromarray(rgb, mode="RGB").save(vdir / "canvas.png")
    manifest = {
        "views": len(sketches.views),
        "beta": sketches.beta,
        "distance_power": sketches.distance_power,
        "edit_bbox": sketches.edit_bbox.to_json(),
    }
    (directory / "sketchset.json").write_text(json.dumps(manifest, indent=2))


def load_package(directory: str | Path, field_bbox: AABox | None = None,
                 resolution: int = 64) -> SketchSet:
    """Read a sketch package; recomputes distance fields from the mask PNGs."""
    from PIL import Image

    directory = Path(directory)
    manifest = json.loads((directory / "sketchset.json").read_text())
    views = []
    for i in range(int(manifest["views"])):
        vdir = directory / f"view_{i:02d}"
        camera = Camera.from_json(json.loads((vdir / "camera.json").read_text()))
        mask = np.array(Image.open(vdir / "mask.png").convert("L")) > 127
        canvas = None
        if (vdir / "canvas.png").exists():
            canvas = np.array(Image.open(vdir / "canvas.png").convert("RGB")).astype(np.float32) / 255.0
        views.append(SketchView.from_mask(camera, mask, canvas))
    if "edit_bbox" in manifest and field_bbox is None:
        box = AABox.from_json(manifest["edit_bbox"])
        return SketchSet(
            views=views,
            edit_bbox=box,
            beta=float(manifest.get("beta", 0.05)),
            distance_power=int(manifest.get("distance_power", 2)),
        )
    if field_bbox is None:
        raise ValueError("package lacks edit_bbox; pass field_bbox to recompute")
    return SketchSet.build(
        views,
        field_bbox,
        resolution,
        beta=float(manifest.get("beta", 0.05)),
        distance_power=int(manifest.get("distance_power", 2)),
    )
