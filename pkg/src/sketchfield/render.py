"""Pinhole cameras and differentiable volume rendering.

Rays are marched at a fixed step; per-sample opacity ``a = 1 - exp(-sigma *
step)`` is alpha-composited front to back with transmittance early-out at
1e-4. Samples in occupancy-off cells are skipped and contribute no value and
no gradient. ``composite_rays`` is written entirely in torch so reverse-mode
gradients w.r.t. the density/color parameter grids are exact.

Camera frame: right-handed, x right, y up, looking along -z. World up is +z.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from sketchfield.errors import NonFiniteGradient
from sketchfield.field import AABox, RadianceField, eval_field

EARLY_TERMINATION_T = 1e-4
DEPTH_EPS = 1e-6
MAX_STEPS = 8192


@dataclass
class Camera:
    width: int
    height: int
    fov_y: float  # radians
    pose: np.ndarray  # 4x4 world-from-camera
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        R = self.pose[:3, :3]
        if abs(np.linalg.det(R) - 1.0) > 1e-6 or not np.allclose(
            R @ R.T, np.eye(3), atol=1e-6
        ):
            raise ValueError("camera pose rotation must be orthonormal with det +1")
        if not (0.0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")
        if not (0.0 < self.fov_y < math.pi):
            raise ValueError(f"fov_y must be in (0, pi), got {self.fov_y}")

    @property
    def focal(self) -> float:
        return self.height / (2.0 * math.tan(self.fov_y / 2.0))

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3]

    def world_to_camera(self) -> np.ndarray:
        R = self.pose[:3, :3]
        t = self.pose[:3, 3]
        inv = np.eye(4)
        inv[:3, :3] = R.T
        inv[:3, 3] = -R.T @ t
        return inv

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fov_y_deg": math.degrees(self.fov_y),
            "pose_world_from_camera": [float(v) for v in self.pose.reshape(-1)],
            "near": self.near,
            "far": self.far,
        }

    @staticmethod
    def from_json(d: dict) -> "Camera":
        return Camera(
            width=int(d["width"]),
            height=int(d["height"]),
            fov_y=math.radians(float(d["fov_y_deg"])),
            pose=np.array(d["pose_world_from_camera"], dtype=np.float64).reshape(4, 4),
            near=float(d["near"]),
            far=float(d["far"]),
        )


def orbit_camera(
    azimuth_deg: float,
    elevation_deg: float,
    radius: float,
    *,
    target: np.ndarray | tuple = (0.0, 0.0, 0.0),
    width: int = 64,
    height: int = 64,
    fov_y_deg: float = 45.0,
    near: float = 0.05,
    far: float = 100.0,
) -> Camera:
    """Camera on an orbit around ``target``; azimuth 0 sits on +x, z is up."""
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    target = np.asarray(target, dtype=np.float64)
    pos = target + radius * np.array(
        [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
    )
    fwd = target - pos
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(fwd, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    cam_up = np.cross(right, fwd)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = cam_up
    pose[:3, 2] = -fwd
    pose[:3, 3] = pos
    return Camera(width, height, math.radians(fov_y_deg), pose, near, far)


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    alpha: np.ndarray  # (H, W) float32
    depth: np.ndarray  # (H, W) float32
    background: np.ndarray  # (3,) float32


@dataclass
class CompositeSample:
    """Per-ray compositing result with sample-level detail for inspection."""

    rgb: np.ndarray
    alpha: float
    depth: float
    t_values: np.ndarray
    sample_alphas: np.ndarray
    weights: np.ndarray


def generate_rays(
    camera: Camera, pixel_subset: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Rays through pixel centers; returns (origins, unit directions).

    ``pixel_subset`` is an optional (N, 2) array of integer (row, col) pairs;
    default is every pixel in row-major order.
    """
    H, W = camera.height, camera.width
    if pixel_subset is None:
        vv, uu = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        rows = vv.reshape(-1)
        cols = uu.reshape(-1)
    else:
        pixel_subset = np.asarray(pixel_subset)
        rows = pixel_subset[:, 0]
        cols = pixel_subset[:, 1]
    f = camera.focal
    x = (cols + 0.5 - W / 2.0) / f
    y = -(rows + 0.5 - H / 2.0) / f
    z = -np.ones_like(x)
    dirs_cam = np.stack([x, y, z], axis=-1)
    R = camera.pose[:3, :3]
    dirs = dirs_cam @ R.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def ray_box_intersect(
    origins: np.ndarray, dirs: np.ndarray, box: AABox
) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit distances of rays against a box (slab method)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_lo = (box.lo - origins) * inv
        t_hi = (box.hi - origins) * inv
    t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=-1)
    t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=-1)
    return t_near, t_far


def composite_rays(
    density: torch.Tensor,
    color: torch.Tensor,
    field: RadianceField,
    origins: np.ndarray,
    dirs: np.ndarray,
    step: float,
    background: np.ndarray,
    near: float,
    far: float,
    jitter: np.ndarray | None = None,
    return_internals: bool = False,
) -> dict:
    """Alpha-composite a batch of rays against (density, color) parameter grids.

    The parameter tensors are passed explicitly so callers can supply leaves
    with ``requires_grad`` enabled; ``field`` supplies geometry and occupancy.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    R = origins.shape[0]
    dtype = density.dtype
    bg = torch.as_tensor(np.asarray(background), dtype=dtype)
    t_enter, t_exit = ray_box_intersect(origins, dirs, field.bbox)
    t0 = np.maximum(t_enter, near)
    t1 = np.minimum(t_exit, far)
    span = np.maximum(t1 - t0, 0.0)
    S = int(min(MAX_STEPS, math.ceil(span.max() / step))) if span.max() > 0 else 0

    if S == 0:
        zero = torch.zeros(R, dtype=dtype)
        rgb = bg.expand(R, 3).clone()
        out = {"rgb": rgb, "alpha": zero, "depth": torch.zeros(R, dtype=dtype)}
        if return_internals:
            out["internals"] = {
                "positions": np.zeros((0, 3)),
                "ray_index": np.zeros(0, dtype=np.int64),
                "alphas": torch.zeros(0, dtype=dtype),
                "colors": torch.zeros(0, 3, dtype=dtype),
                "t": np.zeros(0),
                "step": step,
            }
        return out

    t0_t = torch.as_tensor(t0, dtype=dtype)
    t1_t = torch.as_tensor(t1, dtype=dtype)
    offsets = (torch.arange(S, dtype=dtype) + 0.5) * step
    ts = t0_t[:, None] + offsets[None, :]
    if jitter is not None:
        ts = ts + torch.as_tensor(jitter, dtype=dtype)[:, None] * step
    in_range = ts < t1_t[:, None]

    o_t = torch.as_tensor(origins, dtype=dtype)
    d_t = torch.as_tensor(dirs, dtype=dtype)
    pos = o_t[:, None, :] + d_t[:, None, :] * ts[..., None]  # (R, S, 3)

    X, Y, Z = field.resolution
    lo = torch.as_tensor(field.bbox.lo, dtype=dtype)
    h = torch.as_tensor(field.voxel_size, dtype=dtype)
    cell_f = (pos - lo) / h
    res_t = torch.tensor([X, Y, Z], dtype=dtype)
    inside = ((cell_f >= 0.0) & (cell_f < res_t)).all(dim=-1)
    cx = cell_f[..., 0].clamp(0, X - 1).long()
    cy = cell_f[..., 1].clamp(0, Y - 1).long()
    cz = cell_f[..., 2].clamp(0, Z - 1).long()
    flat_cell = (cx * Y + cy) * Z + cz
    occ = field.occupancy.bits.reshape(-1)[flat_cell.reshape(-1)].reshape(R, S)
    active = in_range & inside & occ

    act_idx = active.reshape(-1).nonzero(as_tuple=False).squeeze(-1)
    coords = (cell_f - 0.5).reshape(-1, 3).index_select(0, act_idx)
    sigma_a, color_a = eval_field(density, color, coords)
    alpha_a = 1.0 - torch.exp(-sigma_a * step)

    alphas = torch.zeros(R * S, dtype=alpha_a.dtype)
    alphas = alphas.index_put((act_idx,), alpha_a).reshape(R, S)
    colors = torch.zeros(R * S, 3, dtype=color_a.dtype)
    colors = colors.index_put((act_idx,), color_a).reshape(R, S, 3)

    trans = torch.cumprod(1.0 - alphas, dim=1)
    t_excl = torch.cat([torch.ones(R, 1, dtype=dtype), trans[:, :-1]], dim=1)
    keep = (t_excl.detach() >= EARLY_TERMINATION_T).to(alphas.dtype)
    weights = t_excl * alphas * keep  # (R, S)

    alpha_px = weights.sum(dim=1)
    rgb_px = (weights[..., None] * colors).sum(dim=1) + (1.0 - alpha_px)[:, None] * bg
    depth_px = (weights * ts).sum(dim=1) / alpha_px.detach().clamp_min(DEPTH_EPS)

    out = {"rgb": rgb_px, "alpha": alpha_px, "depth": depth_px}
    if return_internals:
        keep_b = keep.bool() & active
        sel = keep_b.reshape(-1).nonzero(as_tuple=False).squeeze(-1)
        out["internals"] = {
            "positions": pos.detach().reshape(-1, 3)[sel].numpy().astype(np.float64),
            "ray_index": (sel // S).numpy(),
            "alphas": alphas.reshape(-1)[sel],
            "colors": colors.reshape(-1, 3)[sel],
            "t": ts.detach().reshape(-1)[sel].numpy(),
            "step": step,
        }
    return out


def default_step(field: RadianceField) -> float:
    return field.bbox.diagonal / (2.0 * max(field.resolution))


def march(field: RadianceField, ray: tuple[np.ndarray, np.ndarray], step: float,
          background: tuple = (1.0, 1.0, 1.0), near: float | None = None,
          far: float | None = None) -> CompositeSample:
    """Composite a single ray; returns per-sample detail for inspection."""
    o, d = ray
    o = np.asarray(o, dtype=np.float64).reshape(1, 3)
    d = np.asarray(d, dtype=np.float64).reshape(1, 3)
    with torch.no_grad():
        out = composite_rays(
            field.density,
            field.color,
            field,
            o,
            d,
            step,
            np.asarray(background, dtype=np.float32),
            near if near is not None else 0.0,
            far if far is not None else np.inf,
            return_internals=True,
        )
    internals = out["internals"]
    return CompositeSample(
        rgb=out["rgb"][0].numpy(),
        alpha=float(out["alpha"][0]),
        depth=float(out["depth"][0]),
        t_values=internals["t"],
        sample_alphas=internals["alphas"].numpy(),
        weights=(internals["alphas"]).numpy(),
    )


def render_view(
    field: RadianceField,
    camera: Camera,
    step: float | None = None,
    background: tuple = (1.0, 1.0, 1.0),
) -> RenderOutput:
    """Deterministic full-frame render."""
    if step is None:
        step = default_step(field)
    origins, dirs = generate_rays(camera)
    bg = np.asarray(background, dtype=np.float32)
    with torch.no_grad():
        out = composite_rays(
            field.density, field.color, field, origins, dirs, step, bg,
            camera.near, camera.far,
        )
    H, W = camera.height, camera.width
    return RenderOutput(
        rgb=out["rgb"].numpy().reshape(H, W, 3).astype(np.float32),
        alpha=out["alpha"].numpy().reshape(H, W).astype(np.float32),
        depth=out["depth"].numpy().reshape(H, W).astype(np.float32),
        background=bg,
    )


def render_backward(
    field: RadianceField,
    camera: Camera,
    step: float,
    pixel_gradients: np.ndarray,
    background: tuple = (1.0, 1.0, 1.0),
) -> tuple[torch.Tensor, torch.Tensor]:
    """Chain per-pixel gradients (H, W, 4: rgb+alpha) back to the grids.

    Returns exact reverse-mode gradients with the same shapes as the density
    and color grids. Occupancy-skipped and early-terminated samples contribute
    zero.
    """
    pg = np.asarray(pixel_gradients, dtype=np.float32)
    H, W = camera.height, camera.width
    if pg.shape != (H, W, 4):
        raise ValueError(f"pixel_gradients must be (H, W, 4), got {pg.shape}")
    if not np.isfinite(pg).all():
        raise NonFiniteGradient("pixel_gradients contain NaN or inf")
    density = field.density.detach().clone().requires_grad_(True)
    color = field.color.detach().clone().requires_grad_(True)
    origins, dirs = generate_rays(camera)
    out = composite_rays(
        density, color, field, origins, dirs, step,
        np.asarray(background, dtype=np.float32), camera.near, camera.far,
    )
    g_rgb = torch.as_tensor(pg[..., :3].reshape(-1, 3))
    g_alpha = torch.as_tensor(pg[..., 3].reshape(-1))
    grads = torch.autograd.grad(
        outputs=(out["rgb"], out["alpha"]),
        inputs=(density, color),
        grad_outputs=(g_rgb, g_alpha),
        allow_unused=True,
    )
    d_density = grads[0] if grads[0] is not None else torch.zeros_like(density)
    d_color = grads[1] if grads[1] is not None else torch.zeros_like(color)
    if not (torch.isfinite(d_density).all() and torch.isfinite(d_color).all()):
        raise NonFiniteGradient("backward pass produced non-finite gradients")
    return d_density.detach(), d_color.detach()


# --- image I/O -----------------------------------------------------------------


def write_png(path: str | Path, image: np.ndarray) -> None:
    """8-bit PNG from a float image in [0, 1]; (H, W) gray or (H, W, 3) rgb."""
    from PIL import Image

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(data, mode=mode).save(tmp, format="PNG")
    tmp.replace(path)


def write_f32(path: str | Path, planes: dict[str, np.ndarray]) -> None:
    """Raw float32 planar dump with a tiny JSON sidecar describing shapes."""
    path = Path(path)
    order = sorted(planes)
    blob = b"".join(np.ascontiguousarray(planes[k], dtype="<f4").tobytes() for k in order)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    meta = {k: list(planes[k].shape) for k in order}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta))
