"""Dense voxel radiance fields with occupancy acceleration.

A :class:`RadianceField` stores pre-activation density (softplus) and color
(sigmoid) parameters on a cell-centered grid. Values between cell centers are
trilinearly interpolated; points outside the bounding box evaluate to zero
density and black. An :class:`OccupancyGrid` with one bit per voxel marks
non-empty space so the renderer can skip samples.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from sketchfield.errors import (
    BadMagic,
    ChecksumMismatch,
    EmptySketchSet,
    NoOverlap,
    TruncatedFile,
    VersionMismatch,
)

# Pre-activation value whose softplus is ~6e-6, i.e. "empty" within tolerance.
EMPTY_DENSITY_PARAM = -12.0

_MAGIC = b"SKFDv001"


def softplus_inv(y: np.ndarray | float) -> np.ndarray | float:
    """Inverse of softplus; linear branch above 20 avoids overflow."""
    y = np.asarray(y, dtype=np.float64)
    out = np.where(y > 20.0, y, np.log(np.expm1(np.clip(y, 1e-12, None))))
    return out


def logit(p: np.ndarray | float) -> np.ndarray | float:
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-4, 1.0 - 1e-4)
    return np.log(p / (1.0 - p))


@dataclass(frozen=True)
class AABox:
    """Axis-aligned box in scene units."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64).reshape(3))

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))

    def intersects(self, other: "AABox") -> bool:
        return bool(np.all(self.hi >= other.lo) and np.all(other.hi >= self.lo))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)

    def corners(self) -> np.ndarray:
        lo, hi = self.lo, self.hi
        return np.array(
            [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
        )

    def to_json(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @staticmethod
    def from_json(d: dict) -> "AABox":
        return AABox(np.array(d["lo"]), np.array(d["hi"]))


@dataclass
class OccupancyGrid:
    """Boolean acceleration grid; one bit per field voxel.

    ``seeded`` marks cells force-enabled for an edit region. Those bits survive
    warm-up (pruning is a no-op then); after warm-up they are culled like any
    other cell.
    """

    bits: torch.Tensor  # bool (X, Y, Z)
    prune_threshold: float = 1.0
    seeded: torch.Tensor | None = None

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.bits.shape)

    def clone(self) -> "OccupancyGrid":
        return OccupancyGrid(
            bits=self.bits.clone(),
            prune_threshold=self.prune_threshold,
            seeded=None if self.seeded is None else self.seeded.clone(),
        )


class RadianceField:
    """Cell-centered voxel grid of density and color parameters."""

    def __init__(
        self,
        resolution: tuple[int, int, int],
        bbox: AABox,
        density: torch.Tensor | None = None,
        color: torch.Tensor | None = None,
        occupancy: OccupancyGrid | None = None,
        metadata: dict | None = None,
    ):
        resolution = tuple(int(r) for r in resolution)
        if any(r < 2 for r in resolution):
            raise ValueError(f"resolution must be >= 2 per axis, got {resolution}")
        self.resolution = resolution
        self.bbox = bbox
        X, Y, Z = resolution
        if density is None:
            density = torch.full((X, Y, Z), EMPTY_DENSITY_PARAM, dtype=torch.float32)
        if color is None:
            color = torch.zeros((X, Y, Z, 3), dtype=torch.float32)
        if density.shape != (X, Y, Z):
            raise ValueError(f"density grid shape {tuple(density.shape)} != {resolution}")
        if color.shape != (X, Y, Z, 3):
            raise ValueError(f"color grid shape {tuple(color.shape)} != {resolution + (3,)}")
        self.density = density
        self.color = color
        if occupancy is None:
            occupancy = OccupancyGrid(bits=torch.ones((X, Y, Z), dtype=torch.bool))
        if tuple(occupancy.bits.shape) != resolution:
            raise ValueError("occupancy resolution must equal field resolution")
        self.occupancy = occupancy
        self.metadata: dict = metadata if metadata is not None else {}

    # --- geometry helpers ---------------------------------------------------

    @property
    def voxel_size(self) -> np.ndarray:
        return self.bbox.size / np.array(self.resolution, dtype=np.float64)

    def voxel_centers(self) -> np.ndarray:
        """(X*Y*Z, 3) array of cell-center positions, x-fastest last axis order."""
        X, Y, Z = self.resolution
        h = self.voxel_size
        ax = [self.bbox.lo[i] + (np.arange(self.resolution[i]) + 0.5) * h[i] for i in range(3)]
        gx, gy, gz = np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def grid_coords(self, pts: torch.Tensor) -> torch.Tensor:
        """Map world points to continuous cell-centered grid coordinates."""
        lo = torch.as_tensor(self.bbox.lo, dtype=pts.dtype)
        h = torch.as_tensor(self.voxel_size, dtype=pts.dtype)
        return (pts - lo) / h - 0.5

    def clone(self) -> "RadianceField":
        return RadianceField(
            resolution=self.resolution,
            bbox=self.bbox,
            density=self.density.detach().clone(),
            color=self.color.detach().clone(),
            occupancy=self.occupancy.clone(),
            metadata=json.loads(json.dumps(self.metadata)),
        )

    # --- evaluation ---------------------------------------------------------

    def eval_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Activated (density, color) at arbitrary points; outside bbox -> (0, black)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        with torch.no_grad():
            t = torch.as_tensor(pts, dtype=torch.float32)
            sigma, rgb = eval_field(self.density, self.color, self.grid_coords(t))
            inside = torch.as_tensor(self.bbox.contains(pts))
            sigma = torch.where(inside, sigma, torch.zeros_like(sigma))
            rgb = torch.where(inside.unsqueeze(-1), rgb, torch.zeros_like(rgb))
        return sigma.numpy(), rgb.numpy()


def trilerp(grid: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Trilinear interpolation of ``grid`` (X,Y,Z[,C]) at continuous coords (N,3).

    Coordinates are in cell-center units and clamped to the grid, so queries at
    or beyond the boundary return clamped-edge values. Differentiable w.r.t.
    ``grid``.
    """
    X, Y, Z = grid.shape[:3]
    scalar = grid.dim() == 3
    g = grid.unsqueeze(-1) if scalar else grid

    fs = []
    i0s = []
    for axis, n in enumerate((X, Y, Z)):
        c = coords[:, axis].clamp(0.0, n - 1.0)
        i0 = c.floor().clamp_(max=float(n - 2))
        fs.append((c - i0).clamp(0.0, 1.0))
        i0s.append(i0.long())

    flat = g.reshape(-1, g.shape[-1])
    sy = Z
    sx = Y * Z
    base = i0s[0] * sx + i0s[1] * sy + i0s[2]
    out = None
    for dx in (0, 1):
        wx = fs[0] if dx else 1.0 - fs[0]
        for dy in (0, 1):
            wy = fs[1] if dy else 1.0 - fs[1]
            for dz in (0, 1):
                wz = fs[2] if dz else 1.0 - fs[2]
                w = (wx * wy * wz).unsqueeze(-1)
                idx = base + dx * sx + dy * sy + dz
                v = flat.index_select(0, idx)
                out = v * w if out is None else out + v * w
    return out.squeeze(-1) if scalar else out


def eval_field(
    density: torch.Tensor, color: torch.Tensor, coords: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Activated density and color at continuous grid coords. Differentiable."""
    sigma = F.softplus(trilerp(density, coords))
    rgb = torch.sigmoid(trilerp(color, coords))
    return sigma, rgb


# --- occupancy maintenance ----------------------------------------------------


def density_bits(field: RadianceField) -> torch.Tensor:
    """Cells whose max activated density over an 8-corner + center lattice
    exceeds the prune threshold."""
    with torch.no_grad():
        X, Y, Z = field.resolution
        # Cell corners are grid nodes; node (i,j,k) sits at grid coord i-0.5.
        axes = [torch.arange(n + 1, dtype=torch.float32) - 0.5 for n in (X, Y, Z)]
        gx, gy, gz = torch.meshgrid(*axes, indexing="ij")
        nodes = torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)
        node_sigma = F.softplus(trilerp(field.density, nodes)).reshape(X + 1, Y + 1, Z + 1)
        corner_max = F.max_pool3d(node_sigma[None, None], kernel_size=2, stride=1)[0, 0]
        center = F.softplus(field.density)
        lattice_max = torch.maximum(corner_max, center)
        return lattice_max > field.occupancy.prune_threshold


def seed_edit_region(field: RadianceField, box: AABox) -> RadianceField:
    """Force-enable occupancy bits for every cell overlapping ``box``.

    Grids are left untouched. Raises :class:`NoOverlap` when the box misses the
    field bounds entirely.
    """
    if not box.intersects(field.bbox):
        raise NoOverlap(f"edit box {box} does not intersect field bbox {field.bbox}")
    X, Y, Z = field.resolution
    h = field.voxel_size
    lo_idx = np.floor((box.lo - field.bbox.lo) / h).astype(np.int64)
    hi_idx = np.ceil((box.hi - field.bbox.lo) / h).astype(np.int64)
    lo_idx = np.clip(lo_idx, 0, np.array([X, Y, Z]) - 1)
    hi_idx = np.clip(hi_idx, 1, np.array([X, Y, Z]))
    sl = tuple(slice(int(a), int(b)) for a, b in zip(lo_idx, hi_idx))
    if field.occupancy.seeded is None:
        field.occupancy.seeded = torch.zeros((X, Y, Z), dtype=torch.bool)
    field.occupancy.seeded[sl] = True
    field.occupancy.bits |= field.occupancy.seeded
    return field


def prune(field: RadianceField, iteration: int, warmup_iters: int, period: int) -> RadianceField:
    """Periodic occupancy pruning with a warm-up window.

    No-op during warm-up or off the period grid. After warm-up a cell keeps its
    bit only if its lattice-max activated density exceeds the threshold; seeded
    bits are protected through warm-up (trivially, by the no-op) and cullable
    afterward.
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration < warmup_iters or period <= 0 or iteration % period != 0:
        return field
    field.occupancy.bits = density_bits(field)
    return field


def carve(field: RadianceField, sketches) -> RadianceField:
    """Empty the visual hull of the sketch masks.

    Every voxel whose center projects inside the mask of *all* views has its
    density parameter set to the empty value and its occupancy bit cleared.
    Returns a new field; the input is unchanged.
    """
    views = getattr(sketches, "views", sketches)
    if not views:
        raise EmptySketchSet("carve needs at least one sketch view")
    from sketchfield.sketch import project_points

    centers = field.voxel_centers()
    in_hull = np.ones(len(centers), dtype=bool)
    for view in views:
        uv, depth, in_front = project_points(centers, view.camera)
        pix = np.floor(uv + 0.5).astype(np.int64)
        H, W = view.mask.shape
        inside = (
            in_front
            & (pix[:, 0] >= 0)
            & (pix[:, 0] < W)
            & (pix[:, 1] >= 0)
            & (pix[:, 1] < H)
        )
        hit = np.zeros(len(centers), dtype=bool)
        sel = np.where(inside)[0]
        hit[sel] = view.mask[pix[sel, 1], pix[sel, 0]]
        in_hull &= hit
    out = field.clone()
    mask = torch.as_tensor(in_hull.reshape(field.resolution))
    out.density = torch.where(mask, torch.full_like(out.density, EMPTY_DENSITY_PARAM), out.density)
    out.occupancy.bits &= ~mask
    if out.occupancy.seeded is not None:
        out.occupancy.seeded &= ~mask
    out.metadata.setdefault("edits", []).append({"op": "carve", "views": len(views)})
    return out


# --- synthetic scenes ----------------------------------------------------------


def _sdf_sphere(pts: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    return np.linalg.norm(pts - center, axis=-1) - radius


def _sdf_box(pts: np.ndarray, center: np.ndarray, half: np.ndarray) -> np.ndarray:
    q = np.abs(pts - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def synth_scene(
    kind: str,
    resolution: int | tuple[int, int, int],
    bbox: AABox | None = None,
    *,
    density: float = 45.0,
    prune_threshold: float = 1.0,
    radius_frac: float = 0.35,
    albedo: tuple[float, float, float] | None = None,
) -> RadianceField:
    """Analytic test scene: ``sphere``, ``box``, ``plate`` or ``composite``.

    Density ramps linearly from 0 to ``density`` across one voxel of signed
    distance, so surfaces are crisp but still continuous under interpolation.
    """
    if bbox is None:
        bbox = AABox(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))
    if isinstance(resolution, int):
        resolution = (resolution, resolution, resolution)
    f = RadianceField(resolution, bbox)
    pts = f.voxel_centers()
    ctr = bbox.center
    half = 0.5 * bbox.size

    parts: list[tuple[np.ndarray, tuple[float, float, float]]] = []
    if kind == "sphere":
        r = radius_frac * float(half.min())
        parts.append((_sdf_sphere(pts, ctr, r), albedo or (0.78, 0.46, 0.30)))
    elif kind == "box":
        parts.append((_sdf_box(pts, ctr, 0.4 * half), albedo or (0.35, 0.55, 0.75)))
    elif kind == "plate":
        plate_ctr = ctr.copy()
        plate_ctr[2] = bbox.lo[2] + 0.12 * bbox.size[2]
        plate_half = np.array([0.8 * half[0], 0.8 * half[1], 0.05 * bbox.size[2]])
        parts.append((_sdf_box(pts, plate_ctr, plate_half), albedo or (0.62, 0.62, 0.66)))
    elif kind == "composite":
        plate_ctr = ctr.copy()
        plate_ctr[2] = bbox.lo[2] + 0.12 * bbox.size[2]
        plate_half = np.array([0.8 * half[0], 0.8 * half[1], 0.05 * bbox.size[2]])
        parts.append((_sdf_box(pts, plate_ctr, plate_half), (0.62, 0.62, 0.66)))
        r = 0.28 * float(half.min())
        sph_ctr = ctr.copy()
        sph_ctr[2] = plate_ctr[2] + plate_half[2] + r
        parts.append((_sdf_sphere(pts, sph_ctr, r), (0.80, 0.33, 0.25)))
    else:
        raise ValueError(f"unknown scene kind {kind!r}")

    falloff = float(f.voxel_size.min())
    act = np.zeros(len(pts), dtype=np.float64)
    col = np.full((len(pts), 3), 0.5, dtype=np.float64)
    for sdf, part_albedo in parts:
        ramp = np.clip(-sdf / falloff, 0.0, 1.0)
        part_act = density * ramp
        take = part_act > act
        act = np.where(take, part_act, act)
        col[take] = np.asarray(part_albedo)

    dens_param = np.where(act > 1e-5, softplus_inv(np.maximum(act, 1e-5)), EMPTY_DENSITY_PARAM)
    f.density = torch.as_tensor(dens_param.reshape(resolution), dtype=torch.float32).contiguous()
    f.color = torch.as_tensor(
        logit(col).reshape(resolution + (3,)), dtype=torch.float32
    ).contiguous()
    f.occupancy = OccupancyGrid(
        bits=torch.ones(resolution, dtype=torch.bool), prune_threshold=prune_threshold
    )
    f.occupancy.bits = density_bits(f)
    f.metadata = {"created": {"kind": kind, "density": density}}
    return f


def stamp_box(
    field: RadianceField,
    box: AABox,
    density: float = 45.0,
    albedo: tuple[float, float, float] = (0.7, 0.25, 0.2),
    margin: float = 1.0,
) -> RadianceField:
    """Return a copy with a solid colored box blended into the field.

    ``margin`` scales the box about its center (1.0 = exact). Density ramps
    over one voxel like the synthetic scenes; occupancy bits are refreshed for
    the stamped cells.
    """
    out = field.clone()
    half = 0.5 * box.size * margin
    pts = out.voxel_centers()
    sdf = _sdf_box(pts, box.center, half)
    falloff = float(out.voxel_size.min())
    act = density * np.clip(-sdf / falloff, 0.0, 1.0)
    hit = act > 1e-5
    dens = out.density.reshape(-1).numpy().copy()
    current = np.log1p(np.exp(np.minimum(dens, 20.0))) + np.maximum(dens - 20.0, 0.0)
    replace = hit & (act > current)
    dens[replace] = softplus_inv(act[replace])
    out.density = torch.as_tensor(dens.reshape(field.resolution), dtype=torch.float32)
    col = out.color.reshape(-1, 3).numpy().copy()
    col[replace] = logit(np.asarray(albedo))
    out.color = torch.as_tensor(col.reshape(field.resolution + (3,)), dtype=torch.float32)
    out.occupancy.bits |= torch.as_tensor(replace.reshape(field.resolution))
    out.metadata.setdefault("edits", []).append({"op": "stamp_box", "box": box.to_json()})
    return out


# --- SKFD checkpoint I/O --------------------------------------------------------


def _pack_bits(bits: np.ndarray) -> bytes:
    """Flatten (x-fastest) and pack LSB-first into little-endian u64 words."""
    flat = np.ascontiguousarray(np.transpose(bits, (2, 1, 0))).reshape(-1)
    packed = np.packbits(flat, bitorder="little")
    pad = (-len(packed)) % 8
    if pad:
        packed = np.concatenate([packed, np.zeros(pad, dtype=np.uint8)])
    return packed.tobytes()


def _unpack_bits(raw: bytes, resolution: tuple[int, int, int]) -> np.ndarray:
    n = int(np.prod(resolution))
    flat = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[:n]
    zyx = flat.reshape(resolution[2], resolution[1], resolution[0]).astype(bool)
    return np.transpose(zyx, (2, 1, 0))


def save(field: RadianceField, path: str | Path) -> None:
    """Write an SKFD checkpoint (bit-exact round trip). Atomic via tmp+rename."""
    X, Y, Z = field.resolution
    parts = [_MAGIC]
    parts.append(struct.pack("<3I", X, Y, Z))
    parts.append(struct.pack("<6d", *field.bbox.lo.tolist(), *field.bbox.hi.tolist()))
    parts.append(struct.pack("<B", 0))
    dens = field.density.detach().numpy().astype(np.float32, copy=False)
    col = field.color.detach().numpy().astype(np.float32, copy=False)
    parts.append(np.ascontiguousarray(np.transpose(dens, (2, 1, 0))).tobytes())
    parts.append(np.ascontiguousarray(np.transpose(col, (2, 1, 0, 3))).tobytes())
    parts.append(_pack_bits(field.occupancy.bits.numpy()))
    meta = dict(field.metadata)
    meta["prune_threshold"] = field.occupancy.prune_threshold
    meta_blob = json.dumps(meta).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_blob)))
    parts.append(meta_blob)
    body = b"".join(parts)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(
                f"expected {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def load(path: str | Path) -> RadianceField:
    """Read an SKFD checkpoint written by :func:`save`."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(8)
    if magic != _MAGIC:
        if magic[:4] == _MAGIC[:4]:
            raise VersionMismatch(f"unsupported SKFD version {magic[4:]!r}")
        raise BadMagic(f"not an SKFD file (magic {magic!r})")
    X, Y, Z = struct.unpack("<3I", r.take(12))
    bb = struct.unpack("<6d", r.take(48))
    struct.unpack("<B", r.take(1))  # flags, reserved
    n = X * Y * Z
    dens = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(Z, Y, X)
    col = np.frombuffer(r.take(12 * n), dtype="<f4").reshape(Z, Y, X, 3)
    words = (n + 63) // 64
    bits = _unpack_bits(r.take(8 * words), (X, Y, Z))
    (meta_len,) = struct.unpack("<I", r.take(4))
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (crc_stored,) = struct.unpack("<I", r.take(4))
    crc_actual = zlib.crc32(data[: r.pos - 4]) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise ChecksumMismatch(f"CRC32 {crc_actual:#x} != stored {crc_stored:#x}")
    thr = float(meta.pop("prune_threshold", 1.0))
    f = RadianceField(
        (X, Y, Z),
        AABox(np.array(bb[:3]), np.array(bb[3:])),
        density=torch.as_tensor(np.transpose(dens, (2, 1, 0)).copy()),
        color=torch.as_tensor(np.transpose(col, (2, 1, 0, 3)).copy()),
        occupancy=OccupancyGrid(bits=torch.as_tensor(bits), prune_threshold=thr),
        metadata=meta,
    )
    return f


def fields_equal(a: RadianceField, b: RadianceField) -> bool:
    """Bit-exact equality of grids, bbox, resolution and occupancy."""
    return (
        a.resolution == b.resolution
        and np.array_equal(a.bbox.lo, b.bbox.lo)
        and np.array_equal(a.bbox.hi, b.bbox.hi)
        and torch.equal(a.density, b.density)
        and torch.equal(a.color, b.color)
        and torch.equal(a.occupancy.bits, b.occupancy.bits)
    )
