import math

import numpy as np
import pytest
import torch

from sketchfield import field as F
from sketchfield.errors import BadMagic, ChecksumMismatch, NoOverlap, TruncatedFile, VersionMismatch
from sketchfield.field import AABox, OccupancyGrid, RadianceField

from conftest import random_field


class TestEval:
    def test_outside_bbox_is_empty_black(self, unit_bbox):
        f = F.synth_scene("sphere", 16, unit_bbox)
        d, c = f.eval_points(np.array([[3.0, 0.0, 0.0], [0.0, -9.0, 0.0]]))
        assert np.all(d == 0.0)
        assert np.all(c == 0.0)

    def test_zero_params_give_softplus_zero(self, unit_bbox):
        f = RadianceField((8, 8, 8), unit_bbox)
        f.density = torch.zeros((8, 8, 8))
        pts = np.random.default_rng(0).uniform(-0.9, 0.9, (50, 3))
        d, _ = f.eval_points(pts)
        assert np.allclose(d, math.log(2.0), atol=1e-6)

    def test_cell_center_is_one_hot(self, unit_bbox, rng):
        f = random_field(rng, res=8, dtype=torch.float32)
        idx = (3, 4, 2)
        center = f.bbox.lo + (np.array(idx) + 0.5) * f.voxel_size
        d, c = f.eval_points(center[None])
        want_d = torch.nn.functional.softplus(f.density[idx]).item()
        want_c = torch.sigmoid(f.color[idx]).numpy()
        assert d[0] == pytest.approx(want_d, abs=1e-6)
        assert np.allclose(c[0], want_c, atol=1e-6)

    def test_interpolation_is_continuous(self, rng):
        f = random_field(rng, res=8, scale=2.0, dtype=torch.float32)
        # Lipschitz bound from neighbouring activated values over one voxel.
        act = torch.nn.functional.softplus(f.density).numpy()
        jumps = max(
            np.abs(np.diff(act, axis=a)).max() for a in range(3)
        )
        lip = 3.0 * jumps / f.voxel_size.min()
        for _ in range(20):
            a = rng.uniform(-0.8, 0.8, 3)
            b = a + rng.normal(0, 0.05, 3)
            ts = np.linspace(0, 1, 64)
            pts = a[None] + ts[:, None] * (b - a)[None]
            d, _ = f.eval_points(pts)
            seg = np.linalg.norm(b - a) / 63
            assert np.all(np.abs(np.diff(d)) <= lip * seg + 1e-6)


class TestSeed:
    def test_full_cover_sets_all_bits(self, unit_bbox):
        f = RadianceField((8, 8, 8), unit_bbox)
        f.occupancy.bits[:] = False
        F.seed_edit_region(f, unit_bbox)
        assert bool(f.occupancy.bits.all())

    def test_single_cell(self, unit_bbox):
        f = RadianceField((8, 8, 8), unit_bbox)
        f.occupancy.bits[:] = False
        center = f.bbox.lo + (np.array([2, 3, 4]) + 0.5) * f.voxel_size
        eps = 1e-6
        F.seed_edit_region(f, AABox(center - eps, center + eps))
        assert int(f.occupancy.bits.sum()) == 1
        assert bool(f.occupancy.bits[2, 3, 4])

    def test_disjoint_raises(self, unit_bbox):
        f = RadianceField((8, 8, 8), unit_bbox)
        with pytest.raises(NoOverlap):
            F.seed_edit_region(f, AABox([5, 5, 5], [6, 6, 6]))

    def test_grids_unchanged(self, unit_bbox, rng):
        f = random_field(rng, res=8, dtype=torch.float32)
        before_d = f.density.clone()
        before_c = f.color.clone()
        F.seed_edit_region(f, AABox([-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]))
        assert torch.equal(f.density, before_d)
        assert torch.equal(f.color, before_c)


class TestPrune:
    def test_warmup_is_identity(self, unit_bbox):
        f = RadianceField((8, 8, 8), unit_bbox)
        f.density = torch.zeros((8, 8, 8))
        before = f.occupancy.bits.clone()
        F.prune(f, iteration=500, warmup_iters=1000, period=100)
        assert torch.equal(f.occupancy.bits, before)

    def test_off_period_is_identity(self, unit_bbox):
        f = RadianceField((8, 8, 8), unit_bbox)
        f.density = torch.zeros((8, 8, 8))
        before = f.occupancy.bits.clone()
        F.prune(f, iteration=1050, warmup_iters=1000, period=100)
        assert torch.equal(f.occupancy.bits, before)

    def test_zero_density_prunes_everything(self, unit_bbox):
        # softplus(0) = ln 2 < threshold 1.0
        f = RadianceField((8, 8, 8), unit_bbox)
        f.density = torch.zeros((8, 8, 8))
        f.occupancy.prune_threshold = 1.0
        F.prune(f, iteration=2000, warmup_iters=1000, period=100)
        assert not bool(f.occupancy.bits.any())

    def test_opaque_solid_keeps_everything(self, unit_bbox):
        f = RadianceField((8, 8, 8), unit_bbox)
        f.density = torch.full((8, 8, 8), 40.0)
        F.prune(f, iteration=2000, warmup_iters=1000, period=100)
        assert bool(f.occupancy.bits.all())

    def test_seeded_bits_survive_warmup_pruning(self, unit_bbox):
        f = RadianceField((8, 8, 8), unit_bbox)
        f.density = torch.zeros((8, 8, 8))
        f.occupancy.bits[:] = False
        F.seed_edit_region(f, AABox([-0.3, -0.3, -0.3], [0.3, 0.3, 0.3]))
        seeded = f.occupancy.seeded.clone()
        for it in (100, 200, 300, 900):
            F.prune(f, iteration=it, warmup_iters=1000, period=100)
        assert torch.equal(f.occupancy.bits & seeded, seeded)
        # After warm-up the same empty cells are cullable.
        F.prune(f, iteration=1000, warmup_iters=1000, period=100)
        assert not bool(f.occupancy.bits.any())


class TestCarve:
    def _sphere_and_views(self):
        from scipy import ndimage

        from sketchfield.render import orbit_camera, render_view
        from sketchfield.sketch import SketchSet, SketchView, project_points

        f = F.synth_scene("sphere", 48)
        cams = [orbit_camera(a, 0.0, 3.0, width=48, height=48) for a in (0.0, 90.0)]
        # Top-cap mask: dilated silhouette cut above the z = 0.12 image row.
        # Elevation-0 cameras make image rows correspond to z slabs, so rays
        # through the mask only traverse material inside the two-view hull.
        views = []
        for cam in cams:
            out = render_view(f, cam)
            sil = ndimage.binary_dilation(out.alpha > 0.02, iterations=3)
            uv, _, _ = project_points(np.array([[0.0, 0.0, 0.12]]), cam)
            cap_row = int(np.floor(uv[0, 1]))
            mask = sil.copy()
            mask[cap_row:, :] = False
            views.append(SketchView.from_mask(cam, mask, out.rgb))
        return f, SketchSet.build(views, f.bbox, 48)

    def test_full_masks_empty_everything(self):
        from sketchfield.render import orbit_camera
        from sketchfield.sketch import SketchView

        f = F.synth_scene("sphere", 24)
        cams = [orbit_camera(a, 0.0, 3.0, width=32, height=32) for a in (0.0, 90.0)]
        views = [SketchView.from_mask(c, np.ones((32, 32), bool)) for c in cams]
        carved = F.carve(f, views)
        assert np.all(torch.nn.functional.softplus(carved.density).numpy() < 1e-4)
        assert not bool(carved.occupancy.bits.any())

    def test_empty_masks_identity(self):
        from sketchfield.render import orbit_camera
        from sketchfield.sketch import SketchView

        f = F.synth_scene("sphere", 24)
        cams = [orbit_camera(a, 0.0, 3.0, width=32, height=32) for a in (0.0, 90.0)]
        views = [SketchView.from_mask(c, np.zeros((32, 32), bool)) for c in cams]
        carved = F.carve(f, views)
        assert F.fields_equal(carved, f)

    def test_carve_clears_rendered_masks(self):
        from sketchfield.render import render_view

        f, sketches = self._sphere_and_views()
        carved = F.carve(f, sketches)
        for view in sketches.views:
            out = render_view(carved, view.camera)
            assert out.alpha[view.mask].mean() <= 0.05

    def test_idempotent_bit_exact(self):
        f, sketches = self._sphere_and_views()
        once = F.carve(f, sketches)
        twice = F.carve(once, sketches)
        assert F.fields_equal(once, twice)

    def test_needs_views(self):
        from sketchfield.errors import EmptySketchSet

        f = F.synth_scene("sphere", 16)
        with pytest.raises(EmptySketchSet):
            F.carve(f, [])


class TestSynth:
    def test_sphere_center_occupied(self, unit_bbox):
        f = F.synth_scene("sphere", 32, unit_bbox, radius_frac=0.5)
        d, _ = f.eval_points(unit_bbox.center[None])
        assert d[0] > f.occupancy.prune_threshold

    def test_outside_sphere_is_empty(self, unit_bbox):
        f = F.synth_scene("sphere", 32, unit_bbox, radius_frac=0.35)
        r = 0.35 * 1.0
        probe = np.array([[0.0, 0.0, r + 3 * f.voxel_size[2]]])
        d, _ = f.eval_points(probe)
        assert d[0] < 1e-4

    def test_composite_two_albedos(self):
        from sketchfield.render import orbit_camera, render_view

        f = F.synth_scene("composite", 48)
        cam = orbit_camera(0.0, 10.0, 3.2, width=64, height=64)
        out = render_view(f, cam)
        hit = out.alpha > 0.5
        cols = out.rgb[hit]
        # plate (gray) and sphere (red-ish) separate cleanly on the red channel
        redness = cols[:, 0] - cols[:, 1]
        assert (redness > 0.15).any() and (np.abs(redness) < 0.05).any()

    def test_occupancy_consistent(self):
        f = F.synth_scene("composite", 32)
        assert torch.equal(f.occupancy.bits, F.density_bits(f))


class TestCheckpoint:
    def test_roundtrip_bit_exact_many(self, rng, tmp_path):
        for i in range(20):
            res = tuple(int(v) for v in rng.integers(2, 12, 3))
            f = RadianceField(res, AABox(rng.uniform(-2, 0, 3), rng.uniform(0.5, 2, 3)))
            f.density = torch.as_tensor(rng.normal(0, 3, res).astype(np.float32))
            f.color = torch.as_tensor(rng.normal(0, 3, res + (3,)).astype(np.float32))
            f.occupancy = OccupancyGrid(
                bits=torch.as_tensor(rng.random(res) > 0.5),
                prune_threshold=float(rng.uniform(0.1, 2.0)),
            )
            f.metadata = {"i": i, "note": "roundtrip"}
            path = tmp_path / f"f{i}.skfd"
            F.save(f, path)
            g = F.load(path)
            assert F.fields_equal(f, g)
            assert g.metadata["i"] == i
            assert g.occupancy.prune_threshold == f.occupancy.prune_threshold

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.skfd"
        f = F.synth_scene("sphere", 8)
        F.save(f, p)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(BadMagic):
            F.load(p)

    def test_version_mismatch(self, tmp_path):
        p = tmp_path / "x.skfd"
        F.save(F.synth_scene("sphere", 8), p)
        raw = bytearray(p.read_bytes())
        raw[4:8] = b"v999"
        p.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatch):
            F.load(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "x.skfd"
        F.save(F.synth_scene("sphere", 8), p)
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(TruncatedFile):
            F.load(p)

    def test_corrupt_payload_fails_crc(self, tmp_path):
        p = tmp_path / "x.skfd"
        F.save(F.synth_scene("sphere", 8), p)
        raw = bytearray(p.read_bytes())
        raw[200] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatch):
            F.load(p)
