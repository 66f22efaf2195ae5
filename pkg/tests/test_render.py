import math

import numpy as np
import pytest
import torch

from sketchfield import field as F
from sketchfield import render as R
from sketchfield.errors import NonFiniteGradient
from sketchfield.field import AABox, OccupancyGrid, RadianceField

from conftest import random_field


def reference_composite(alphas, colors, bg):
    """Straightforward front-to-back compositing for cross-checking."""
    T = 1.0
    acc = np.zeros(3)
    alpha = 0.0
    for a, c in zip(alphas, colors):
        w = T * a
        acc += w * np.asarray(c)
        alpha += w
        T *= 1.0 - a
    return acc + (1.0 - alpha) * np.asarray(bg), alpha


class TestRays:
    def test_center_pixel_is_forward(self):
        cam = R.orbit_camera(40.0, 25.0, 2.0, width=9, height=9)
        o, d = R.generate_rays(cam, pixel_subset=np.array([[4, 4]]))
        forward = -cam.pose[:3, 2]
        assert np.allclose(d[0], forward, atol=1e-9)
        assert np.allclose(o[0], cam.position)

    def test_corners_symmetric(self):
        cam = R.orbit_camera(0.0, 0.0, 2.0, width=8, height=8)
        o, d = R.generate_rays(cam)
        d = d.reshape(8, 8, 3)
        fwd = -cam.pose[:3, 2]
        angles = np.arccos(np.clip(d @ fwd, -1, 1))
        assert angles[0, 0] == pytest.approx(angles[7, 7], abs=1e-12)
        assert angles[0, 7] == pytest.approx(angles[7, 0], abs=1e-12)

    def test_counts_and_unit_norm(self):
        cam = R.orbit_camera(10.0, 5.0, 2.0, width=4, height=4)
        o, d = R.generate_rays(cam)
        assert o.shape == (16, 3) and d.shape == (16, 3)
        assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-6)


def single_cells_field(cells, sigma_delta, step, colors=None, res=4):
    """Field with given occupied cells, density sigma*step = sigma_delta."""
    f = RadianceField((res, res, res), AABox([-1, -1, -1], [1, 1, 1]))
    sigma = sigma_delta / step
    f.density = torch.full((res, res, res), float(F.softplus_inv(sigma)))
    if colors is not None:
        for cell, col in colors.items():
            f.color[cell] = torch.as_tensor(F.logit(np.array(col)), dtype=torch.float32)
    bits = torch.zeros((res, res, res), dtype=torch.bool)
    for cell in cells:
        bits[cell] = True
    f.occupancy = OccupancyGrid(bits=bits)
    return f


class TestMarch:
    # Step 0.5 on a 4^3 grid over [-1,1]^3 puts exactly one sample at each
    # cell center along an axis ray entering at the bbox face.
    STEP = 0.5

    def ray(self):
        return np.array([-2.0, 0.25, 0.25]), np.array([1.0, 0.0, 0.0])

    def test_empty_field(self):
        f = RadianceField((4, 4, 4), AABox([-1, -1, -1], [1, 1, 1]))
        f.occupancy.bits[:] = False
        s = R.march(f, self.ray(), self.STEP, background=(0.2, 0.4, 0.6))
        assert s.alpha == 0.0
        assert np.allclose(s.rgb, [0.2, 0.4, 0.6])

    def test_single_sample_half_alpha(self):
        f = single_cells_field([(1, 2, 2)], math.log(2.0), self.STEP)
        s = R.march(f, self.ray(), self.STEP)
        assert s.alpha == pytest.approx(0.5, abs=1e-6)

    def test_two_samples_hand_composited(self):
        c1, c2 = (0.9, 0.1, 0.2), (0.1, 0.8, 0.3)
        f = single_cells_field(
            [(1, 2, 2), (2, 2, 2)],
            math.log(2.0),
            self.STEP,
            colors={(1, 2, 2): c1, (2, 2, 2): c2},
        )
        bg = (1.0, 1.0, 1.0)
        s = R.march(f, self.ray(), self.STEP, background=bg)
        want_rgb, want_alpha = reference_composite([0.5, 0.5], [c1, c2], bg)
        assert s.alpha == pytest.approx(0.75, abs=1e-6)
        assert np.allclose(s.rgb, want_rgb, atol=1e-6)
        assert np.allclose(want_rgb, 0.5 * np.array(c1) + 0.25 * np.array(c2) + 0.25)

    def test_transparent_insertion_reference(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 8))
            alphas = rng.uniform(0, 1, n)
            colors = rng.uniform(0, 1, (n, 3))
            bg = rng.uniform(0, 1, 3)
            rgb0, a0 = reference_composite(alphas, colors, bg)
            k = int(rng.integers(0, n + 1))
            alphas2 = np.insert(alphas, k, 0.0)
            colors2 = np.insert(colors, k, rng.uniform(0, 1, 3), axis=0)
            rgb1, a1 = reference_composite(alphas2, colors2, bg)
            assert a1 == pytest.approx(a0, abs=1e-12)
            assert np.allclose(rgb1, rgb0, atol=1e-12)

    def test_enabling_empty_cells_changes_nothing_measurable(self, rng):
        f = F.synth_scene("sphere", 24)
        base = R.render_view(f, R.orbit_camera(30, 20, 3.0, width=24, height=24))
        g = f.clone()
        g.occupancy.bits = torch.ones_like(g.occupancy.bits)
        full = R.render_view(g, R.orbit_camera(30, 20, 3.0, width=24, height=24))
        assert np.abs(base.rgb - full.rgb).max() <= 1e-3
        assert np.abs(base.alpha - full.alpha).max() <= 1e-3


class TestRenderView:
    def test_sphere_front_view_matches_analytic_disc(self):
        f = F.synth_scene("sphere", 64, radius_frac=0.35)
        cam = R.orbit_camera(0.0, 0.0, 3.0, width=64, height=64)
        out = R.render_view(f, cam)
        got = out.alpha > 0.5
        # Analytic silhouette: the cone tangent to the sphere.
        r, dist = 0.35, 3.0
        half_angle = math.asin(r / dist)
        vv, uu = np.mgrid[0:64, 0:64]
        x = (uu - 31.5) / cam.focal
        y = (vv - 31.5) / cam.focal
        ang = np.arctan(np.hypot(x, y))
        want = ang < half_angle
        # agreement within one pixel of the boundary
        from scipy import ndimage

        boundary_pad = ndimage.binary_dilation(want ^ ndimage.binary_erosion(want), iterations=1)
        disagree = (got ^ want) & ~boundary_pad
        assert disagree.sum() == 0

    def test_camera_looking_away(self):
        f = F.synth_scene("sphere", 16)
        pose = R.orbit_camera(0.0, 0.0, 3.0).pose.copy()
        pose[:3, 2] *= -1.0  # flip view direction away from the scene
        pose[:3, 0] *= -1.0  # keep det +1
        cam = R.Camera(16, 16, math.radians(45), pose, 0.05, 100.0)
        out = R.render_view(f, cam, background=(0.3, 0.5, 0.7))
        assert np.all(out.alpha == 0)
        assert np.allclose(out.rgb, [0.3, 0.5, 0.7])

    def test_deterministic(self):
        f = F.synth_scene("composite", 32)
        cam = R.orbit_camera(25.0, 15.0, 3.0, width=32, height=32)
        a = R.render_view(f, cam)
        b = R.render_view(f, cam)
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.alpha, b.alpha)
        assert np.array_equal(a.depth, b.depth)

    def test_weight_sums_bounded(self, rng):
        f = random_field(rng, res=8, scale=2.0, dtype=torch.float32)
        cam = R.orbit_camera(12.0, 40.0, 2.5, width=16, height=16)
        out = R.render_view(f, cam)
        assert np.all(out.alpha <= 1.0 + 1e-6)
        assert np.all(out.alpha >= 0.0)


def scalar_objective(f, cam, step, pg):
    o, d = R.generate_rays(cam)
    with torch.no_grad():
        out = R.composite_rays(
            f.density, f.color, f, o, d, step, np.ones(3), cam.near, cam.far
        )
    H, W = cam.height, cam.width
    rgb = out["rgb"].numpy().reshape(H, W, 3)
    alpha = out["alpha"].numpy().reshape(H, W)
    return float((rgb * pg[..., :3]).sum() + (alpha * pg[..., 3]).sum())


class TestBackward:
    def test_zero_pixel_gradients(self, rng):
        f = random_field(rng, res=8)
        cam = R.orbit_camera(0, 0, 2.5, width=8, height=8)
        gd, gc = R.render_backward(f, cam, R.default_step(f), np.zeros((8, 8, 4)))
        assert torch.all(gd == 0) and torch.all(gc == 0)

    def test_rejects_nonfinite(self, rng):
        f = random_field(rng, res=8)
        cam = R.orbit_camera(0, 0, 2.5, width=8, height=8)
        pg = np.zeros((8, 8, 4))
        pg[0, 0, 0] = np.nan
        with pytest.raises(NonFiniteGradient):
            R.render_backward(f, cam, R.default_step(f), pg)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        f = random_field(rng, res=8)
        cam = R.orbit_camera(
            float(rng.uniform(0, 360)), float(rng.uniform(-30, 60)), 2.8,
            width=12, height=12,
        )
        step = R.default_step(f)
        pg = rng.normal(0, 1, (12, 12, 4))
        gd, gc = R.render_backward(f, cam, step, pg)
        h = 1e-4
        for _ in range(17):
            if rng.integers(0, 2) == 0:
                idx = tuple(int(v) for v in rng.integers(0, 8, 3))
                ana = float(gd[idx])
                orig = float(f.density[idx])
                f.density[idx] = orig + h
                fp = scalar_objective(f, cam, step, pg)
                f.density[idx] = orig - h
                fm = scalar_objective(f, cam, step, pg)
                f.density[idx] = orig
            else:
                idx = tuple(int(v) for v in rng.integers(0, 8, 3)) + (int(rng.integers(0, 3)),)
                ana = float(gc[idx])
                orig = float(f.color[idx])
                f.color[idx] = orig + h
                fp = scalar_objective(f, cam, step, pg)
                f.color[idx] = orig - h
                fm = scalar_objective(f, cam, step, pg)
                f.color[idx] = orig
            num = (fp - fm) / (2 * h)
            assert ana == pytest.approx(num, rel=1e-3, abs=1e-5)

    def test_occluded_color_gradient_is_zero(self):
        # Opaque front cell drives transmittance below the early-out; the cell
        # behind it must receive no color gradient.
        step = 0.5
        f = single_cells_field([(1, 2, 2), (2, 2, 2)], 10.0, step)  # alpha ~ 1-e^-10
        f.density = f.density.double()
        f.color = f.color.double()
        cam_pose = np.eye(4)
        cam_pose[:3, 3] = [2.0, 0.25, 0.25]
        # camera at +x looking along -x: columns x=[cos], need rotation
        cam = R.orbit_camera(0.0, 0.0, 2.0, target=(0.0, 0.25, 0.25), width=4, height=4)
        pg = np.ones((4, 4, 4))
        gd, gc = R.render_backward(f, cam, step, pg)
        # ray from +x hits cell (2,2,2) first; (1,2,2) is occluded
        assert torch.all(gc[1, 2, 2] == 0)
        assert torch.any(gc[2, 2, 2] != 0)


class TestImageIO:
    def test_png_roundtrip(self, tmp_path, rng):
        from PIL import Image

        img = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        p = tmp_path / "x.png"
        R.write_png(p, img)
        back = np.array(Image.open(p)).astype(np.float32) / 255.0
        assert np.abs(back - img).max() <= 1.0 / 255.0 + 1e-6

    def test_f32_dump(self, tmp_path, rng):
        arr = rng.normal(0, 1, (4, 5)).astype(np.float32)
        p = tmp_path / "planes.bin"
        R.write_f32(p, {"alpha": arr})
        raw = np.frombuffer(p.read_bytes(), dtype="<f4").reshape(4, 5)
        assert np.array_equal(raw, arr)
