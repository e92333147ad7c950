"""Pinhole projection and z-buffer splatting against a per-pixel oracle."""

import math

import numpy as np
import pytest

from pointshade import projection as pj


def brute_force_zbuffer(u, v, depth, params, width, height):
    """Scan all points per pixel; nearest covering point wins, index ties.

    Independent of the production rasterizer: no shared rounding or
    scatter code, float32 intensity math written out directly.
    """
    iu = np.copysign(np.floor(np.abs(u) + 0.5), u)
    iv = np.copysign(np.floor(np.abs(v) + 0.5), v)
    r = params.window // 2
    px = np.arange(width)
    py = np.arange(height)
    cover = (np.abs(px[None, :, None] - iu[None, None, :]) <= r) & (
        np.abs(py[:, None, None] - iv[None, None, :]) <= r
    )
    d32 = depth.astype(np.float32)
    dmat = np.where(cover, d32[None, None, :], np.float32(np.inf))
    best = dmat.argmin(axis=2)  # first minimum: lowest point index on ties
    covered = cover.any(axis=2)
    inten = np.minimum(
        np.exp(-(d32 - np.float32(params.alpha)) / np.float32(params.beta)), np.float32(1.0)
    )
    return np.where(covered, inten[best], np.float32(0.0))


def make_cam(**overrides):
    defaults = dict(
        position=np.zeros(3),
        target=np.array([0.0, 0.0, 1.0]),
        up=np.array([0.0, 1.0, 0.0]),
        focal_px=100.0,
        principal_point=(128.0, 128.0),
        image_size=(256, 256),
    )
    defaults.update(overrides)
    return pj.Camera(**defaults)


class TestProject:
    def test_optical_axis(self):
        cloud = pj.PointCloud(np.array([[0.0, 0.0, 2.0]]))
        proj = pj.project(cloud, make_cam())
        assert proj[0].u == pytest.approx(128.0)
        assert proj[0].v == pytest.approx(128.0)
        assert proj[0].depth == pytest.approx(2.0)

    def test_pinhole_example(self):
        """Point (0.5, 0, 2), focal 100, principal (128, 128) -> (153, 128)."""
        cloud = pj.PointCloud(np.array([[0.5, 0.0, 2.0]]))
        proj = pj.project(cloud, make_cam())
        assert proj[0].u == pytest.approx(153.0)
        assert proj[0].v == pytest.approx(128.0)
        assert proj[0].depth == pytest.approx(2.0)

    def test_mirror_symmetry(self):
        cloud = pj.PointCloud(np.array([[0.3, 0.2, 2.0], [-0.3, 0.2, 2.0]]))
        proj = pj.project(cloud, make_cam())
        assert proj.u[0] - 128.0 == pytest.approx(128.0 - proj.u[1])
        assert proj.v[0] == pytest.approx(proj.v[1])

    def test_points_behind_camera_dropped(self):
        cloud = pj.PointCloud(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 3.0]]))
        proj = pj.project(cloud, make_cam())
        assert len(proj) == 1
        assert proj[0].depth == pytest.approx(3.0)

    def test_all_behind_gives_empty(self):
        cloud = pj.PointCloud(np.array([[0.0, 0.0, -2.0]]))
        assert len(pj.project(cloud, make_cam())) == 0

    def test_deterministic(self, rng):
        cloud = pj.PointCloud(rng.normal(size=(50, 3)) + [0, 0, 5])
        a = pj.project(cloud, make_cam())
        b = pj.project(cloud, make_cam())
        np.testing.assert_array_equal(a.u, b.u)
        np.testing.assert_array_equal(a.depth, b.depth)

    def test_invalid_camera(self):
        with pytest.raises(ValueError, match="parallel"):
            make_cam(up=np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ValueError, match="focal"):
            make_cam(focal_px=0.0)


class TestIntensity:
    def test_at_alpha(self):
        assert pj.intensity(1.0, pj.ZBufferParams(alpha=1.0, beta=0.6)) == pytest.approx(1.0, abs=1e-6)

    def test_one_beta_out(self):
        params = pj.ZBufferParams(alpha=1.0, beta=0.7)
        assert pj.intensity(1.7, params) == pytest.approx(math.exp(-1.0), abs=1e-6)

    def test_far_depth_approaches_background(self):
        assert pj.intensity(60.0, pj.ZBufferParams()) < 1e-6

    def test_clamped_below_alpha(self):
        assert pj.intensity(0.2, pj.ZBufferParams(alpha=1.0, beta=1.0)) == pytest.approx(1.0)


class TestRasterize:
    def test_single_point_5x5_block(self):
        proj = pj.ProjectedPoints(
            u=np.array([16.0]), v=np.array([16.0]), depth=np.array([1.5])
        )
        params = pj.ZBufferParams()
        img = pj.rasterize(proj, params, (32, 32)).intensities
        nz = np.nonzero(img)
        assert len(nz[0]) == 25
        assert nz[0].min() == 14 and nz[0].max() == 18
        assert nz[1].min() == 14 and nz[1].max() == 18
        block = img[14:19, 14:19]
        assert (block == block[0, 0]).all() and block[0, 0] > 0

    def test_nearest_point_wins(self):
        proj = pj.ProjectedPoints(
            u=np.array([10.0, 10.0]), v=np.array([10.0, 10.0]), depth=np.array([1.2, 2.5])
        )
        params = pj.ZBufferParams()
        img = pj.rasterize(proj, params, (32, 32)).intensities
        assert img[10, 10] == pj.intensity(np.array(1.2, dtype=np.float64), params)

    def test_monotonicity_flip(self):
        params = pj.ZBufferParams()
        def winner(d_near):
            proj = pj.ProjectedPoints(
                u=np.array([8.0, 8.0]), v=np.array([8.0, 8.0]),
                depth=np.array([d_near, 2.0]),
            )
            return pj.rasterize(proj, params, (16, 16)).intensities[8, 8]
        assert winner(1.5) == pytest.approx(pj.intensity(1.5, params), rel=1e-6)
        assert winner(2.5) == pytest.approx(pj.intensity(2.0, params), rel=1e-6)

    def test_matches_brute_force_oracle(self, rng):
        for trial in range(20):
            n = int(rng.integers(1, 200))
            w = int(rng.integers(4, 64))
            h = int(rng.integers(4, 64))
            u = rng.uniform(-5, w + 5, n)
            v = rng.uniform(-5, h + 5, n)
            depth = rng.uniform(0.5, 4.0, n)
            params = pj.ZBufferParams(
                alpha=float(rng.uniform(0.5, 1.5)), beta=float(rng.uniform(0.3, 1.5))
            )
            proj = pj.ProjectedPoints(u=u, v=v, depth=depth)
            got = pj.rasterize(proj, params, (w, h)).intensities
            want = brute_force_zbuffer(u, v, depth, params, w, h)
            np.testing.assert_array_equal(got, want)

    def test_tie_break_is_first_point(self):
        proj = pj.ProjectedPoints(
            u=np.array([5.0, 5.0]), v=np.array([5.0, 5.0]), depth=np.array([1.5, 1.5])
        )
        params = pj.ZBufferParams()
        img = pj.rasterize(proj, params, (12, 12)).intensities
        want = brute_force_zbuffer(proj.u, proj.v, proj.depth, params, 12, 12)
        np.testing.assert_array_equal(img, want)

    def test_backends_bit_identical(self, rng):
        if not pj.HAVE_COMPILED_SPLAT:
            pytest.skip("compiled kernel not built")
        n = 500
        u = rng.uniform(-3, 67, n)
        v = rng.uniform(-3, 67, n)
        depth = rng.uniform(0.8, 4.0, n)
        proj = pj.ProjectedPoints(u=u, v=v, depth=depth)
        params = pj.ZBufferParams()
        a = pj.rasterize(proj, params, (64, 64), backend="compiled").intensities
        b = pj.rasterize(proj, params, (64, 64), backend="python").intensities
        np.testing.assert_array_equal(a, b)

    def test_values_bounded_and_positive_iff_covered(self, rng):
        n = 300
        proj = pj.ProjectedPoints(
            u=rng.uniform(0, 48, n), v=rng.uniform(0, 48, n), depth=rng.uniform(0.2, 6.0, n)
        )
        params = pj.ZBufferParams()
        img = pj.rasterize(proj, params, (48, 48)).intensities
        assert img.min() >= 0.0 and img.max() <= 1.0
        covered = brute_force_zbuffer(proj.u, proj.v, proj.depth, params, 48, 48) > 0
        assert ((img > 0) == covered).all()

    def test_empty_projection(self):
        proj = pj.ProjectedPoints(u=np.zeros(0), v=np.zeros(0), depth=np.zeros(0))
        img = pj.rasterize(proj, pj.ZBufferParams(), (8, 8)).intensities
        assert (img == 0).all()

    def test_off_image_splat_clipped(self):
        proj = pj.ProjectedPoints(u=np.array([-1.0]), v=np.array([0.0]), depth=np.array([1.0]))
        img = pj.rasterize(proj, pj.ZBufferParams(), (8, 8)).intensities
        assert (img[:3, :2] > 0).all()
        assert img[0, 2] == 0.0


class TestNormalizeCloud:
    def test_identity_on_normalized(self):
        pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
        normalized, scale, centroid = pj.normalize_cloud(pj.PointCloud(pts))
        assert scale == pytest.approx(1.0)
        np.testing.assert_allclose(centroid, 0.0, atol=1e-12)
        np.testing.assert_allclose(normalized.points, pts)

    def test_scale_invariance(self, rng):
        pts = rng.normal(size=(40, 3))
        a, _, _ = pj.normalize_cloud(pj.PointCloud(pts))
        b, _, _ = pj.normalize_cloud(pj.PointCloud(pts * 10.0))
        np.testing.assert_allclose(a.points, b.points, atol=1e-12)

    def test_unit_radius(self, rng):
        pts = rng.normal(size=(100, 3)) * 3.0 + [5, -2, 1]
        normalized, scale, centroid = pj.normalize_cloud(pj.PointCloud(pts))
        norms = np.linalg.norm(normalized.points, axis=1)
        assert norms.max() == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_allclose(normalized.points.mean(axis=0), 0.0, atol=1e-9)

    def test_degenerate_cloud(self):
        with pytest.raises(pj.DegenerateCloudError):
            pj.normalize_cloud(pj.PointCloud(np.ones((5, 3))))


class TestPointCloudValidation:
    def test_requires_points(self):
        with pytest.raises(ValueError):
            pj.PointCloud(np.zeros((0, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            pj.PointCloud(np.array([[0.0, np.nan, 0.0]]))

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            pj.PointCloud(np.zeros((3, 2)))
