import numpy as np
import pytest
from helpers import check_grad

from convreg.grids import DisplacementField, Geometry, Image, LandmarkSet, SegmentationMask
from convreg.image import (
    crop_to_multiple,
    downsample_avg,
    gaussian_smooth,
    normalize_percentile,
    rescale_fixed_range,
    sample_volume_tensor,
    sample_channels_tensor,
    transform_points,
    warp_linear,
    warp_nearest,
    warp_tensor,
)
from convreg.autodiff import Tensor


def ramp_image(shape=(8, 8, 8), spacing=(1.0, 1.0, 1.0)):
    g = Geometry(shape, spacing, (0.0, 0.0, 0.0)).voxel_grid_mm()
    return Image(g[0] + 0.25 * g[1] - 0.5 * g[2], spacing)


class TestNormalization:
    def test_endpoints(self):
        rng = np.random.default_rng(0)
        v = rng.uniform(10, 20, size=(9, 9, 9))
        img = normalize_percentile(Image(v))
        assert img.voxels.min() == 0.0
        assert img.voxels.max() == 1.0

    def test_values_above_p99_clamped(self):
        v = np.zeros((10, 10, 10))
        v.reshape(-1)[:10] = 100.0  # top 1% outliers
        v.reshape(-1)[10:] = np.linspace(0, 50, 990)
        out = normalize_percentile(Image(v))
        assert out.voxels.max() == 1.0
        assert (out.voxels == 1.0).sum() >= 10

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(1)
        v = np.concatenate([np.linspace(0, 1000, 990), rng.uniform(9e5, 1e6, 10)])
        rng.shuffle(v)
        v = v.reshape(10, 10, 10)
        out = normalize_percentile(Image(v))
        # sort-based 99th percentile with linear interpolation
        s = np.sort(v.reshape(-1))
        pos = 0.99 * (s.size - 1)
        lo_i = int(np.floor(pos))
        p99 = s[lo_i] + (pos - lo_i) * (s[lo_i + 1] - s[lo_i])
        want = np.clip((v - v.min()) / (p99 - v.min()), 0.0, 1.0)
        np.testing.assert_allclose(out.voxels, want, rtol=1e-12)

    def test_constant_rejected(self):
        with pytest.raises(ValueError):
            normalize_percentile(Image(np.ones((4, 4, 4))))

    def test_monotone(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=(6, 6, 6))
        out = normalize_percentile(Image(v)).voxels
        order = np.argsort(v.reshape(-1))
        assert np.all(np.diff(out.reshape(-1)[order]) >= 0)


class TestRescale:
    def test_endpoints_and_midpoint(self):
        img = Image(np.array([[[-1000.0, 3095.0, 1047.5]]]))
        out = rescale_fixed_range(img, -1000, 3095)
        np.testing.assert_allclose(out.voxels.reshape(-1), [0.0, 1.0, 0.5])

    def test_clamped_recipe(self):
        img = Image(np.array([[[0.0]]]))
        out = rescale_fixed_range(img, -1000, -200, clamp=True)
        assert out.voxels.reshape(-1)[0] == 1.0

    def test_unclamped(self):
        img = Image(np.array([[[200.0]]]))
        out = rescale_fixed_range(img, 0, 100, clamp=False)
        assert out.voxels.reshape(-1)[0] == 2.0

    def test_bad_range(self):
        with pytest.raises(ValueError):
            rescale_fixed_range(Image(np.zeros((2, 2, 2))), 5, 5)


class TestDownsample:
    def test_identity_factor(self):
        img = ramp_image()
        out = downsample_avg(img, (1, 1, 1))
        np.testing.assert_allclose(out.voxels, img.voxels)
        assert out.spacing == img.spacing and out.origin == img.origin

    def test_constant_image_doubles_spacing(self):
        img = Image(np.full((4, 4, 4), 2.0), spacing=(1.0, 2.0, 3.0))
        out = downsample_avg(img, 2)
        np.testing.assert_allclose(out.voxels, 2.0)
        assert out.spacing == (2.0, 4.0, 6.0)
        assert out.origin == (0.5, 1.0, 1.5)

    def test_matches_pool_oracle(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=(8, 8, 8))
        out = downsample_avg(Image(v), 2)
        want = v.reshape(4, 2, 4, 2, 4, 2).mean(axis=(1, 3, 5))
        np.testing.assert_allclose(out.voxels, want, rtol=1e-12)

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError):
            downsample_avg(Image(np.zeros((5, 4, 4))), 2)

    def test_crop_to_multiple(self):
        img = Image(np.zeros((9, 8, 7)))
        out = crop_to_multiple(img, (4, 4, 4))
        assert out.shape == (8, 8, 4)


class TestGaussian:
    def test_sigma_zero_identity(self):
        img = ramp_image()
        out = gaussian_smooth(img, 0.0)
        np.testing.assert_allclose(out.voxels, img.voxels)

    def test_constant_unchanged(self):
        img = Image(np.full((8, 8, 8), 5.0))
        out = gaussian_smooth(img, (2.0, 1.0, 0.5))
        np.testing.assert_allclose(out.voxels, 5.0, rtol=1e-12)

    def test_impulse_mass_preserved(self):
        v = np.zeros((17, 17, 17))
        v[8, 8, 8] = 1.0
        out = gaussian_smooth(Image(v), 1.5)
        assert abs(out.voxels.sum() - 1.0) < 1e-6
        # kernel itself appears around the impulse
        assert out.voxels[8, 8, 8] == out.voxels.max()

    def test_sigma_in_mm_uses_spacing(self):
        v = np.zeros((17, 17, 17))
        v[8, 8, 8] = 1.0
        wide = gaussian_smooth(Image(v, spacing=(1, 1, 1)), 2.0)
        narrow = gaussian_smooth(Image(v, spacing=(2, 2, 2)), 2.0)
        # same mm sigma over coarser voxels concentrates more per voxel
        assert narrow.voxels[8, 8, 8] > wide.voxels[8, 8, 8]


def constant_dvf(shape, u, spacing=(1, 1, 1), origin=(0, 0, 0)):
    v = np.zeros((3,) + tuple(shape))
    for a in range(3):
        v[a] = u[a]
    return DisplacementField(v, spacing, origin)


class TestWarpLinear:
    def test_zero_dvf_identity(self):
        img = ramp_image()
        out = warp_linear(img, constant_dvf(img.shape, (0, 0, 0)))
        np.testing.assert_allclose(out.voxels, img.voxels)

    def test_one_voxel_shift(self):
        rng = np.random.default_rng(5)
        img = Image(rng.normal(size=(6, 6, 6)))
        out = warp_linear(img, constant_dvf(img.shape, (1, 0, 0)))
        np.testing.assert_allclose(out.voxels[:5], img.voxels[1:], atol=1e-12)

    def test_half_voxel_shift_on_ramp(self):
        img = ramp_image()
        out = warp_linear(img, constant_dvf(img.shape, (0.5, 0, 0)))
        want = 0.5 * (img.voxels[:-1] + img.voxels[1:])
        np.testing.assert_allclose(out.voxels[:7], want, atol=1e-9)

    def test_linear_field_reproduced_exactly(self):
        # trilinear interpolation is exact on globally linear intensities
        img = ramp_image((9, 9, 9))
        rng = np.random.default_rng(7)
        u = rng.uniform(-1.5, 1.5, size=(3,) + img.shape)
        # keep sample positions inside the volume
        grid = img.geometry().voxel_grid_mm()
        pos = grid + u
        for a in range(3):
            u[a] = np.clip(pos[a], 0, img.shape[a] - 1) - grid[a]
        out = warp_linear(img, DisplacementField(u, img.spacing, img.origin))
        g = grid + u
        want = g[0] + 0.25 * g[1] - 0.5 * g[2]
        np.testing.assert_allclose(out.voxels, want, atol=1e-9)

    def test_border_clamps(self):
        img = ramp_image()
        out = warp_linear(img, constant_dvf(img.shape, (-3.0, 0, 0)))
        np.testing.assert_allclose(out.voxels[0], img.voxels[0])

    def test_mm_units_via_spacing(self):
        rng = np.random.default_rng(9)
        img = Image(rng.normal(size=(6, 6, 6)), spacing=(2.0, 2.0, 2.0))
        out = warp_linear(img, constant_dvf(img.shape, (2.0, 0, 0), spacing=(2, 2, 2)))
        np.testing.assert_allclose(out.voxels[:5], img.voxels[1:], atol=1e-12)


class TestWarpNearest:
    def test_zero_identity(self):
        m = SegmentationMask(np.random.default_rng(0).integers(0, 3, size=(5, 5, 5)))
        out = warp_nearest(m, constant_dvf(m.shape, (0, 0, 0)))
        np.testing.assert_array_equal(out.voxels, m.voxels)

    def test_integer_shift(self):
        m = SegmentationMask(np.random.default_rng(1).integers(0, 4, size=(6, 6, 6)))
        out = warp_nearest(m, constant_dvf(m.shape, (0, 1, 0)))
        np.testing.assert_array_equal(out.voxels[:, :5], m.voxels[:, 1:])

    def test_label_set_closure(self):
        rng = np.random.default_rng(2)
        m = SegmentationMask(rng.integers(0, 5, size=(8, 8, 8)))
        u = rng.uniform(-2, 2, size=(3, 8, 8, 8))
        out = warp_nearest(m, DisplacementField(u))
        assert set(np.unique(out.voxels)) <= set(np.unique(m.voxels))

    def test_tie_breaks_toward_lower_index(self):
        m = SegmentationMask(np.arange(4).reshape(4, 1, 1))
        out = warp_nearest(m, constant_dvf((4, 1, 1), (0.5, 0, 0)))
        np.testing.assert_array_equal(out.voxels.reshape(-1), [0, 1, 2, 3])


class TestTransformPoints:
    def test_zero_dvf(self):
        lm = LandmarkSet(np.array([[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]]))
        out = transform_points(lm, constant_dvf((8, 8, 8), (0, 0, 0)))
        np.testing.assert_allclose(out.points, lm.points)

    def test_constant_shift(self):
        lm = LandmarkSet(np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]))
        out = transform_points(lm, constant_dvf((8, 8, 8), (1, 2, 3)))
        np.testing.assert_allclose(out.points, lm.points + [1, 2, 3])

    def test_grid_nodes_exact(self):
        rng = np.random.default_rng(3)
        u = rng.normal(size=(3, 6, 6, 6))
        dvf = DisplacementField(u, spacing=(2, 2, 2))
        pts = np.array([[2.0, 4.0, 6.0], [0.0, 0.0, 0.0], [8.0, 2.0, 10.0]])
        out = transform_points(LandmarkSet(pts), dvf)
        for n, p in enumerate(pts):
            idx = tuple((p / 2).astype(int))
            np.testing.assert_allclose(out.points[n], p + u[(slice(None),) + idx], atol=1e-12)

    def test_outside_domain_rejected(self):
        with pytest.raises(ValueError):
            transform_points(LandmarkSet([[50.0, 0.0, 0.0]]), constant_dvf((8, 8, 8), (0, 0, 0)))


class TestDifferentiableWarp:
    def test_matches_warp_linear(self):
        rng = np.random.default_rng(11)
        img = Image(rng.normal(size=(6, 6, 6)))
        u = rng.uniform(-1, 1, size=(3, 6, 6, 6))
        dvf = DisplacementField(u)
        out_np = warp_linear(img, dvf)
        out_t = warp_tensor(img.voxels, Tensor(u, dtype=np.float64), img.geometry(), dvf.geometry())
        np.testing.assert_allclose(out_t.data, out_np.voxels, rtol=1e-12)

    def test_gradient_wrt_dvf(self):
        rng = np.random.default_rng(13)
        vol = rng.normal(size=(6, 6, 6))
        geom = Geometry((6, 6, 6), (1, 1, 1), (0, 0, 0))
        # offsets at least 0.1 voxel from cell faces
        u0 = rng.uniform(0.15, 0.35, size=(3, 6, 6, 6))
        w = rng.normal(size=(6, 6, 6))

        def loss(t):
            warped = warp_tensor(vol, t, geom, geom)
            return (warped * Tensor(w, dtype=np.float64)).sum()

        check_grad(loss, u0, step=1e-5, rtol=1e-3)

    def test_sample_volume_tensor_gradient(self):
        rng = np.random.default_rng(17)
        vol = rng.normal(size=(6, 6, 6))
        pts0 = rng.uniform(1.2, 4.3, size=(3, 20))
        w = rng.normal(size=20)

        def loss(t):
            return (sample_volume_tensor(vol, t) * Tensor(w, dtype=np.float64)).sum()

        check_grad(loss, pts0, step=1e-5, rtol=1e-3)

    def test_sample_channels_tensor_gradient_and_value(self):
        rng = np.random.default_rng(19)
        field0 = rng.normal(size=(3, 5, 5, 5))
        pts = rng.uniform(0.2, 3.8, size=(3, 15))
        out = sample_channels_tensor(Tensor(field0, dtype=np.float64), pts)
        from convreg.image import trilinear_sample

        want = np.stack([trilinear_sample(field0[c], pts) for c in range(3)])
        np.testing.assert_allclose(out.data, want, rtol=1e-12)
        w = rng.normal(size=(3, 15))

        def loss(t):
            return (sample_channels_tensor(t, pts) * Tensor(w, dtype=np.float64)).sum()

        check_grad(loss, field0)
