import numpy as np
import pytest
from helpers import check_grad, cubic_bspline

from convreg.autodiff import Tensor
from convreg.grids import DisplacementField, Geometry
from convreg.transforms import (
    AffineParameters,
    BSplineGrid,
    affine_dvf,
    affine_dvf_tensor,
    affine_matrix,
    affine_matrix_tensor,
    bspline_dvf,
    bspline_dvf_direct,
    bspline_dvf_tensor,
    bspline_kernel,
    bspline_kernel_3d,
    compose,
    folding_fraction,
    identity_dvf,
    jacobian_determinant,
    jacobian_std,
    lattice_extent_for,
    make_lattice_for,
    pad_lattice,
    resample_dvf,
    squash_affine,
)

GEOM8 = Geometry((8, 8, 8), (1, 1, 1), (0, 0, 0))


class TestSquash:
    def test_zero_raw_is_identity(self):
        p = squash_affine(np.zeros(12))
        assert p.translation == (0.0, 0.0, 0.0)
        assert p.rotation == (0.0, 0.0, 0.0)
        assert p.scale == (1.0, 1.0, 1.0)
        assert p.shear == (0.0, 0.0, 0.0)

    def test_scale_asymptote(self):
        p = squash_affine(np.array([0] * 6 + [50.0, -50.0, 0.0] + [0] * 3))
        assert abs(p.scale[0] - 1.5) < 1e-9
        assert abs(p.scale[1] - 0.5) < 1e-9

    def test_rotation_formula(self):
        p = squash_affine(np.array([0, 0, 0, 0.5] + [0] * 8))
        assert abs(p.rotation[0] - np.pi * np.tanh(0.5)) < 1e-12

    def test_translation_passthrough(self):
        p = squash_affine(np.array([3.0, -4.0, 9.0] + [0] * 9))
        assert p.translation == (3.0, -4.0, 9.0)

    def test_tensor_path_matches(self):
        rng = np.random.default_rng(0)
        raw = rng.normal(size=12)
        from convreg.transforms import squash_affine_tensor

        got = squash_affine_tensor(Tensor(raw, dtype=np.float64)).data
        p = squash_affine(raw)
        np.testing.assert_allclose(got, p.as_raw_squashed(), rtol=1e-12)


class TestAffineMatrix:
    def test_identity(self):
        A = affine_matrix(AffineParameters(), center_mm=(3, 4, 5))
        np.testing.assert_allclose(A, np.hstack([np.eye(3), np.zeros((3, 1))]), atol=1e-12)

    def test_pure_translation(self):
        A = affine_matrix(AffineParameters(translation=(1, 2, 3)))
        np.testing.assert_allclose(A[:, :3], np.eye(3))
        np.testing.assert_allclose(A[:, 3], [1, 2, 3])

    def test_rotation_quarter_turn(self):
        A = affine_matrix(AffineParameters(rotation=(0, 0, np.pi / 2)))
        p = A @ np.array([1.0, 0.0, 0.0, 1.0])
        np.testing.assert_allclose(p, [0, 1, 0], atol=1e-12)

    def test_center_is_fixed_point(self):
        c = (4.0, 5.0, 6.0)
        A = affine_matrix(AffineParameters(rotation=(0.3, -0.2, 0.5), scale=(1.1, 0.9, 1.05)), center_mm=c)
        p = A @ np.array([*c, 1.0])
        np.testing.assert_allclose(p, c, atol=1e-9)

    def test_tensor_path_matches_numpy(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(size=12) * 0.5
        center = (2.0, -1.0, 3.0)
        At = affine_matrix_tensor(Tensor(raw, dtype=np.float64), center)
        A = affine_matrix(squash_affine(raw), center)
        np.testing.assert_allclose(At.data, A, rtol=1e-10, atol=1e-10)

    def test_matrix_gradient(self):
        rng = np.random.default_rng(2)
        raw0 = rng.normal(size=12) * 0.3
        w = rng.normal(size=(3, 4))

        def loss(t):
            return (affine_matrix_tensor(t, (1.0, 2.0, 0.5)) * Tensor(w, dtype=np.float64)).sum()

        check_grad(loss, raw0)


class TestAffineDVF:
    def test_identity_matrix_zero_field(self):
        A = np.hstack([np.eye(3), np.zeros((3, 1))])
        dvf = affine_dvf(A, GEOM8)
        np.testing.assert_allclose(dvf.vectors, 0.0, atol=1e-12)

    def test_translation_constant_field(self):
        A = np.hstack([np.eye(3), np.array([[1.0], [2.0], [3.0]])])
        dvf = affine_dvf(A, GEOM8)
        for a, v in enumerate((1.0, 2.0, 3.0)):
            np.testing.assert_allclose(dvf.vectors[a], v)

    def test_isotropic_scale_about_origin(self):
        A = np.hstack([1.5 * np.eye(3), np.zeros((3, 1))])
        dvf = affine_dvf(A, GEOM8)
        grid = GEOM8.voxel_grid_mm()
        rng = np.random.default_rng(3)
        for _ in range(5):
            i, j, k = rng.integers(0, 8, size=3)
            np.testing.assert_allclose(dvf.vectors[:, i, j, k], 0.5 * grid[:, i, j, k], atol=1e-12)

    def test_tensor_path_matches(self):
        rng = np.random.default_rng(4)
        raw = rng.normal(size=12) * 0.2
        At = affine_matrix_tensor(Tensor(raw, dtype=np.float64), (3.5, 3.5, 3.5))
        ut = affine_dvf_tensor(At, GEOM8)
        u = affine_dvf(At.data, GEOM8)
        np.testing.assert_allclose(ut.data, u.vectors, rtol=1e-10, atol=1e-10)


class TestBsplineKernel:
    def test_spacing_one_taps(self):
        np.testing.assert_allclose(bspline_kernel(1), [1 / 6, 2 / 3, 1 / 6], rtol=1e-12)

    def test_spacing_two(self):
        k = bspline_kernel(2)
        assert len(k) == 7
        np.testing.assert_allclose(k, k[::-1], rtol=1e-12)  # symmetric
        assert abs(k[3] - 2 / 3) < 1e-12
        # direct evaluation at half-integers
        want = [cubic_bspline((i - 3) / 2) for i in range(7)]
        np.testing.assert_allclose(k, want, rtol=1e-12)

    @pytest.mark.parametrize("s", [1, 2, 4, 8])
    def test_partition_of_unity_per_residue(self, s):
        k = bspline_kernel(s)
        for r in range(s):
            assert abs(k[r::s].sum() - 1.0) < 1e-12

    def test_invalid_spacing(self):
        with pytest.raises(ValueError):
            bspline_kernel(0)


class TestBsplineDVF:
    def test_zero_lattice(self):
        grid = make_lattice_for(GEOM8, (2, 2, 2))
        dvf = bspline_dvf(grid, GEOM8)
        np.testing.assert_allclose(dvf.vectors, 0.0)

    @pytest.mark.parametrize("s", [1, 2, 4, 8])
    def test_constant_lattice_partition_of_unity(self, s):
        geom = Geometry((16, 16, 16), (1, 1, 1), (0, 0, 0))
        grid = make_lattice_for(geom, (s, s, s))
        grid.control_displacements[:] = np.array([1.5, -2.0, 0.25])[:, None, None, None]
        dvf = bspline_dvf(grid, geom)
        for a, v in enumerate((1.5, -2.0, 0.25)):
            np.testing.assert_allclose(dvf.vectors[a], v, rtol=1e-9, atol=1e-9)

    def test_single_control_point_weights(self):
        s = 2
        geom = Geometry((12, 12, 12), (1, 1, 1), (0, 0, 0))
        grid = make_lattice_for(geom, (s, s, s))
        # control point with logical index (2,2,2) anchors at voxel (4,4,4)
        grid.control_displacements[0, 3, 3, 3] = 1.0
        dvf = bspline_dvf(grid, geom)
        assert abs(dvf.vectors[0, 4, 4, 4] - (2 / 3) ** 3) < 1e-9
        w1 = cubic_bspline(0.5)
        assert abs(dvf.vectors[0, 5, 4, 4] - w1 * (2 / 3) ** 2) < 1e-9

    @pytest.mark.parametrize("s", [1, 2, 4, 8])
    def test_matches_direct_summation_oracle(self, s):
        rng = np.random.default_rng(10 + s)
        ext = 2 * s  # keeps lattices at <= 6 control points per axis
        geom = Geometry((ext, ext, ext), (1, 1, 1), (0, 0, 0))
        grid = make_lattice_for(geom, (s, s, s))
        grid.control_displacements = rng.normal(size=grid.control_displacements.shape)
        got = bspline_dvf(grid, geom)
        want = bspline_dvf_direct(grid, geom)
        np.testing.assert_allclose(got.vectors, want.vectors, rtol=1e-6, atol=1e-9)

    def test_anisotropic_spacing(self):
        rng = np.random.default_rng(17)
        geom = Geometry((8, 8, 4), (1, 1, 2), (0, 0, 0))
        grid = make_lattice_for(geom, (4, 2, 1))
        grid.control_displacements = rng.normal(size=grid.control_displacements.shape)
        got = bspline_dvf(grid, geom)
        want = bspline_dvf_direct(grid, geom)
        np.testing.assert_allclose(got.vectors, want.vectors, rtol=1e-6, atol=1e-9)

    def test_insufficient_margin_rejected(self):
        grid = BSplineGrid(np.zeros((3, 3, 3, 3)), (2, 2, 2))
        with pytest.raises(ValueError, match="margin"):
            bspline_dvf(grid, GEOM8)

    def test_kernel_3d_is_outer_product(self):
        k = bspline_kernel_3d((2, 2, 2))
        assert k.shape == (7, 7, 7)
        assert abs(k[3, 3, 3] - (2 / 3) ** 3) < 1e-12

    def test_lattice_gradient(self):
        rng = np.random.default_rng(23)
        geom = Geometry((4, 4, 4), (1, 1, 1), (0, 0, 0))
        proto = make_lattice_for(geom, (2, 2, 2))
        w = rng.normal(size=(3,) + geom.extents)
        x0 = rng.normal(size=proto.control_displacements.shape)

        def loss(t):
            dense = bspline_dvf_tensor(t, proto, geom)
            return (dense * Tensor(w, dtype=np.float64)).sum()

        check_grad(loss, x0)

    def test_pad_lattice_places_interior(self):
        interior = np.arange(3 * 2 * 2 * 2, dtype=float).reshape(3, 2, 2, 2)
        grid = pad_lattice(interior, (4, 4, 4), (2, 2, 2))
        assert grid.lattice_shape == (lattice_extent_for(4, 2),) * 3
        np.testing.assert_allclose(grid.control_displacements[:, 1:3, 1:3, 1:3], interior)
        assert grid.control_displacements[:, 0].sum() == 0


class TestCompose:
    def test_inner_zero(self):
        rng = np.random.default_rng(29)
        a = DisplacementField(rng.normal(size=(3, 6, 6, 6)))
        z = identity_dvf(a.geometry())
        out = compose(a, z)
        np.testing.assert_allclose(out.vectors, a.vectors)

    def test_outer_zero(self):
        rng = np.random.default_rng(31)
        b = DisplacementField(rng.normal(size=(3, 6, 6, 6)))
        z = identity_dvf(b.geometry())
        out = compose(z, b)
        np.testing.assert_allclose(out.vectors, b.vectors)

    def test_constant_translations_add(self):
        geom = Geometry((6, 6, 6), (1, 1, 1), (0, 0, 0))
        a = DisplacementField(np.broadcast_to(np.array([1.0, 0, 0.5])[:, None, None, None], (3, 6, 6, 6)).copy())
        b = DisplacementField(np.broadcast_to(np.array([0.25, -1.0, 0])[:, None, None, None], (3, 6, 6, 6)).copy())
        out = compose(a, b)
        for c, v in enumerate((1.25, -1.0, 0.5)):
            np.testing.assert_allclose(out.vectors[c], v, atol=1e-12)

    def test_associative_for_constants(self):
        geom = Geometry((5, 5, 5), (1, 1, 1), (0, 0, 0))

        def const(v):
            return DisplacementField(np.broadcast_to(np.asarray(v, float)[:, None, None, None], (3, 5, 5, 5)).copy())

        a, b, c = const([0.5, 0, 0]), const([0, 0.25, 0]), const([0, 0, -0.5])
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        np.testing.assert_allclose(left.vectors, right.vectors, atol=1e-12)

    def test_matches_sequential_warping(self):
        # compose must reproduce two-pass backward warping in one resample
        from convreg.grids import Image
        from convreg.image import warp_linear

        rng = np.random.default_rng(37)
        n = 24
        geom = Geometry((n, n, n), (1, 1, 1), (0, 0, 0))
        g = geom.voxel_grid_mm()
        img = np.zeros((n, n, n))
        for c in rng.uniform(5, 19, size=(6, 3)):
            img += np.exp(-sum((g[a] - c[a]) ** 2 for a in range(3)) / (2 * 3.5**2))
        img = Image(img)

        def smooth_field(seed, amp=1.6):  # fold-free cap: 0.4 x spacing
            grid = make_lattice_for(geom, (4, 4, 4))
            r = np.random.default_rng(seed)
            grid.control_displacements = r.uniform(-amp, amp, size=grid.control_displacements.shape)
            return bspline_dvf(grid, geom)

        u1, u2 = smooth_field(1), smooth_field(2)
        two_pass = warp_linear(warp_linear(img, u1), u2)
        one_pass = warp_linear(img, compose(u1, u2))
        inner = (slice(2, -2),) * 3
        span = img.voxels.max() - img.voxels.min()
        assert np.max(np.abs(two_pass.voxels[inner] - one_pass.voxels[inner])) < 0.02 * span

    def test_geometry_mismatch(self):
        a = DisplacementField(np.zeros((3, 5, 5, 5)))
        b = DisplacementField(np.zeros((3, 6, 6, 6)))
        with pytest.raises(ValueError):
            compose(a, b)


class TestJacobian:
    def test_identity_field(self):
        det = jacobian_determinant(identity_dvf(GEOM8))
        np.testing.assert_allclose(det, 1.0, atol=1e-12)
        assert folding_fraction(det) == 0.0
        assert jacobian_std(det) == 0.0

    def test_uniform_scale(self):
        A = np.hstack([1.5 * np.eye(3), np.zeros((3, 1))])
        det = jacobian_determinant(affine_dvf(A, GEOM8))
        np.testing.assert_allclose(det, 1.5**3, rtol=1e-9)

    def test_reflection_folds_everywhere(self):
        geom = GEOM8
        grid = geom.voxel_grid_mm()
        u = np.zeros((3, 8, 8, 8))
        u[0] = -2.0 * grid[0]
        det = jacobian_determinant(DisplacementField(u))
        np.testing.assert_allclose(det, -1.0, rtol=1e-9)
        assert folding_fraction(det) == 1.0

    def test_affine_dvf_constant_jacobian(self):
        rng = np.random.default_rng(41)
        raw = rng.normal(size=12) * 0.3
        A = affine_matrix(squash_affine(raw), center_mm=(3.5, 3.5, 3.5))
        det = jacobian_determinant(affine_dvf(A, GEOM8))
        interior = det[1:-1, 1:-1, 1:-1]
        want = np.linalg.det(A[:, :3])
        np.testing.assert_allclose(interior, want, rtol=1e-6)

    def test_spacing_corrected(self):
        geom = Geometry((8, 8, 8), (2.0, 1.0, 0.5), (0, 0, 0))
        A = np.hstack([np.diag([1.2, 1.0, 0.8]), np.zeros((3, 1))])
        det = jacobian_determinant(affine_dvf(A, geom))
        np.testing.assert_allclose(det, 1.2 * 0.8, rtol=1e-9)

    def test_half_volume_folded(self):
        geom = Geometry((20, 8, 8), (1, 1, 1), (0, 0, 0))
        grid = geom.voxel_grid_mm()
        u = np.zeros((3, 20, 8, 8))
        # fold x -> -2x on the upper half only, via a piecewise-linear ramp
        u[0] = np.where(grid[0] >= 10.0, -2.0 * (grid[0] - 10.0), 0.0)
        det = jacobian_determinant(DisplacementField(u))
        frac = folding_fraction(det, interior_only=False)
        assert abs(frac - 0.5) <= 1.5 / 20

    def test_degenerate_extents_rejected(self):
        with pytest.raises(ValueError):
            jacobian_determinant(DisplacementField(np.zeros((3, 2, 8, 8))))


class TestResample:
    def test_identity_resample(self):
        rng = np.random.default_rng(43)
        dvf = DisplacementField(rng.normal(size=(3, 6, 6, 6)))
        out = resample_dvf(dvf, dvf.geometry())
        np.testing.assert_allclose(out.vectors, dvf.vectors, atol=1e-12)

    def test_upsample_linear_field_exact_in_hull(self):
        coarse_geom = Geometry((5, 5, 5), (2, 2, 2), (0.5, 0.5, 0.5))
        A = np.hstack([np.diag([1.1, 0.95, 1.0]), np.array([[1.0], [0.0], [-2.0]])])
        coarse = affine_dvf(A, coarse_geom)
        fine_geom = Geometry((8, 8, 8), (1, 1, 1), (1.0, 1.0, 1.0))
        up = resample_dvf(coarse, fine_geom)
        want = affine_dvf(A, fine_geom)
        np.testing.assert_allclose(up.vectors, want.vectors, atol=1e-9)
