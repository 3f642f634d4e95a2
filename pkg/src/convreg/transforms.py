"""Affine and cubic-B-spline transformation models plus DVF analysis.

The affine map is composed in a fixed, documented order,

    A = T(translation) . T(center) . Rz . Ry . Rx . Shear . Scale . T(-center),

acting on physical (mm) points of the fixed grid and producing the
moving-space sample position (backward convention). The B-spline model
converts a control-point displacement lattice to a dense field through
a transposed convolution with precomputed basis taps; the lattice is
anchored so control point (0,0,0) sits at voxel (0,0,0) with at least
one control point of margin beyond each border.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .grids import DisplacementField, Geometry, require_same_geometry
from .image import trilinear_sample

# -- affine parameterization ---------------------------------------------------


@dataclass
class AffineParameters:
    """Squashed 12-parameter affine transform (mm / rad / unitless)."""

    translation: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (1.0, 1.0, 1.0)
    shear: tuple = (0.0, 0.0, 0.0)  # upper-triangular coefficients (xy, xz, yz)

    def __post_init__(self):
        for name in ("translation", "rotation", "scale", "shear"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3:
                raise ValueError(f"{name} must have 3 components")
            setattr(self, name, v)

    def as_raw_squashed(self):
        return np.array(self.translation + self.rotation + self.scale + self.shear)


def squash_affine(raw) -> AffineParameters:
    """Constrain 12 raw outputs: rotations and shears to (-pi, pi) via
    pi*tanh, scales to (0.5, 1.5) via 1 + tanh/2; translations pass through."""
    raw = np.asarray(raw, dtype=float).reshape(-1)
    if raw.shape != (12,):
        raise ValueError(f"expected 12 raw affine values, got {raw.shape}")
    return AffineParameters(
        translation=tuple(raw[0:3]),
        rotation=tuple(np.pi * np.tanh(raw[3:6])),
        scale=tuple(1.0 + 0.5 * np.tanh(raw[6:9])),
        shear=tuple(np.pi * np.tanh(raw[9:12])),
    )


def _rot_matrices(rx, ry, rz):
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rx, Ry, Rz


def affine_matrix(params: AffineParameters, center_mm=(0.0, 0.0, 0.0)) -> np.ndarray:
    """3x4 matrix mapping homogeneous fixed-space mm points to moving space."""
    Rx, Ry, Rz = _rot_matrices(*params.rotation)
    Sh = np.eye(3)
    Sh[0, 1], Sh[0, 2], Sh[1, 2] = params.shear
    S = np.diag(params.scale)
    L = Rz @ Ry @ Rx @ Sh @ S
    c = np.asarray(center_mm, dtype=float)
    t = np.asarray(params.translation, dtype=float)
    offset = t + c - L @ c
    return np.hstack([L, offset[:, None]])


def squash_affine_tensor(raw_t):
    """Tensor counterpart of squash_affine: returns the squashed 12-vector."""
    raw_t = as_tensor(raw_t)
    trans = raw_t[0:3]
    rot = ad.tanh(raw_t[3:6]) * np.pi
    scale = ad.tanh(raw_t[6:9]) * 0.5 + 1.0
    shear = ad.tanh(raw_t[9:12]) * np.pi
    return ad.concat(ad.concat(trans, rot), ad.concat(scale, shear))


def _basis(r, c, dtype):
    e = np.zeros((4, 4), dtype=dtype)
    e[r, c] = 1.0
    return e


def _mat4(entries, dtype, base=None):
    """4x4 tensor assembled from (row, col, scalar tensor/float) entries."""
    m = Tensor(np.eye(4, dtype=dtype) if base is None else base)
    for r, c, s in entries:
        if isinstance(s, Tensor):
            m = m + s.reshape(1, 1) * Tensor(_basis(r, c, dtype))
        else:
            m = m + float(s) * Tensor(_basis(r, c, dtype))
    return m


def affine_matrix_tensor(raw_t, center_mm=(0.0, 0.0, 0.0)):
    """Differentiable squash + matrix assembly from 12 raw values -> (3,4)."""
    raw_t = as_tensor(raw_t)
    dt = raw_t.data.dtype
    sq = squash_affine_tensor(raw_t)
    t0, t1, t2 = sq[0:1], sq[1:2], sq[2:3]
    rx, ry, rz = sq[3:4], sq[4:5], sq[5:6]
    s0, s1, s2 = sq[6:7], sq[7:8], sq[8:9]
    h0, h1, h2 = sq[9:10], sq[10:11], sq[11:12]

    def scalar(x):
        return x.reshape(())

    one = 1.0
    T = _mat4([(0, 3, scalar(t0)), (1, 3, scalar(t1)), (2, 3, scalar(t2))], dt)
    cx, cy, cz = (float(c) for c in center_mm)
    Tc = _mat4([(0, 3, cx), (1, 3, cy), (2, 3, cz)], dt)
    Tcn = _mat4([(0, 3, -cx), (1, 3, -cy), (2, 3, -cz)], dt)
    Rx = _mat4(
        [(1, 1, scalar(ad.cos(rx)) - one), (2, 2, scalar(ad.cos(rx)) - one),
         (1, 2, -scalar(ad.sin(rx))), (2, 1, scalar(ad.sin(rx)))], dt)
    Ry = _mat4(
        [(0, 0, scalar(ad.cos(ry)) - one), (2, 2, scalar(ad.cos(ry)) - one),
         (0, 2, scalar(ad.sin(ry))), (2, 0, -scalar(ad.sin(ry)))], dt)
    Rz = _mat4(
        [(0, 0, scalar(ad.cos(rz)) - one), (1, 1, scalar(ad.cos(rz)) - one),
         (0, 1, -scalar(ad.sin(rz))), (1, 0, scalar(ad.sin(rz)))], dt)
    Sh = _mat4([(0, 1, scalar(h0)), (0, 2, scalar(h1)), (1, 2, scalar(h2))], dt)
    S = _mat4([(0, 0, scalar(s0) - one), (1, 1, scalar(s1) - one), (2, 2, scalar(s2) - one)], dt)

    A = T @ Tc @ Rz @ Ry @ Rx @ Sh @ S @ Tcn
    return A[0:3, :]


def affine_dvf(matrix, geometry: Geometry) -> DisplacementField:
    """Dense u(x) = A x~ - x over the voxel centers of ``geometry``."""
    matrix = np.asarray(matrix, dtype=float)
    grid = geometry.voxel_grid_mm().reshape(3, -1)
    hom = np.vstack([grid, np.ones((1, grid.shape[1]))])
    u = matrix @ hom - grid
    return DisplacementField(u.reshape((3,) + geometry.extents), geometry.spacing, geometry.origin)


def affine_dvf_tensor(matrix_t, geometry: Geometry):
    """Differentiable counterpart of affine_dvf; returns a (3,D,H,W) tensor."""
    matrix_t = as_tensor(matrix_t)
    grid = geometry.voxel_grid_mm(dtype=matrix_t.data.dtype).reshape(3, -1)
    hom = np.vstack([grid, np.ones((1, grid.shape[1]), dtype=matrix_t.data.dtype)])
    u = matrix_t @ Tensor(hom) - Tensor(grid)
    return u.reshape((3,) + geometry.extents)


# -- cubic B-spline model --------------------------------------------------------


def cubic_bspline_value(t):
    """Uniform cubic B-spline basis, support (-2, 2)."""
    t = np.abs(np.asarray(t, dtype=float))
    out = np.zeros_like(t)
    inner = t < 1.0
    outer = (t >= 1.0) & (t < 2.0)
    out[inner] = 2.0 / 3.0 - t[inner] ** 2 + 0.5 * t[inner] ** 3
    out[outer] = (2.0 - t[outer]) ** 3 / 6.0
    return out


def bspline_kernel(voxel_spacing: int) -> np.ndarray:
    """Sampled basis taps: k[i] = B3((i - (2s-1))/s), length 4s-1."""
    s = int(voxel_spacing)
    if s < 1:
        raise ValueError(f"voxel spacing must be >= 1, got {voxel_spacing}")
    i = np.arange(4 * s - 1)
    return cubic_bspline_value((i - (2 * s - 1)) / s)


def bspline_kernel_3d(voxel_spacing) -> np.ndarray:
    """Outer product of the per-axis tap vectors."""
    kx, ky, kz = (bspline_kernel(s) for s in voxel_spacing)
    return kx[:, None, None] * ky[None, :, None] * kz[None, None, :]


def lattice_extent_for(image_extent: int, spacing: int) -> int:
    """Control points needed to cover [0, D-1] plus margin on both sides."""
    p_max = (image_extent - 1 + 2 * spacing - 1) // spacing
    return p_max + 2  # indices -1 .. p_max


@dataclass
class BSplineGrid:
    """Control-point displacement lattice (mm) with integer voxel spacing.

    control_displacements is (3, nx, ny, nz) including the margin;
    ``margin_low`` counts control points before the one anchored at
    voxel (0,0,0) along each axis (1 by construction).
    """

    control_displacements: np.ndarray
    voxel_spacing: tuple
    margin_low: tuple = (1, 1, 1)

    def __post_init__(self):
        self.control_displacements = np.asarray(self.control_displacements)
        if self.control_displacements.ndim != 4 or self.control_displacements.shape[0] != 3:
            raise ValueError("control lattice must be (3, nx, ny, nz)")
        self.voxel_spacing = tuple(int(s) for s in self.voxel_spacing)
        for s in self.voxel_spacing:
            if s < 1 or (s & (s - 1)) != 0:
                raise ValueError(f"grid spacing must be a positive power of 2, got {self.voxel_spacing}")
        self.margin_low = tuple(int(m) for m in self.margin_low)

    @property
    def lattice_shape(self):
        return self.control_displacements.shape[1:]


def _check_lattice_margin(grid: BSplineGrid, extents):
    for a in range(3):
        s = grid.voxel_spacing[a]
        needed = grid.margin_low[a] + lattice_extent_for(extents[a], s) - 1
        if grid.margin_low[a] < 1 or grid.lattice_shape[a] < needed:
            raise ValueError(
                f"insufficient lattice margin on axis {a}: have {grid.lattice_shape[a]} control points "
                f"(margin_low {grid.margin_low[a]}), need >= {needed} to cover extent {extents[a]}"
            )


def bspline_dvf(grid: BSplineGrid, geometry: Geometry) -> DisplacementField:
    """Dense displacement field from the control lattice.

    Equals the transposed convolution of the lattice with the 3D basis
    kernel at stride = voxel_spacing, cropped so each control point
    influences voxels within 2 spacings of its anchor.
    """
    _check_lattice_margin(grid, geometry.extents)
    t = bspline_dvf_tensor(Tensor(grid.control_displacements), grid, geometry)
    return DisplacementField(t.data, geometry.spacing, geometry.origin)


def bspline_dvf_tensor(lattice_t, grid: BSplineGrid, geometry: Geometry):
    """Differentiable lattice -> dense field (separable transposed conv)."""
    lattice_t = as_tensor(lattice_t)
    _check_lattice_margin(grid, geometry.extents)
    taps = [bspline_kernel(s).astype(lattice_t.data.dtype) for s in grid.voxel_spacing]
    dense = ad.scatter_separable(lattice_t, taps, grid.voxel_spacing)
    sl = [slice(None)]
    for a in range(3):
        s = grid.voxel_spacing[a]
        off = grid.margin_low[a] * s + 2 * s - 1
        sl.append(slice(off, off + geometry.extents[a]))
    return dense[tuple(sl)]


def bspline_dvf_direct(grid: BSplineGrid, geometry: Geometry) -> DisplacementField:
    """Direct tensor-product basis summation (oracle-style evaluation)."""
    _check_lattice_margin(grid, geometry.extents)
    ext = geometry.extents
    w_ax = []
    for a in range(3):
        s = grid.voxel_spacing[a]
        v = np.arange(ext[a])[:, None]
        p = np.arange(grid.lattice_shape[a])[None, :] - grid.margin_low[a]
        w_ax.append(cubic_bspline_value((v - p * s) / s))
    u = np.einsum("cijk,ai,bj,dk->cabd", grid.control_displacements.astype(np.float64),
                  w_ax[0], w_ax[1], w_ax[2])
    return DisplacementField(u, geometry.spacing, geometry.origin)


def make_lattice_for(geometry: Geometry, voxel_spacing, dtype=np.float64) -> BSplineGrid:
    """Zero lattice sized to cover ``geometry`` with the standard margin."""
    spacing = tuple(int(s) for s in voxel_spacing)
    shape = tuple(lattice_extent_for(geometry.extents[a], spacing[a]) for a in range(3))
    return BSplineGrid(np.zeros((3,) + shape, dtype=dtype), spacing)


def pad_lattice(interior, image_extents, voxel_spacing):
    """Embed an interior lattice (anchors 0..D/s-1) into the margined lattice."""
    interior = np.asarray(interior)
    spacing = tuple(int(s) for s in voxel_spacing)
    full_shape = tuple(lattice_extent_for(image_extents[a], spacing[a]) for a in range(3))
    out = np.zeros((3,) + full_shape, dtype=interior.dtype)
    sl = tuple(slice(1, 1 + interior.shape[1 + a]) for a in range(3))
    out[(slice(None),) + sl] = interior
    return BSplineGrid(out, spacing)


def pad_lattice_tensor(interior_t, image_extents, voxel_spacing):
    """Differentiable margin padding of an interior control lattice.

    Returns (lattice tensor, BSplineGrid proto carrying spacing/margins)
    ready for bspline_dvf_tensor.
    """
    interior_t = as_tensor(interior_t)
    spacing = tuple(int(s) for s in voxel_spacing)
    full_shape = tuple(lattice_extent_for(image_extents[a], spacing[a]) for a in range(3))
    sl = (slice(None),) + tuple(slice(1, 1 + interior_t.shape[1 + a]) for a in range(3))

    def bw(out):
        if interior_t.requires_grad:
            interior_t._accumulate(out.grad[sl])

    data = np.zeros((3,) + full_shape, dtype=interior_t.data.dtype)
    data[sl] = interior_t.data
    padded = ad.make_op(data, (interior_t,), bw)
    proto = BSplineGrid(data, spacing)
    return padded, proto


# -- composition and resampling ---------------------------------------------------


def compose(u_outer: DisplacementField, u_inner: DisplacementField) -> DisplacementField:
    """u(x) = u_inner(x) + u_outer(x + u_inner(x)).

    Reproduces sequential backward warping (inner applied to the image
    last) in a single resampling.
    """
    require_same_geometry(u_outer, u_inner, "composed fields")
    geom = u_inner.geometry()
    pts_mm = geom.voxel_grid_mm().reshape(3, -1) + u_inner.vectors.reshape(3, -1)
    pts_vox = geom.mm_to_voxel(pts_mm)
    outer_at = np.stack([trilinear_sample(u_outer.vectors[c].astype(np.float64), pts_vox) for c in range(3)])
    u = u_inner.vectors.reshape(3, -1) + outer_at
    return DisplacementField(u.reshape(u_inner.vectors.shape), geom.spacing, geom.origin)


def resample_dvf(dvf: DisplacementField, geometry: Geometry) -> DisplacementField:
    """Trilinear resampling of each displacement channel onto a new grid."""
    pts_vox = dvf.geometry().mm_to_voxel(geometry.voxel_grid_mm().reshape(3, -1))
    u = np.stack([trilinear_sample(dvf.vectors[c].astype(np.float64), pts_vox) for c in range(3)])
    return DisplacementField(u.reshape((3,) + geometry.extents), geometry.spacing, geometry.origin)


def identity_dvf(geometry: Geometry, dtype=np.float64) -> DisplacementField:
    return DisplacementField(np.zeros((3,) + geometry.extents, dtype=dtype), geometry.spacing, geometry.origin)


# -- topology analysis -------------------------------------------------------------


def jacobian_determinant(dvf: DisplacementField) -> np.ndarray:
    """det(I + du/dx) per voxel; central differences in mm, one-sided at borders."""
    if min(dvf.shape) < 3:
        raise ValueError(f"jacobian needs extents >= 3 per axis, got {dvf.shape}")
    J = np.empty((3, 3) + dvf.shape)
    for c in range(3):
        grads = np.gradient(dvf.vectors[c].astype(np.float64), *dvf.spacing)
        for a in range(3):
            J[c, a] = grads[a]
    for d in range(3):
        J[d, d] += 1.0
    det = (
        J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
        - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
        + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
    )
    return det


def _interior(jac):
    return jac[1:-1, 1:-1, 1:-1] if min(jac.shape) > 2 else jac


def folding_fraction(jac_field, interior_only=True) -> float:
    """Fraction of voxels with non-positive determinant."""
    jac = np.asarray(jac_field)
    if jac.size == 0:
        raise ValueError("empty jacobian field")
    if interior_only:
        jac = _interior(jac)
    return float((jac <= 0.0).mean())


def jacobian_std(jac_field, interior_only=True) -> float:
    """Population standard deviation of the determinant values."""
    jac = np.asarray(jac_field)
    if jac.size == 0:
        raise ValueError("empty jacobian field")
    if interior_only:
        jac = _interior(jac)
    return float(jac.std())
