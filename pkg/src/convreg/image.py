"""Image-space operations: intensity normalization, resolution reduction,
Gaussian smoothing, and warping.

Warps use the backward-mapping convention: the displacement field lives
on the output grid and samples the moving image at x + u(x). Out-of-
bounds samples clamp to the border value so no artificial zeros enter
the similarity metric. All displacements are mm; conversion to voxel
fractions happens at sample time via the moving image's spacing.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .autodiff import Tensor, as_tensor, make_op
from .grids import DisplacementField, Geometry, Image, LandmarkSet, SegmentationMask

# -- trilinear sampling core -------------------------------------------------


def _corner_setup(vol_shape, pts_vox):
    """Clamped corner indices and fractions for trilinear interpolation."""
    idx0, idx1, frac = [], [], []
    for a in range(3):
        n = vol_shape[a]
        p = np.clip(pts_vox[a], 0.0, n - 1.0)
        i0 = np.floor(p).astype(np.int64)
        np.clip(i0, 0, max(n - 2, 0), out=i0)
        f = p - i0
        if n == 1:
            f = np.zeros_like(f)
        idx0.append(i0)
        idx1.append(np.minimum(i0 + 1, n - 1))
        frac.append(f)
    return idx0, idx1, frac


def trilinear_sample(vol, pts_vox, want_grad=False):
    """Sample a 3D volume at fractional voxel coordinates (3, N).

    Returns values (N,), plus the spatial derivative w.r.t. each voxel
    coordinate (3, N) when want_grad is set. Coordinates outside the
    volume clamp to the border (derivative 0 there).
    """
    vol = np.asarray(vol)
    (i0x, i0y, i0z), (i1x, i1y, i1z), (fx, fy, fz) = _corner_setup(vol.shape, pts_vox)

    c000 = vol[i0x, i0y, i0z]
    c100 = vol[i1x, i0y, i0z]
    c010 = vol[i0x, i1y, i0z]
    c110 = vol[i1x, i1y, i0z]
    c001 = vol[i0x, i0y, i1z]
    c101 = vol[i1x, i0y, i1z]
    c011 = vol[i0x, i1y, i1z]
    c111 = vol[i1x, i1y, i1z]

    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    c00 = c000 * gx + c100 * fx
    c10 = c010 * gx + c110 * fx
    c01 = c001 * gx + c101 * fx
    c11 = c011 * gx + c111 * fx
    c0 = c00 * gy + c10 * fy
    c1 = c01 * gy + c11 * fy
    val = c0 * gz + c1 * fz
    if not want_grad:
        return val

    # derivative along each axis: difference of the two opposing bilinear faces
    dx = ((c100 - c000) * gy + (c110 - c010) * fy) * gz + ((c101 - c001) * gy + (c111 - c011) * fy) * fz
    dy = (c10 - c00) * gz + (c11 - c01) * fz
    dz = c1 - c0
    # clamped directions are flat
    for d, pts_a, n in zip((dx, dy, dz), pts_vox, vol.shape):
        outside = (pts_a < 0.0) | (pts_a > n - 1.0)
        d[outside] = 0.0
    return val, np.stack([dx, dy, dz])


def trilinear_scatter(vol_shape, pts_vox, values, dtype=np.float64):
    """Adjoint of trilinear_sample w.r.t. the volume: scatter-add weights."""
    (i0x, i0y, i0z), (i1x, i1y, i1z), (fx, fy, fz) = _corner_setup(vol_shape, pts_vox)
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    out = np.zeros(vol_shape, dtype=dtype)
    np.add.at(out, (i0x, i0y, i0z), values * gx * gy * gz)
    np.add.at(out, (i1x, i0y, i0z), values * fx * gy * gz)
    np.add.at(out, (i0x, i1y, i0z), values * gx * fy * gz)
    np.add.at(out, (i1x, i1y, i0z), values * fx * fy * gz)
    np.add.at(out, (i0x, i0y, i1z), values * gx * gy * fz)
    np.add.at(out, (i1x, i0y, i1z), values * fx * gy * fz)
    np.add.at(out, (i0x, i1y, i1z), values * gx * fy * fz)
    np.add.at(out, (i1x, i1y, i1z), values * fx * fy * fz)
    return out


def nearest_sample(vol, pts_vox):
    """Nearest-neighbor sampling; ties at .5 break toward the lower index."""
    vol = np.asarray(vol)
    idx = []
    for a in range(3):
        n = vol.shape[a]
        p = np.clip(pts_vox[a], 0.0, n - 1.0)
        idx.append(np.clip(np.ceil(p - 0.5).astype(np.int64), 0, n - 1))
    return vol[tuple(idx)]


# -- normalization -----------------------------------------------------------


def normalize_percentile(image: Image) -> Image:
    """Scale intensities to [0,1] between the minimum and the 99th percentile."""
    v = image.voxels.astype(np.float64)
    lo = v.min()
    p99 = np.percentile(v, 99)
    if p99 <= lo:
        raise ValueError("normalize_percentile: constant image (99th percentile equals minimum)")
    out = np.clip((v - lo) / (p99 - lo), 0.0, 1.0)
    return Image(out.astype(image.voxels.dtype if np.issubdtype(image.voxels.dtype, np.floating) else np.float32),
                 image.spacing, image.origin)


def rescale_fixed_range(image: Image, lo, hi, clamp=True) -> Image:
    """Affine intensity map of [lo, hi] onto [0, 1], optionally clamped."""
    if lo >= hi:
        raise ValueError(f"rescale_fixed_range: lo {lo} must be < hi {hi}")
    v = image.voxels.astype(np.float64)
    if clamp:
        v = np.clip(v, lo, hi)
    out = (v - lo) / (hi - lo)
    dtype = image.voxels.dtype if np.issubdtype(image.voxels.dtype, np.floating) else np.float32
    return Image(out.astype(dtype), image.spacing, image.origin)


# -- resolution reduction and smoothing ---------------------------------------


def downsample_avg(image: Image, factors) -> Image:
    """Windowed-average resolution reduction; spacing scales by the factors."""
    f = tuple(int(x) for x in (factors if hasattr(factors, "__len__") else (factors,) * 3))
    D, H, W = image.shape
    if D % f[0] or H % f[1] or W % f[2]:
        raise ValueError(f"extents {image.shape} not divisible by factors {f}; crop first")
    v = image.voxels.reshape(D // f[0], f[0], H // f[1], f[1], W // f[2], f[2]).mean(axis=(1, 3, 5))
    spacing = tuple(s * k for s, k in zip(image.spacing, f))
    origin = tuple(o + 0.5 * (k - 1) * s for o, s, k in zip(image.origin, image.spacing, f))
    return Image(v.astype(image.voxels.dtype), spacing, origin)


def crop_to_multiple(image: Image, multiple) -> Image:
    """Trim the high side of each axis so extents divide by ``multiple``."""
    m = tuple(int(x) for x in (multiple if hasattr(multiple, "__len__") else (multiple,) * 3))
    new_shape = tuple((e // k) * k for e, k in zip(image.shape, m))
    if any(n < k for n, k in zip(new_shape, m)):
        raise ValueError(f"extents {image.shape} too small to crop to multiples {m}")
    if new_shape == image.shape:
        return image
    sl = tuple(slice(0, n) for n in new_shape)
    return Image(image.voxels[sl], image.spacing, image.origin)


def gaussian_kernel_1d(sigma_vox):
    """Normalized Gaussian taps with radius ceil(3 sigma)."""
    radius = int(np.ceil(3.0 * sigma_vox))
    if sigma_vox <= 0 or radius == 0:
        return np.array([1.0])
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def gaussian_smooth(image: Image, sigma_mm) -> Image:
    """Separable Gaussian smoothing with reflected boundaries; sigma in mm."""
    sig = tuple(float(s) for s in (sigma_mm if hasattr(sigma_mm, "__len__") else (sigma_mm,) * 3))
    if any(s < 0 for s in sig):
        raise ValueError("sigma must be non-negative")
    v = image.voxels.astype(np.float64)
    for ax in range(3):
        taps = gaussian_kernel_1d(sig[ax] / image.spacing[ax])
        if len(taps) > 1:
            v = ndimage.correlate1d(v, taps, axis=ax, mode="reflect")
    return Image(v.astype(image.voxels.dtype), image.spacing, image.origin)


# -- warping -------------------------------------------------------------------


def _sample_positions_vox(dvf: DisplacementField, target_geom: Geometry):
    """Fixed-grid voxel centers displaced by u, in moving-image voxel coords."""
    pts_mm = dvf.geometry().voxel_grid_mm().reshape(3, -1) + dvf.vectors.reshape(3, -1)
    return target_geom.mm_to_voxel(pts_mm)


def warp_linear(moving: Image, dvf: DisplacementField) -> Image:
    """Resample the moving image at x + u(x) with trilinear interpolation."""
    pts_vox = _sample_positions_vox(dvf, moving.geometry())
    vals = trilinear_sample(moving.voxels.astype(np.float64), pts_vox)
    out = vals.reshape(dvf.shape).astype(moving.voxels.dtype)
    return Image(out, dvf.spacing, dvf.origin)


def warp_nearest(mask: SegmentationMask, dvf: DisplacementField) -> SegmentationMask:
    """Resample a label mask at x + u(x) with nearest-neighbor lookup."""
    pts_vox = _sample_positions_vox(dvf, mask.geometry())
    vals = nearest_sample(mask.voxels, pts_vox)
    return SegmentationMask(vals.reshape(dvf.shape), dvf.spacing, dvf.origin)


def transform_points(landmarks: LandmarkSet, dvf: DisplacementField) -> LandmarkSet:
    """Map fixed-space points to p + u(p); u interpolated trilinearly."""
    pts_mm = landmarks.points.T  # (3, N)
    lo, hi = dvf.geometry().bounds_mm()
    eps = 1e-9
    for a in range(3):
        if np.any(pts_mm[a] < lo[a] - eps) or np.any(pts_mm[a] > hi[a] + eps):
            raise ValueError("transform_points: point outside the displacement-field domain")
    pts_vox = dvf.geometry().mm_to_voxel(pts_mm)
    u = np.stack([trilinear_sample(dvf.vectors[c], pts_vox) for c in range(3)])
    return LandmarkSet((pts_mm + u).T, list(landmarks.names))


def sample_dvf_at_points(dvf: DisplacementField, pts_mm) -> np.ndarray:
    """Trilinear displacement lookup at (3, N) mm positions (clamped)."""
    pts_vox = dvf.geometry().mm_to_voxel(np.asarray(pts_mm, dtype=float))
    return np.stack([trilinear_sample(dvf.vectors[c], pts_vox) for c in range(3)])


# -- differentiable warping ops -----------------------------------------------


def warp_tensor(moving_vox, dvf_t, moving_geom: Geometry, out_geom: Geometry):
    """Warp a constant volume with a differentiable (3,D,H,W) mm field.

    Gradient w.r.t. the field equals the trilinear interpolation's
    spatial derivative at the sample location, divided by the moving
    spacing (mm -> voxel chain rule).
    """
    dvf_t = as_tensor(dvf_t)
    vol = np.asarray(moving_vox, dtype=np.float64)
    grid_mm = out_geom.voxel_grid_mm().reshape(3, -1)
    inv_spacing = 1.0 / np.array(moving_geom.spacing).reshape(3, 1)
    origin = np.array(moving_geom.origin).reshape(3, 1)

    def positions(dvf_data):
        return (grid_mm + dvf_data.reshape(3, -1) - origin) * inv_spacing

    vals = trilinear_sample(vol, positions(dvf_t.data))

    def bw(out):
        if dvf_t.requires_grad:
            _, spatial = trilinear_sample(vol, positions(dvf_t.data), want_grad=True)
            g = out.grad.reshape(1, -1) * spatial * inv_spacing
            dvf_t._accumulate(g.reshape(dvf_t.shape).astype(dvf_t.data.dtype, copy=False))

    return make_op(vals.reshape(out_geom.extents).astype(dvf_t.data.dtype, copy=False), (dvf_t,), bw)


def sample_volume_tensor(vol, pts_vox_t):
    """Sample a constant volume at differentiable (3,N) voxel coordinates."""
    pts_vox_t = as_tensor(pts_vox_t)
    vol = np.asarray(vol, dtype=np.float64)
    vals = trilinear_sample(vol, pts_vox_t.data)

    def bw(out):
        if pts_vox_t.requires_grad:
            _, spatial = trilinear_sample(vol, pts_vox_t.data, want_grad=True)
            pts_vox_t._accumulate((out.grad[None, :] * spatial).astype(pts_vox_t.data.dtype, copy=False))

    return make_op(vals.astype(pts_vox_t.data.dtype, copy=False), (pts_vox_t,), bw)


def sample_channels_tensor(field_t, pts_vox):
    """Sample a differentiable (3,D,H,W) field at constant voxel points.

    Linear in the field values; the backward pass scatter-adds the
    trilinear weights.
    """
    field_t = as_tensor(field_t)
    pts_vox = np.asarray(pts_vox, dtype=np.float64)
    vals = np.stack([trilinear_sample(field_t.data[c].astype(np.float64), pts_vox) for c in range(3)])

    def bw(out):
        if field_t.requires_grad:
            g = np.stack([
                trilinear_scatter(field_t.shape[1:], pts_vox, out.grad[c]) for c in range(3)
            ])
            field_t._accumulate(g.astype(field_t.data.dtype, copy=False))

    return make_op(vals.astype(field_t.data.dtype, copy=False), (field_t,), bw)
