"""Procedural phantom volumes with known ground-truth deformations.

A phantom is a sum of randomized smooth intensity blobs over a gentle
background ramp plus low-amplitude noise, normalized to [0, 1]. The
largest blob thresholded at half amplitude provides a segmentation
mask; landmarks combine the blob centers with a regular interior grid.

Ground-truth pairs are built by warping the phantom:

    moving = warp_linear(fixed, gt_dvf)
    moving_landmarks = transform_points(fixed_landmarks, gt_dvf)
    moving_mask = warp_nearest(fixed_mask, gt_dvf)

so gt_dvf is exactly the field that resamples the pair's fixed bundle
onto the moving bundle, and all three reference modalities are exact
optima of that one field. Recovery experiments therefore estimate the
field in that same direction (the network's similarity reference is the
pair's moving image); see GroundTruthPair.registration_inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import DisplacementField, Geometry, Image, LandmarkSet, SegmentationMask
from .image import normalize_percentile, transform_points, warp_linear, warp_nearest
from .transforms import (
    AffineParameters,
    BSplineGrid,
    affine_dvf,
    affine_matrix,
    bspline_dvf,
    compose,
    identity_dvf,
    jacobian_determinant,
    make_lattice_for,
)


@dataclass
class PhantomSpec:
    extents: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    num_blobs: int = 20
    texture_noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        if min(self.extents) < 16:
            raise ValueError("phantom extents must be >= 16 per axis")
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.num_blobs < 1:
            raise ValueError("need at least one blob")

    def geometry(self):
        return Geometry(self.extents, self.spacing, (0.0, 0.0, 0.0))


@dataclass
class Bundle:
    """One image with its optional reference data."""

    image: Image
    mask: SegmentationMask | None = None
    landmarks: LandmarkSet | None = None
    case_id: str = ""


def _blob_layout(rng, ext_mm, spacing, num_blobs):
    """Blob centers/radii/amplitudes; the first blob is mask-safe interior."""
    mask_center = rng.uniform(ext_mm / 3.0, 2.0 * ext_mm / 3.0)
    border_room = np.minimum(mask_center, ext_mm - mask_center) - 2.5 * np.array(spacing)
    mask_sigma = np.minimum(rng.uniform(0.10, 0.16) * ext_mm, border_room / 1.4)
    centers, sigmas, amps = [mask_center], [mask_sigma], [1.0]
    for _ in range(num_blobs - 1):
        centers.append(rng.uniform(0.12 * ext_mm, 0.88 * ext_mm))
        sigmas.append(rng.uniform(0.05, 0.14, size=3) * ext_mm)
        amps.append(rng.uniform(0.3, 0.9))
    return centers, sigmas, amps


def generate_phantom(spec: PhantomSpec, family_seed=None, family_jitter=0.02):
    """Deterministic (Image, SegmentationMask, LandmarkSet) triple.

    With ``family_seed`` set, the blob layout comes from that seed and
    the per-phantom seed only jitters centers (by ``family_jitter`` of
    the extent), radii, and amplitudes: a population of lookalike
    subjects, the regime inter-subject registration learns from.
    """
    rng = np.random.default_rng(spec.seed)
    geom = spec.geometry()
    g = geom.voxel_grid_mm()
    ext_mm = np.array([spec.spacing[a] * (spec.extents[a] - 1) for a in range(3)])

    # gentle ramps give every axis a global intensity cue
    v = 0.1 * (g[0] / ext_mm[0]) + 0.05 * (g[1] / ext_mm[1]) + 0.075 * (g[2] / ext_mm[2])

    if family_seed is None:
        centers, sigmas, amps = _blob_layout(rng, ext_mm, spec.spacing, spec.num_blobs)
    else:
        frng = np.random.default_rng(family_seed)
        centers, sigmas, amps = _blob_layout(frng, ext_mm, spec.spacing, spec.num_blobs)
        # a few organ-scale anchors make the pose of the shared layout
        # decodable from global image statistics
        for i in range(1, min(4, len(sigmas))):
            sigmas[i] = frng.uniform(0.18, 0.30, size=3) * ext_mm
        centers = [np.clip(c + rng.normal(0, family_jitter * ext_mm), 0.1 * ext_mm, 0.9 * ext_mm)
                   for c in centers]
        centers[0] = np.clip(centers[0], ext_mm / 4, 3 * ext_mm / 4)  # keep the mask blob interior
        sigmas = [s * rng.uniform(0.85, 1.15, size=3) for s in sigmas]
        amps = [a * rng.uniform(0.85, 1.15) for a in amps]

    mask_center, mask_sigma, mask_amp = centers[0], sigmas[0], amps[0]
    mask_field = mask_amp * np.exp(-sum((g[a] - mask_center[a]) ** 2 / (2.0 * mask_sigma[a] ** 2) for a in range(3)))
    v = v + mask_field
    for c, sigma, amp in zip(centers[1:], sigmas[1:], amps[1:]):
        v = v + amp * np.exp(-sum((g[a] - c[a]) ** 2 / (2.0 * sigma[a] ** 2) for a in range(3)))

    if spec.texture_noise_sigma > 0:
        v = v + rng.normal(0.0, spec.texture_noise_sigma, size=spec.extents)

    image = normalize_percentile(Image(v.astype(np.float32), spec.spacing))

    mask_vox = (mask_field >= 0.5 * mask_amp).astype(np.int16)
    if mask_vox.sum() == 0:
        raise RuntimeError("mask blob produced an empty mask")
    mask = SegmentationMask(mask_vox, spec.spacing)

    names = [f"blob{i}" for i in range(len(centers))]
    pts = list(centers)
    grid_idx = [np.unique(np.round(np.linspace(4, spec.extents[a] - 5, 3)).astype(int)) for a in range(3)]
    for i in grid_idx[0]:
        for j in grid_idx[1]:
            for k in grid_idx[2]:
                pts.append(np.array([i, j, k]) * np.array(spec.spacing))
                names.append(f"grid_{i}_{j}_{k}")
    landmarks = LandmarkSet(np.array(pts), names)
    return image, mask, landmarks


@dataclass
class AffineRanges:
    rotation_rad: float = 0.2
    scale: tuple = (0.9, 1.1)
    translation_mm: float = 8.0
    shear: float = 0.0

    def __post_init__(self):
        if not (0.5 < self.scale[0] <= self.scale[1] < 1.5):
            raise ValueError("scale range must sit inside the squashed interval (0.5, 1.5)")
        if not (0.0 <= self.rotation_rad < np.pi):
            raise ValueError("rotation range must sit inside (-pi, pi)")


def random_gt_transform(seed, geometry: Geometry, affine_ranges: AffineRanges | None = None,
                        bspline_spacing=None, amplitude_mm=0.0):
    """Sample a ground-truth transform; the amplitude cap keeps it fold-free.

    Returns (AffineParameters | None, BSplineGrid | None). The sampled
    B-spline field is asserted to have strictly positive Jacobian
    determinant everywhere on ``geometry``.
    """
    rng = np.random.default_rng(seed)
    params = None
    if affine_ranges is not None:
        r = affine_ranges
        params = AffineParameters(
            translation=tuple(rng.uniform(-r.translation_mm, r.translation_mm, 3)),
            rotation=tuple(rng.uniform(-r.rotation_rad, r.rotation_rad, 3)),
            scale=tuple(rng.uniform(r.scale[0], r.scale[1], 3)),
            shear=tuple(rng.uniform(-r.shear, r.shear, 3)),
        )
    grid = None
    if bspline_spacing is not None:
        spacing_mm = min(int(s) * geometry.spacing[a] for a, s in enumerate(bspline_spacing))
        cap = 0.4 * spacing_mm
        if amplitude_mm > cap + 1e-12:
            raise ValueError(f"amplitude {amplitude_mm} mm exceeds fold-free cap 0.4 x grid spacing = {cap} mm")
        grid = make_lattice_for(geometry, bspline_spacing)
        grid.control_displacements = rng.uniform(-amplitude_mm, amplitude_mm,
                                                 size=grid.control_displacements.shape)
        det = jacobian_determinant(bspline_dvf(grid, geometry))
        if det.min() <= 0:
            raise AssertionError("sampled ground-truth field is not fold-free despite the amplitude cap")
    return params, grid


@dataclass
class GroundTruthPair:
    fixed: Bundle
    moving: Bundle
    gt_dvf: DisplacementField
    gt_affine: AffineParameters | None = None

    def registration_inputs(self):
        """(reference_image, source_image) for estimating gt_dvf.

        gt_dvf resamples fixed into moving exactly, so the similarity
        reference is the moving image and the warped source is the
        fixed image; a predicted field is compared against gt_dvf by
        pushing the fixed bundle's mask/landmarks onto the moving
        bundle's references.
        """
        return self.moving.image, self.fixed.image


def make_pair(case_id, phantom, affine_params: AffineParameters | None = None,
              bspline_grid: BSplineGrid | None = None, max_exit_fraction=0.1) -> GroundTruthPair:
    """Warp a phantom by the composed ground-truth transform.

    ``max_exit_fraction`` bounds how far sample positions may leave the
    domain, as a fraction of the extent (default 10%); transform ranges
    sized for large volumes can widen it explicitly.
    """
    image, mask, landmarks = phantom
    geom = image.geometry()
    u_aff = affine_dvf(affine_matrix(affine_params, geom.center_mm()), geom) if affine_params else identity_dvf(geom)
    u_bsp = bspline_dvf(bspline_grid, geom) if bspline_grid is not None else identity_dvf(geom)
    gt = compose(u_aff, u_bsp)

    grid_mm = geom.voxel_grid_mm()
    lo, hi = geom.bounds_mm()
    for a in range(3):
        pos = grid_mm[a] + gt.vectors[a]
        exit_depth = max(float((lo[a] - pos).max()), float((pos - hi[a]).max()), 0.0)
        ext_mm = geom.spacing[a] * (geom.extents[a] - 1)
        if exit_depth > max_exit_fraction * ext_mm:
            raise ValueError(
                f"ground-truth displacement exits the domain by more than {100 * max_exit_fraction:.0f}% "
                f"of extent on axis {a}: {exit_depth:.2f} mm vs {max_exit_fraction * ext_mm:.2f} mm"
            )
    if jacobian_determinant(gt).min() <= 0:
        raise ValueError("composed ground-truth field contains folds")

    moving_img = warp_linear(image, gt)
    moving_mask = warp_nearest(mask, gt) if mask is not None else None
    moving_lm = transform_points(landmarks, gt) if landmarks is not None else None
    return GroundTruthPair(
        fixed=Bundle(image, mask, landmarks, case_id=case_id),
        moving=Bundle(moving_img, moving_mask, moving_lm, case_id=case_id),
        gt_dvf=gt,
        gt_affine=affine_params,
    )


def synth_corpus(num_cases, phantom_spec: PhantomSpec, seed, affine_ranges=None,
                 bspline_spacing=None, amplitude_mm=0.0, max_exit_fraction=0.1,
                 family_seed=None, family_jitter=0.02, images_only=False):
    """Independent ground-truth pairs; case i derives all randomness from
    (seed, i) so corpora are reproducible case by case.

    ``family_seed`` makes the cases a population of lookalike subjects
    (shared blob layout, per-case jitter) instead of unrelated volumes.
    ``images_only`` drops masks, landmarks, and the dense ground-truth
    field after construction (training corpora only need the images).
    """
    pairs = []
    for i in range(num_cases):
        case_seed = np.random.SeedSequence([seed, i])
        s1, s2 = case_seed.spawn(2)
        spec = PhantomSpec(phantom_spec.extents, phantom_spec.spacing, phantom_spec.num_blobs,
                           phantom_spec.texture_noise_sigma, seed=s1)
        phantom = generate_phantom(spec, family_seed=family_seed, family_jitter=family_jitter)
        params, grid = random_gt_transform(s2, spec.geometry(), affine_ranges, bspline_spacing, amplitude_mm)
        pair = make_pair(f"case_{i:03d}", phantom, params, grid,
                         max_exit_fraction=max_exit_fraction)
        if images_only:
            pair = GroundTruthPair(
                fixed=Bundle(pair.fixed.image, case_id=pair.fixed.case_id),
                moving=Bundle(pair.moving.image, case_id=pair.moving.case_id),
                gt_dvf=DisplacementField(np.zeros((3, 1, 1, 1), dtype=np.float32)),
                gt_affine=pair.gt_affine,
            )
        pairs.append(pair)
    return pairs
