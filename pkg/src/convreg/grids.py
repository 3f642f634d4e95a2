"""Physical-space containers shared across the registration engine.

All grids use array axis k == physical axis k (spacing[k] mm along axis
k); voxel (i,j,k) has its center at origin + (i,j,k) * spacing. All
displacements are stored in mm on the grid of the image they resample
onto (backward mapping).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _vec3(v, dtype=float):
    out = tuple(dtype(x) for x in v)
    if len(out) != 3:
        raise ValueError(f"expected 3 components, got {v!r}")
    return out


@dataclass
class Image:
    """Scalar voxel grid with physical spacing (mm) and origin (mm)."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"image voxels must be 3D, got shape {self.voxels.shape}")
        if min(self.voxels.shape) < 1:
            raise ValueError("image extents must be >= 1")
        self.spacing = _vec3(self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self.origin = _vec3(self.origin)

    @property
    def shape(self):
        return self.voxels.shape

    def geometry(self):
        return Geometry(self.voxels.shape, self.spacing, self.origin)


@dataclass
class SegmentationMask:
    """Integer label grid sharing the Image geometry."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"mask voxels must be 3D, got shape {self.voxels.shape}")
        if not np.issubdtype(self.voxels.dtype, np.integer):
            raise ValueError("mask voxels must be integer labels")
        if self.voxels.min(initial=0) < 0:
            raise ValueError("mask labels must be non-negative")
        self.spacing = _vec3(self.spacing)
        self.origin = _vec3(self.origin)

    @property
    def shape(self):
        return self.voxels.shape

    def labels(self):
        return set(int(v) for v in np.unique(self.voxels))

    def geometry(self):
        return Geometry(self.voxels.shape, self.spacing, self.origin)


@dataclass
class LandmarkSet:
    """Points in physical space (mm), optionally named."""

    points: np.ndarray
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError(f"landmarks must be an (N,3) array with N >= 1, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")
        if self.names and len(self.names) != len(self.points):
            raise ValueError("number of names must match number of points")

    def __len__(self):
        return len(self.points)


@dataclass
class DisplacementField:
    """Per-voxel 3-vector displacement (mm) on the grid it warps onto."""

    vectors: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 4 or self.vectors.shape[0] != 3:
            raise ValueError(f"displacement field must be (3,D,H,W), got {self.vectors.shape}")
        self.spacing = _vec3(self.spacing)
        self.origin = _vec3(self.origin)

    @property
    def shape(self):
        return self.vectors.shape[1:]

    def geometry(self):
        return Geometry(self.vectors.shape[1:], self.spacing, self.origin)


@dataclass(frozen=True)
class Geometry:
    """Grid extents plus the voxel-to-mm map."""

    extents: tuple
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        object.__setattr__(self, "spacing", _vec3(self.spacing))
        object.__setattr__(self, "origin", _vec3(self.origin))

    def voxel_grid_mm(self, dtype=np.float64):
        """(3, D, H, W) array of voxel-center coordinates in mm."""
        axes = [self.origin[a] + self.spacing[a] * np.arange(self.extents[a], dtype=dtype) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=0)

    def center_mm(self):
        return tuple(self.origin[a] + 0.5 * self.spacing[a] * (self.extents[a] - 1) for a in range(3))

    def bounds_mm(self):
        lo = self.origin
        hi = tuple(self.origin[a] + self.spacing[a] * (self.extents[a] - 1) for a in range(3))
        return lo, hi

    def mm_to_voxel(self, pts_mm):
        """Map (3,N) mm coordinates to fractional voxel indices."""
        pts_mm = np.asarray(pts_mm, dtype=float)
        sp = np.array(self.spacing).reshape(3, 1)
        og = np.array(self.origin).reshape(3, 1)
        return (pts_mm - og) / sp


def same_geometry(a, b, tol=1e-9):
    ga = a.geometry() if hasattr(a, "geometry") else a
    gb = b.geometry() if hasattr(b, "geometry") else b
    return (
        ga.extents == gb.extents
        and all(abs(x - y) <= tol for x, y in zip(ga.spacing, gb.spacing))
        and all(abs(x - y) <= tol for x, y in zip(ga.origin, gb.origin))
    )


def require_same_geometry(a, b, what="operands"):
    if not same_geometry(a, b):
        ga = a.geometry() if hasattr(a, "geometry") else a
        gb = b.geometry() if hasattr(b, "geometry") else b
        raise ValueError(f"geometry mismatch between {what}: {ga} vs {gb}")
