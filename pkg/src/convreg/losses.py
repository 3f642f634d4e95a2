"""Training objective: negative normalized cross-correlation plus a
weighted bending-energy penalty on the displacement field.

The penalty discretizes the mean squared second derivatives of the
transformation (pure terms once, mixed terms twice) over interior
voxels, in mm, summed over the three displacement components. It
vanishes on affine fields, which keeps the dense field locally affine
where the images carry no deformation evidence.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .grids import DisplacementField


@dataclass
class LossConfig:
    """alpha weights the bending penalty; 0 for affine stages, 0.05 default
    for deformable stages. epsilon stabilizes the NCC denominator so
    constant crops yield loss 0 instead of failing mid-training."""

    alpha: float = 0.05
    epsilon: float = 1e-10

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def ncc_loss(fixed, warped, epsilon=1e-10):
    """Negative NCC over the whole overlap domain; range [-1, 1]."""
    f = as_tensor(fixed)
    w = as_tensor(warped)
    if f.shape != w.shape:
        raise ValueError(f"ncc_loss shape mismatch: {f.shape} vs {w.shape}")
    fc = f - f.mean()
    wc = w - w.mean()
    num = (fc * wc).sum()
    den = ad.sqrt((fc * fc).sum() * (wc * wc).sum() + epsilon)
    return -(num / den)


def _second_diffs(u, spacing):
    """Pure and mixed central second differences of one channel, interior only."""
    hx, hy, hz = spacing
    c = u[1:-1, 1:-1, 1:-1]
    dxx = (u[2:, 1:-1, 1:-1] - 2.0 * c + u[:-2, 1:-1, 1:-1]) / (hx * hx)
    dyy = (u[1:-1, 2:, 1:-1] - 2.0 * c + u[1:-1, :-2, 1:-1]) / (hy * hy)
    dzz = (u[1:-1, 1:-1, 2:] - 2.0 * c + u[1:-1, 1:-1, :-2]) / (hz * hz)
    # mixed: successive central first differences (4-point stencil)
    dxy = (u[2:, 2:, 1:-1] - u[2:, :-2, 1:-1] - u[:-2, 2:, 1:-1] + u[:-2, :-2, 1:-1]) / (4.0 * hx * hy)
    dxz = (u[2:, 1:-1, 2:] - u[2:, 1:-1, :-2] - u[:-2, 1:-1, 2:] + u[:-2, 1:-1, :-2]) / (4.0 * hx * hz)
    dyz = (u[1:-1, 2:, 2:] - u[1:-1, 2:, :-2] - u[1:-1, :-2, 2:] + u[1:-1, :-2, :-2]) / (4.0 * hy * hz)
    return dxx, dyy, dzz, dxy, dxz, dyz


def bending_energy(dvf, spacing=(1.0, 1.0, 1.0)):
    """Mean over interior voxels of the squared-second-derivative integrand.

    Accepts a (3,D,H,W) tensor (differentiable) or a DisplacementField.
    """
    if isinstance(dvf, DisplacementField):
        spacing = dvf.spacing
        dvf = Tensor(dvf.vectors)
    u = as_tensor(dvf)
    if u.data.ndim != 4 or u.shape[0] != 3:
        raise ValueError(f"bending_energy expects (3,D,H,W), got {u.shape}")
    if min(u.shape[1:]) < 3:
        raise ValueError(f"bending_energy needs extents >= 3 per axis, got {u.shape[1:]}")
    total = None
    for c in range(3):
        dxx, dyy, dzz, dxy, dxz, dyz = _second_diffs(u[c], spacing)
        term = (
            (dxx * dxx).mean() + (dyy * dyy).mean() + (dzz * dzz).mean()
            + 2.0 * (dxy * dxy).mean() + 2.0 * (dxz * dxz).mean() + 2.0 * (dyz * dyz).mean()
        )
        total = term if total is None else total + term
    return total


def bending_energy_value(dvf: DisplacementField) -> float:
    return float(bending_energy(dvf).data)


def total_loss(fixed, warped, dvf=None, config: LossConfig | None = None, spacing=(1.0, 1.0, 1.0)):
    """ncc_loss + alpha * bending_energy; alpha == 0 skips the penalty."""
    config = config or LossConfig()
    loss = ncc_loss(fixed, warped, epsilon=config.epsilon)
    if config.alpha > 0.0:
        if dvf is None:
            raise ValueError("alpha > 0 requires a displacement field")
        loss = loss + config.alpha * bending_energy(dvf, spacing)
    return loss
