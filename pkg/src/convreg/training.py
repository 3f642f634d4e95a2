"""Unsupervised training: mini-batch pair sampling, paired augmentation,
and hierarchical per-stage optimization with predecessor freezing.

Per iteration and batch item, frozen predecessor stages warp the moving
image once at full resolution, both inputs reduce to the stage's
resolution by windowed averaging, the stage predicts its transform, the
warped result feeds the similarity loss, and gradients flow only into
the current stage's parameters. Sampling and augmentation derive all
randomness from (seed, iteration), so interrupted runs resume exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, adam_step, zero_grad
from .grids import Image, same_geometry
from .image import crop_to_multiple, downsample_avg, warp_linear, warp_tensor
from .losses import LossConfig, total_loss
from .networks import StagePipeline, affine_forward, multistage_forward
from .transforms import affine_dvf_tensor, affine_matrix_tensor, bspline_dvf_tensor, pad_lattice_tensor


@dataclass
class AugmentSpec:
    rot90_inplane: bool = False
    crop_voxels: tuple = (0, 0, 0)

    def __post_init__(self):
        self.crop_voxels = tuple(int(c) for c in self.crop_voxels)

    @property
    def enabled(self):
        return self.rot90_inplane or any(self.crop_voxels)


@dataclass
class TrainConfig:
    iterations: int = 100
    batch_size: int = 4
    learning_rate: float = 1e-3
    alpha: float = 0.0
    augmentation: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0
    validation_every: int = 0  # 0 disables periodic validation
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentSpec(**self.augmentation)


@dataclass
class LossCurve:
    train: list = field(default_factory=list)  # (iteration, loss)
    validation: list = field(default_factory=list)  # (iteration, loss)

    def write_csv(self, path):
        val_at = dict(self.validation)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "train_loss", "val_loss"])
            for it, loss in self.train:
                writer.writerow([it, loss, val_at.get(it, "")])


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries a diagnostic dump."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


# -- pair sampling -------------------------------------------------------------


@dataclass
class RegistrationDataset:
    """Subjects of one or more timepoints each.

    intra mode pairs distinct timepoints of one subject; inter mode
    pairs images of distinct subjects. Both produce ordered pairs.
    """

    subjects: list
    mode: str = "intra"

    def __post_init__(self):
        if self.mode not in ("intra", "inter"):
            raise ValueError(f"unknown pairing mode {self.mode!r}")
        if sum(len(s) for s in self.subjects) < 2:
            raise ValueError("dataset needs at least 2 images")
        self._pairs = None

    def ordered_pairs(self):
        """All valid ordered (subject, time) index pairs, materialized once."""
        if self._pairs is None:
            refs = [(si, ti) for si, subj in enumerate(self.subjects) for ti in range(len(subj))]
            pairs = []
            for a, (sa, ta) in enumerate(refs):
                for b, (sb, tb) in enumerate(refs):
                    if a == b:
                        continue
                    if self.mode == "intra" and sa != sb:
                        continue
                    if self.mode == "inter" and sa == sb:
                        continue
                    pairs.append(((sa, ta), (sb, tb)))
            if not pairs:
                raise ValueError(f"no valid ordered pairs in {self.mode} mode")
            self._pairs = pairs
        return self._pairs

    def image(self, ref):
        si, ti = ref
        return self.subjects[si][ti]


def sample_pair_batch(dataset: RegistrationDataset, batch_size, seed, iteration):
    """Ordered (fixed, moving) images, uniform without replacement within
    the batch; deterministic given (seed, iteration)."""
    pairs = dataset.ordered_pairs()
    if batch_size > len(pairs):
        raise ValueError(f"batch size {batch_size} exceeds the {len(pairs)} available ordered pairs")
    rng = np.random.default_rng([int(seed), int(iteration)])
    chosen = rng.choice(len(pairs), size=batch_size, replace=False)
    return [(dataset.image(pairs[i][0]), dataset.image(pairs[i][1])) for i in chosen]


# -- augmentation ----------------------------------------------------------------


def _rot90_pair(fixed: Image, moving: Image, k):
    if k % 4 == 0:
        return fixed, moving

    def rot(img):
        v = np.ascontiguousarray(np.rot90(img.voxels, k, axes=(0, 1)))
        spacing = img.spacing if k % 2 == 0 else (img.spacing[1], img.spacing[0], img.spacing[2])
        return Image(v, spacing, img.origin)

    return rot(fixed), rot(moving)


def augment_pair(fixed: Image, moving: Image, spec: AugmentSpec, seed):
    """The same in-plane rotation and crop applied to both images; crops
    re-anchor the origin so physical correspondence is preserved."""
    if not spec.enabled:
        return fixed, moving
    if not same_geometry(fixed, moving):
        raise ValueError("augment_pair requires images on the same grid")
    rng = np.random.default_rng(seed)
    if spec.rot90_inplane:
        fixed, moving = _rot90_pair(fixed, moving, int(rng.integers(0, 4)))
    if any(spec.crop_voxels):
        sl = []
        new_origin = list(fixed.origin)
        for a in range(3):
            c = spec.crop_voxels[a]
            lo = int(rng.integers(0, c + 1)) if c else 0
            hi = int(rng.integers(0, c + 1)) if c else 0
            if fixed.shape[a] - lo - hi < 1:
                raise ValueError(f"crop {spec.crop_voxels} exceeds extents {fixed.shape}")
            sl.append(slice(lo, fixed.shape[a] - hi))
            new_origin[a] += lo * fixed.spacing[a]
        sl = tuple(sl)
        fixed = Image(fixed.voxels[sl], fixed.spacing, tuple(new_origin))
        moving = Image(moving.voxels[sl], moving.spacing, tuple(new_origin))
    return fixed, moving


# -- per-stage training ------------------------------------------------------------


def prepare_stage_inputs(stage, fixed: Image, moving: Image):
    """Crop to the stage's extent multiple and reduce resolution."""
    mult = stage.input_multiple()
    f_s = downsample_avg(crop_to_multiple(fixed, mult), stage.resolution_factor)
    m_mult = stage.resolution_factor if stage.kind == "affine" else mult
    m_s = downsample_avg(crop_to_multiple(moving, m_mult), stage.resolution_factor)
    return f_s, m_s


def stage_loss(stage, fixed: Image, moving: Image, alpha, epsilon=1e-10):
    """Differentiable loss of one stage on already-prepared full-res inputs.

    Handles resolution reduction, the stage forward, field construction,
    and warping; returns (loss tensor, dvf tensor).
    """
    f_s, m_s = prepare_stage_inputs(stage, fixed, moving)
    if stage.kind == "affine":
        raw = stage.net.forward(f_s.voxels, m_s.voxels)
        matrix_t = affine_matrix_tensor(raw, f_s.geometry().center_mm())
        dvf_t = affine_dvf_tensor(matrix_t, f_s.geometry())
    else:
        out = stage.net.forward(f_s.voxels, m_s.voxels)
        spacing_col = Tensor(np.asarray(f_s.spacing, dtype=out.data.dtype).reshape(3, 1, 1, 1))
        lattice_t, proto = pad_lattice_tensor(out * spacing_col, f_s.shape,
                                              stage.net.config.grid_spacing_voxels)
        dvf_t = bspline_dvf_tensor(lattice_t, proto, f_s.geometry())
    warped_t = warp_tensor(m_s.voxels, dvf_t, m_s.geometry(), f_s.geometry())
    cfg = LossConfig(alpha=alpha, epsilon=epsilon)
    loss = total_loss(Tensor(f_s.voxels.astype(dvf_t.data.dtype)), warped_t,
                      dvf_t if alpha > 0 else None, cfg, spacing=f_s.spacing)
    return loss, dvf_t


def calibrate_stage(pipeline: StagePipeline, stage_index, dataset: RegistrationDataset, config: TrainConfig):
    """Freeze the stage net's feature standardization from the first batch.

    Runs once per stage (no-op when already calibrated, e.g. after a
    checkpoint resume); deterministic given the training seed.
    """
    stage = pipeline.stages[stage_index]
    if stage.net.calibrated:
        return
    batch = sample_pair_batch(dataset, config.batch_size, config.seed, 0)
    volumes, pairs = [], []
    for fixed, moving in batch:
        moving_in = _predecessor_warp(pipeline, stage_index, fixed, moving)
        f_s, m_s = prepare_stage_inputs(stage, fixed, moving_in)
        volumes.extend([f_s.voxels, m_s.voxels])
        pairs.append((f_s.voxels, m_s.voxels))
    if stage.kind == "affine":
        stage.net.calibrate(volumes)
    else:
        stage.net.calibrate(pairs)


def _predecessor_warp(pipeline: StagePipeline, stage_index, fixed: Image, moving: Image):
    """Moving image warped by all frozen predecessors (full resolution)."""
    if stage_index == 0:
        return moving
    sub = StagePipeline(pipeline.stages[:stage_index])
    _, _, warped = multistage_forward(sub, fixed, moving)
    return warped


def _item_seed(seed, iteration, item):
    return np.random.SeedSequence([int(seed), int(iteration), int(item)])


def train_stage(pipeline: StagePipeline, stage_index, dataset: RegistrationDataset,
                config: TrainConfig, val_pairs=None, checkpoint_cb=None, start_iteration=0,
                log_cb=None):
    """Optimize one stage with every predecessor frozen.

    Returns the LossCurve; the stage's parameters are updated in place.
    Gradients never reach frozen stages: predecessors only ever run in
    inference to produce the stage's moving input.
    """
    stage = pipeline.stages[stage_index]
    if not stage.trainable:
        raise ValueError(f"stage {stage_index} is not trainable")
    if stage.kind == "affine" and config.alpha != 0.0:
        raise ValueError("affine stages train with alpha = 0")
    calibrate_stage(pipeline, stage_index, dataset, config)
    params = stage.net.parameters()
    curve = LossCurve()

    for iteration in range(start_iteration, config.iterations):
        batch = sample_pair_batch(dataset, config.batch_size, config.seed, iteration)
        zero_grad(params)
        batch_loss = 0.0
        for j, (fixed, moving) in enumerate(batch):
            if config.augmentation.enabled:
                fixed, moving = augment_pair(fixed, moving, config.augmentation,
                                             _item_seed(config.seed, iteration, j))
            moving_in = _predecessor_warp(pipeline, stage_index, fixed, moving)
            loss, _ = stage_loss(stage, fixed, moving_in, config.alpha)
            item_loss = float(loss.data)
            if not np.isfinite(item_loss):
                raise TrainingDiverged(
                    f"non-finite loss at iteration {iteration}",
                    {"iteration": iteration, "batch_item": j, "loss": item_loss,
                     "stage_index": stage_index,
                     "param_norms": {name: float(np.linalg.norm(p.data))
                                     for name, p in stage.net.named_parameters()}},
                )
            batch_loss += item_loss / config.batch_size
            (loss * (1.0 / config.batch_size)).backward()
        adam_step(params, config.learning_rate)
        curve.train.append((iteration, batch_loss))

        if val_pairs and config.validation_every and (iteration + 1) % config.validation_every == 0:
            curve.validation.append((iteration, validation_loss(pipeline, stage_index, val_pairs, config.alpha)))
        if log_cb:
            log_cb(iteration, batch_loss)
        if checkpoint_cb and config.checkpoint_every and (iteration + 1) % config.checkpoint_every == 0:
            checkpoint_cb(iteration)
    return curve


def validation_loss(pipeline: StagePipeline, stage_index, val_pairs, alpha):
    """Mean stage loss over explicit (fixed, moving) pairs, no augmentation."""
    total = 0.0
    for fixed, moving in val_pairs:
        moving_in = _predecessor_warp(pipeline, stage_index, fixed, moving)
        loss, _ = stage_loss(pipeline.stages[stage_index], fixed, moving_in, alpha)
        total += float(loss.data)
    return total / len(val_pairs)


def train_pipeline(pipeline: StagePipeline, dataset: RegistrationDataset, configs,
                   val_pairs=None, checkpoint_cb=None, log_cb=None):
    """Train stages sequentially, coarse to fine; returns per-stage curves."""
    if len(configs) != len(pipeline):
        raise ValueError(f"need one TrainConfig per stage, got {len(configs)} for {len(pipeline)}")
    curves = []
    for i in range(len(pipeline)):
        cb = (lambda it, i=i: checkpoint_cb(i, it)) if checkpoint_cb else None
        lg = (lambda it, loss, i=i: log_cb(i, it, loss)) if log_cb else None
        curves.append(train_stage(pipeline, i, dataset, configs[i], val_pairs=val_pairs,
                                  checkpoint_cb=cb, log_cb=lg))
    return curves


def pairs_to_dataset(gt_pairs) -> RegistrationDataset:
    """One subject of two timepoints per ground-truth case; intra sampling
    then draws each case in either direction."""
    return RegistrationDataset([[p.moving.image, p.fixed.image] for p in gt_pairs], mode="intra")


def registration_val_pairs(gt_pairs):
    """Canonical-direction (reference, source) image pairs for validation."""
    return [p.registration_inputs() for p in gt_pairs]
