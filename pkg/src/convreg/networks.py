"""Network builders and forward passes for the registration stages.

Two designs:
  - an affine regressor with two weight-shared convolutional pipelines,
    global average pooling, and a fully connected head emitting the raw
    transform parameters (12 in 3D, 6 in 2D);
  - a fully convolutional patch design that concatenates the image pair
    and emits one B-spline control displacement vector per grid cell,
    where the grid spacing fixes the number of downsampling layers and
    the receptive field must cover the basis support (4x the spacing).

Stages stack into a pipeline evaluated coarse to fine; each stage's
field is upsampled to full resolution and composed with its
predecessors, and the final warped image is produced by a single
resampling with the composed field.

Output heads start at zero so every stage begins as the identity
transform, which keeps stage-wise bootstrapping stable.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, glorot_uniform_init
from .grids import DisplacementField, Geometry, Image, same_geometry
from .image import crop_to_multiple, downsample_avg, warp_linear
from .transforms import (
    AffineParameters,
    BSplineGrid,
    affine_dvf,
    affine_matrix,
    affine_matrix_tensor,
    bspline_dvf,
    compose,
    identity_dvf,
    pad_lattice,
    resample_dvf,
    squash_affine,
)

# -- layer helpers -----------------------------------------------------------


class ConvLayer:
    def __init__(self, name, in_ch, out_ch, kernel, stride, pad, seed, dtype, zero_init=False):
        kernel = tuple(kernel)
        fan_in = in_ch * int(np.prod(kernel))
        fan_out = out_ch * int(np.prod(kernel))
        if zero_init:
            w = Tensor(np.zeros((out_ch, in_ch) + kernel, dtype=dtype))
        else:
            w = glorot_uniform_init((out_ch, in_ch) + kernel, fan_in, fan_out, seed, dtype=dtype)
        self.name = name
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(out_ch, dtype=dtype))
        self.stride = tuple(stride)
        self.pad = tuple(pad)

    def __call__(self, x):
        out = ad.conv3d(x, self.w, self.stride, self.pad)
        return out + self.b.value.reshape(-1, 1, 1, 1)

    def named_parameters(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class DenseLayer:
    def __init__(self, name, in_n, out_n, seed, dtype, zero_init=False):
        if zero_init:
            w = Tensor(np.zeros((out_n, in_n), dtype=dtype))
        else:
            w = glorot_uniform_init((out_n, in_n), in_n, out_n, seed, dtype=dtype)
        self.name = name
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(out_n, dtype=dtype))

    def __call__(self, x):
        return ad.linear(x, self.w, self.b)

    def named_parameters(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


def _crop_to_even(t, window):
    sl = [slice(None)]
    changed = False
    for a in range(3):
        n = t.shape[1 + a]
        if window[a] > 1 and n % window[a]:
            sl.append(slice(0, n - n % window[a]))
            changed = True
        else:
            sl.append(slice(None))
    return t[tuple(sl)] if changed else t


def receptive_field(layer_specs):
    """Per-axis receptive field via RF += (k - 1) * jump; jump *= stride."""
    rf = np.ones(3, dtype=int)
    jump = np.ones(3, dtype=int)
    for k, stride in layer_specs:
        k = np.asarray(k)
        stride = np.asarray(stride)
        rf += (k - 1) * jump
        jump *= stride
    return tuple(int(v) for v in rf)


# -- affine network -----------------------------------------------------------


@dataclass
class AffineNetConfig:
    num_levels: int = 5
    features_per_layer: int = 32
    fc_widths: tuple = (64, 32)
    spatial_dims: int = 3
    level_downsample: tuple = (2, 2, 2)
    dtype: str = "float32"
    # constant per-group multipliers on the linear head outputs
    # (translation, rotation, scale, shear): translations need mm-scale
    # range while the squashed groups must stay inside the similarity
    # metric's capture range early in training
    output_gains: tuple = (4.0, 0.05, 0.05, 0.05)

    def __post_init__(self):
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.spatial_dims not in (2, 3):
            raise ValueError("spatial_dims must be 2 or 3")
        self.fc_widths = tuple(int(w) for w in self.fc_widths)
        self.level_downsample = tuple(int(d) for d in self.level_downsample)
        if self.spatial_dims == 2:
            self.level_downsample = (1,) + self.level_downsample[1:]
        self.output_gains = tuple(float(g) for g in self.output_gains)

    @property
    def num_outputs(self):
        return 12 if self.spatial_dims == 3 else 6

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class FeatureNorm:
    """Fixed per-feature standardization constants for a head's input.

    Glorot-initialized relu stacks attenuate activations roughly 2x per
    level and leave a dominant common-mode offset, which makes the dense
    head's least-squares problem catastrophically ill-conditioned for
    first-order optimizers. Calibrating (shift, scale) once on sample
    activations and freezing them restores O(1), zero-mean head inputs.
    Deterministic constants, no learned parameters, no batch statistics.
    """

    def __init__(self, shape, dtype):
        self.shift = np.zeros(shape, dtype=dtype)
        self.inv_scale = np.ones(shape, dtype=dtype)
        self.calibrated = False

    def __call__(self, t):
        if not self.calibrated:
            return t
        return (t - Tensor(self.shift)) * Tensor(self.inv_scale)

    def calibrate(self, samples, axis):
        stacked = np.stack([np.asarray(s) for s in samples])
        mu = stacked.mean(axis=axis)
        sd = stacked.std(axis=axis)
        self.shift = mu.reshape(self.shift.shape).astype(self.shift.dtype)
        self.inv_scale = (1.0 / np.maximum(sd, 1e-6)).reshape(self.inv_scale.shape).astype(self.inv_scale.dtype)
        self.calibrated = True

    def state_arrays(self, prefix):
        return {f"{prefix}.shift": self.shift, f"{prefix}.inv_scale": self.inv_scale,
                f"{prefix}.calibrated": np.array([1.0 if self.calibrated else 0.0], dtype=np.float32)}

    def load_state(self, arrays, prefix):
        if f"{prefix}.shift" in arrays:
            self.shift = arrays[f"{prefix}.shift"].reshape(self.shift.shape).astype(self.shift.dtype)
            self.inv_scale = arrays[f"{prefix}.inv_scale"].reshape(self.inv_scale.shape).astype(self.inv_scale.dtype)
            self.calibrated = bool(arrays[f"{prefix}.calibrated"][0] > 0.5)


class AffineNet:
    """Dual weight-shared conv pipelines + global pooling + dense head."""

    def __init__(self, config: AffineNetConfig, seed=0):
        self.config = config
        dt = config.np_dtype
        k = (3, 3, 3) if config.spatial_dims == 3 else (1, 3, 3)
        pad = tuple(1 if e > 1 else 0 for e in k)
        ss = np.random.SeedSequence(seed)
        seeds = ss.spawn(config.num_levels + len(config.fc_widths) + 1)
        self.convs = []
        in_ch = 1
        for i in range(config.num_levels):
            self.convs.append(ConvLayer(f"conv{i}", in_ch, config.features_per_layer, k, (1, 1, 1), pad, seeds[i], dt))
            in_ch = config.features_per_layer
        self.fcs = []
        width = 2 * config.features_per_layer
        for j, w in enumerate(config.fc_widths):
            self.fcs.append(DenseLayer(f"fc{j}", width, w, seeds[config.num_levels + j], dt))
            width = w
        self.head = DenseLayer("head", width, config.num_outputs, seeds[-1], dt, zero_init=True)
        self.feature_norm = FeatureNorm((config.features_per_layer,), dt)

    def named_parameters(self):
        out = []
        for layer in self.convs + self.fcs + [self.head]:
            out.extend(layer.named_parameters())
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_constants(self):
        return self.feature_norm.state_arrays("feature_norm")

    def load_constants(self, arrays):
        self.feature_norm.load_state(arrays, "feature_norm")

    @property
    def calibrated(self):
        return self.feature_norm.calibrated

    def _pipeline(self, vox):
        t = vox if isinstance(vox, Tensor) else Tensor(np.asarray(vox, dtype=self.config.np_dtype))
        t = t.reshape((1,) + t.shape) if t.data.ndim == 3 else t
        win = self.config.level_downsample
        for conv in self.convs:
            t = ad.relu(conv(t))
            t = _crop_to_even(t, win)
            if any(t.shape[1 + a] < win[a] for a in range(3)):
                raise ValueError(
                    f"spatial extents too small for num_levels={self.config.num_levels}: reached {t.shape[1:]}"
                )
            t = ad.avg_pool3d(t, win)
        return ad.global_avg_pool(t)

    def calibrate(self, volumes):
        """Freeze per-feature standardization from sample pipeline outputs.

        Both pipelines share weights, so one set of constants serves both.
        """
        feats = [self._pipeline(v).data for v in volumes]
        self.feature_norm.calibrate(feats, axis=0)

    def _head_gains(self):
        gt, gr, gs, gh = self.config.output_gains
        if self.config.num_outputs == 12:
            return np.array([gt] * 3 + [gr] * 3 + [gs] * 3 + [gh] * 3, dtype=self.config.np_dtype)
        return np.array([gt, gt, gr, gs, gs, gh], dtype=self.config.np_dtype)

    def forward(self, fixed_vox, moving_vox):
        """Raw (12,) parameter tensor; 2D nets emit 6 and lift to 12."""
        a = self.feature_norm(self._pipeline(fixed_vox))
        b = self.feature_norm(self._pipeline(moving_vox))
        feats = ad.concat(a, b, axis=0)
        for fc in self.fcs:
            feats = ad.relu(fc(feats))
        raw = self.head(feats) * Tensor(self._head_gains())
        if self.config.num_outputs == 6:
            raw = lift_raw_2d(raw)
        return raw


def lift_raw_2d(raw6):
    """Embed 6 in-plane raw parameters into the 12-value 3D layout.

    Layout in: (tx, ty, rz, sx, sy, shear_xy); out-of-plane components
    stay at raw 0, squashing to the identity.
    """
    z1 = Tensor(np.zeros(1, dtype=raw6.data.dtype))
    z2 = Tensor(np.zeros(2, dtype=raw6.data.dtype))
    trans = ad.concat(raw6[0:2], z1)
    rot = ad.concat(z2, raw6[2:3])
    scale = ad.concat(raw6[3:5], z1)
    shear = ad.concat(raw6[5:6], z2)
    return ad.concat(ad.concat(trans, rot), ad.concat(scale, shear))


def affine_forward(net: AffineNet, fixed: Image, moving: Image) -> AffineParameters:
    raw = net.forward(fixed.voxels, moving.voxels)
    return squash_affine(raw.data.astype(np.float64))


# -- deformable network ---------------------------------------------------------


@dataclass
class DeformableNetConfig:
    grid_spacing_voxels: tuple = (8, 8, 8)
    features_per_layer: int = 32
    downsample_mode: str = "avg_pool"  # or strided_conv
    dtype: str = "float32"

    def __post_init__(self):
        self.grid_spacing_voxels = tuple(int(s) for s in self.grid_spacing_voxels)
        for s in self.grid_spacing_voxels:
            if s < 1 or (s & (s - 1)) != 0:
                raise ValueError(f"grid spacing must be powers of 2, got {self.grid_spacing_voxels}")
        if self.downsample_mode not in ("avg_pool", "strided_conv"):
            raise ValueError(f"unknown downsample_mode {self.downsample_mode!r}")

    @property
    def levels_per_axis(self):
        return tuple(int(np.log2(s)) for s in self.grid_spacing_voxels)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class DeformableNet:
    """Fully convolutional: concatenated pair in, control lattice out.

    The grid spacing determines the number of 2x downsampling layers per
    axis; two further 3^3 convolutions widen the receptive field past
    the basis support, and 1^3 layers decode to a 3-channel head.
    """

    def __init__(self, config: DeformableNetConfig, seed=0):
        self.config = config
        dt = config.np_dtype
        F = config.features_per_layer
        levels = config.levels_per_axis
        num_levels = max(levels) if max(levels) > 0 else 0
        ss = np.random.SeedSequence(seed)
        seeds = iter(ss.spawn(2 * num_levels + 8))
        self.blocks = []  # list of ("conv"|"pool", payload)
        self._rf_specs = []
        in_ch = 2
        for lvl in range(num_levels):
            self.blocks.append(("conv", ConvLayer(f"enc{lvl}", in_ch, F, (3, 3, 3), (1, 1, 1), (1, 1, 1),
                                                  next(seeds), dt)))
            self._rf_specs.append(((3, 3, 3), (1, 1, 1)))
            in_ch = F
            win = tuple(2 if lvl < levels[a] else 1 for a in range(3))
            if config.downsample_mode == "avg_pool":
                self.blocks.append(("pool", win))
            else:
                k = tuple(4 if w == 2 else 3 for w in win)
                self.blocks.append(("conv", ConvLayer(f"down{lvl}", in_ch, F, k, win, (1, 1, 1), next(seeds), dt)))
            self._rf_specs.append((tuple(2 if w == 2 else 1 for w in win) if config.downsample_mode == "avg_pool"
                                   else tuple(4 if w == 2 else 3 for w in win), win))
        for j in range(2):
            self.blocks.append(("conv", ConvLayer(f"mid{j}", in_ch, F, (3, 3, 3), (1, 1, 1), (1, 1, 1),
                                                  next(seeds), dt)))
            self._rf_specs.append(((3, 3, 3), (1, 1, 1)))
            in_ch = F
        for j in range(2):
            self.blocks.append(("conv", ConvLayer(f"dec{j}", in_ch, F, (1, 1, 1), (1, 1, 1), (0, 0, 0),
                                                  next(seeds), dt)))
            self._rf_specs.append(((1, 1, 1), (1, 1, 1)))
        self.head = ConvLayer("head", F, 3, (1, 1, 1), (1, 1, 1), (0, 0, 0), next(seeds), dt, zero_init=True)
        self._rf_specs.append(((1, 1, 1), (1, 1, 1)))
        self.feature_norm = FeatureNorm((F, 1, 1, 1), dt)

        rf = receptive_field(self._rf_specs)
        for a in range(3):
            if rf[a] < 4 * config.grid_spacing_voxels[a]:
                raise ValueError(
                    f"receptive field {rf} does not cover 4x grid spacing {config.grid_spacing_voxels}"
                )
        self.receptive_field = rf

    def named_parameters(self):
        out = []
        for kind, payload in self.blocks:
            if kind == "conv":
                out.extend(payload.named_parameters())
        out.extend(self.head.named_parameters())
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_constants(self):
        return self.feature_norm.state_arrays("feature_norm")

    def load_constants(self, arrays):
        self.feature_norm.load_state(arrays, "feature_norm")

    @property
    def calibrated(self):
        return self.feature_norm.calibrated

    def _body(self, fixed_vox, moving_vox):
        dt = self.config.np_dtype
        f = fixed_vox if isinstance(fixed_vox, Tensor) else Tensor(np.asarray(fixed_vox, dtype=dt))
        m = moving_vox if isinstance(moving_vox, Tensor) else Tensor(np.asarray(moving_vox, dtype=dt))
        if f.shape != m.shape:
            raise ValueError(f"deformable stage needs equal-size inputs, got {f.shape} vs {m.shape}")
        s = self.config.grid_spacing_voxels
        if any(f.shape[a] % s[a] for a in range(3)):
            raise ValueError(f"input extents {f.shape} not divisible by grid spacing {s}")
        t = ad.concat(f.reshape((1,) + f.shape), m.reshape((1,) + m.shape), axis=0)
        for kind, payload in self.blocks:
            if kind == "conv":
                t = ad.relu(payload(t))
            else:
                t = ad.avg_pool3d(t, payload)
        return t

    def calibrate(self, input_pairs):
        """Freeze per-channel standardization from sample head inputs."""
        acts = [self._body(f, m).data for f, m in input_pairs]
        stacked = np.concatenate([a.reshape(a.shape[0], -1) for a in acts], axis=1)
        self.feature_norm.calibrate([stacked], axis=(0, 2))

    def forward(self, fixed_vox, moving_vox):
        """Control displacements (3, D/s, H/s, W/s) in stage-resolution voxels."""
        t = self.feature_norm(self._body(fixed_vox, moving_vox))
        return self.head(t)  # unconstrained: negative displacements allowed


def deformable_forward(net: DeformableNet, fixed: Image, moving: Image) -> BSplineGrid:
    """Predict the control lattice in mm (margin-padded, ready for bspline_dvf)."""
    out = net.forward(fixed.voxels, moving.voxels)
    mm = out.data.astype(np.float64) * np.asarray(fixed.spacing)[:, None, None, None]
    return pad_lattice(mm, fixed.shape, net.config.grid_spacing_voxels)


# -- multi-stage pipeline -----------------------------------------------------------


@dataclass
class Stage:
    kind: str  # affine | deformable
    net: object
    resolution_factor: tuple = (1, 1, 1)
    trainable: bool = True
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("affine", "deformable"):
            raise ValueError(f"unknown stage kind {self.kind!r}")
        self.resolution_factor = tuple(int(f) for f in (
            self.resolution_factor if hasattr(self.resolution_factor, "__len__") else (self.resolution_factor,) * 3
        ))
        if not self.name:
            self.name = self.kind

    def input_multiple(self):
        """Full-resolution extent multiple this stage needs per axis."""
        f = np.asarray(self.resolution_factor)
        if self.kind == "deformable":
            f = f * np.asarray(self.net.config.grid_spacing_voxels)
        return tuple(int(v) for v in f)


@dataclass
class StagePipeline:
    stages: list = field(default_factory=list)

    def __post_init__(self):
        kinds = [s.kind for s in self.stages]
        if "affine" in kinds[1:]:
            raise ValueError("at most one affine stage is allowed and it must come first")
        factors = [s.resolution_factor for s in self.stages]
        for prev, cur in zip(factors, factors[1:]):
            if any(c > p for c, p in zip(cur, prev)):
                raise ValueError(f"resolution factors must go coarse to fine, got {factors}")

    def __iter__(self):
        return iter(self.stages)

    def __len__(self):
        return len(self.stages)

    def required_multiple(self):
        mult = np.ones(3, dtype=np.int64)
        for s in self.stages:
            mult = np.lcm(mult, np.asarray(s.input_multiple(), dtype=np.int64))
        return tuple(int(v) for v in mult)


@dataclass
class StageResult:
    name: str
    kind: str
    stage_dvf: DisplacementField  # at stage resolution
    cumulative_dvf: DisplacementField  # composed through this stage, full resolution
    seconds: float


def stage_input_images(stage: Stage, fixed: Image, moving_on_fixed: Image):
    """Resolution-reduced (windowed averaging) stage inputs."""
    f = stage.resolution_factor
    return downsample_avg(fixed, f), downsample_avg(moving_on_fixed, f)


def _check_pipeline_geometry(pipeline: StagePipeline, fixed: Image, moving: Image):
    mult = pipeline.required_multiple()
    if any(fixed.shape[a] % mult[a] for a in range(3)):
        raise ValueError(
            f"fixed extents {fixed.shape} incompatible with pipeline resolution multiples {mult}; crop first"
        )
    if pipeline.stages and pipeline.stages[0].kind == "deformable" and not same_geometry(fixed, moving):
        raise ValueError("deformable-first pipelines require fixed and moving on the same grid")


def multistage_forward(pipeline: StagePipeline, fixed: Image, moving: Image):
    """One-shot inference through all stages.

    Returns (stage results, composed full-resolution DVF, warped image).
    Each stage sees the fixed image at its resolution and the moving
    image warped by all predecessors; the final image is produced by a
    single resampling with the composed field.
    """
    _check_pipeline_geometry(pipeline, fixed, moving)
    geom_full = fixed.geometry()
    composed = identity_dvf(geom_full)
    results = []
    for i, stage in enumerate(pipeline):
        t0 = time.perf_counter()
        if i == 0 and stage.kind == "affine":
            moving_in = moving  # dual pipelines accept the raw geometry
        else:
            moving_in = warp_linear(moving, composed)
        if stage.kind == "affine":
            f_in = downsample_avg(crop_to_multiple(fixed, stage.resolution_factor), stage.resolution_factor)
            m_in = downsample_avg(crop_to_multiple(moving_in, stage.resolution_factor), stage.resolution_factor)
            params = affine_forward(stage.net, f_in, m_in)
            matrix = affine_matrix(params, center_mm=f_in.geometry().center_mm())
            stage_dvf = affine_dvf(matrix, f_in.geometry())
            full_dvf = affine_dvf(matrix, geom_full)  # analytic at any resolution
        else:
            f_in, m_in = stage_input_images(stage, fixed, moving_in)
            grid = deformable_forward(stage.net, f_in, m_in)
            stage_dvf = bspline_dvf(grid, f_in.geometry())
            full_dvf = resample_dvf(stage_dvf, geom_full)
        composed = compose(composed, full_dvf)
        results.append(StageResult(stage.name or f"stage{i + 1}", stage.kind, stage_dvf,
                                   composed, time.perf_counter() - t0))
    warped = warp_linear(moving, composed)
    return results, composed, warped


# -- checkpoints ---------------------------------------------------------------

_MAGIC = b"CONVREG1"


def _net_config_dict(net):
    cfg = dict(net.config.__dict__)
    kind = "affine" if isinstance(net, AffineNet) else "deformable"
    for k, v in cfg.items():
        if isinstance(v, tuple):
            cfg[k] = list(v)
    return {"kind": kind, "config": cfg}


def save_checkpoint(path, net, extra_arrays=None, meta=None):
    """Binary container: magic, JSON header (layer names/shapes/config), raw
    little-endian weight blobs. Round trips bit-exactly."""
    arrays = {name: p.data for name, p in net.named_parameters()}
    arrays.update(net.state_constants())
    if extra_arrays:
        arrays.update(extra_arrays)
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format": "convreg-checkpoint", "network": _net_config_dict(net),
              "entries": entries, "meta": meta or {}}
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint64(len(encoded)).tobytes())
        fh.write(encoded)
        for raw in blobs:
            fh.write(raw)


def _build_net_from_config(netinfo, seed=0):
    cfg = dict(netinfo["config"])
    for k, v in cfg.items():
        if isinstance(v, list):
            cfg[k] = tuple(v)
    if netinfo["kind"] == "affine":
        return AffineNet(AffineNetConfig(**cfg), seed=seed)
    return DeformableNet(DeformableNetConfig(**cfg), seed=seed)


def load_checkpoint(path):
    """Rebuild the network and return (net, extra_arrays, meta)."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = np.frombuffer(fh.read(8), dtype=np.uint64)
        header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        blob = fh.read()
    net = _build_net_from_config(header["network"])
    params = dict(net.named_parameters())
    extra = {}
    for e in header["entries"]:
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"]).copy()
        if e["name"] in params:
            params[e["name"]].value.data = arr
            params[e["name"]].adam_m = np.zeros_like(arr)
            params[e["name"]].adam_v = np.zeros_like(arr)
        else:
            extra[e["name"]] = arr
    net.load_constants(extra)
    for key in list(extra):
        if key.startswith("feature_norm."):
            del extra[key]
    return net, extra, header.get("meta", {})
