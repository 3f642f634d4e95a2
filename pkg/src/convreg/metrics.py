"""Quantitative evaluation: overlap, surface distances, landmark errors,
and displacement-field topology statistics, with table-style aggregation.

Surfaces are the centers of labeled voxels that have at least one
six-neighbor of a different label (out-of-volume counts as different).
Standard deviations are population standard deviations. Dice of two
empty masks is 1 (perfect agreement); exactly one empty gives 0.
Missing reference data leaves a metric absent (None), never zero.

Report rows follow the composed field through each stage for overlap
and landmark metrics, while topology statistics describe each stage's
own field (matching per-stage reporting conventions).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .grids import LandmarkSet, SegmentationMask, require_same_geometry
from .image import transform_points, warp_nearest
from .transforms import folding_fraction, jacobian_determinant, jacobian_std


def dice(p: SegmentationMask, r: SegmentationMask, label=1) -> float:
    """2|P n R| / (|P| + |R|) for one label."""
    require_same_geometry(p, r, "dice masks")
    pm = p.voxels == label
    rm = r.voxels == label
    denom = int(pm.sum()) + int(rm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pm & rm).sum()) / denom


def extract_surface(mask: SegmentationMask, label=1) -> np.ndarray:
    """Boundary voxel centers (N, 3) in mm for one label."""
    m = mask.voxels == label
    if not m.any():
        raise ValueError(f"label {label} absent from mask")
    interior = np.ones_like(m)
    for a in range(3):
        lo = np.roll(m, 1, axis=a)
        hi = np.roll(m, -1, axis=a)
        idx_lo = [slice(None)] * 3
        idx_lo[a] = 0
        idx_hi = [slice(None)] * 3
        idx_hi[a] = -1
        lo[tuple(idx_lo)] = False  # out-of-volume neighbors differ
        hi[tuple(idx_hi)] = False
        interior &= lo & hi
    boundary = m & ~interior
    idx = np.argwhere(boundary)
    return idx * np.asarray(mask.spacing) + np.asarray(mask.origin)


def asd(p_surface, r_surface) -> float:
    """Average symmetric surface distance in mm."""
    p_surface = np.atleast_2d(p_surface)
    r_surface = np.atleast_2d(r_surface)
    if len(p_surface) == 0 or len(r_surface) == 0:
        raise ValueError("empty surface")
    d_pr = cKDTree(r_surface).query(p_surface)[0]
    d_rp = cKDTree(p_surface).query(r_surface)[0]
    return float((d_pr.sum() + d_rp.sum()) / (len(p_surface) + len(r_surface)))


def hausdorff(p_surface, r_surface) -> float:
    """Symmetric Hausdorff distance in mm."""
    p_surface = np.atleast_2d(p_surface)
    r_surface = np.atleast_2d(r_surface)
    if len(p_surface) == 0 or len(r_surface) == 0:
        raise ValueError("empty surface")
    d_pr = cKDTree(r_surface).query(p_surface)[0]
    d_rp = cKDTree(p_surface).query(r_surface)[0]
    return float(max(d_pr.max(), d_rp.max()))


def landmark_error(transformed: LandmarkSet, reference: LandmarkSet):
    """(mean mm, population std mm, per-point distances)."""
    if len(transformed) != len(reference):
        raise ValueError(f"landmark count mismatch: {len(transformed)} vs {len(reference)}")
    per_point = np.linalg.norm(transformed.points - reference.points, axis=1)
    return float(per_point.mean()), float(per_point.std()), per_point


# -- per-pair evaluation -------------------------------------------------------

METRIC_COLUMNS = ("dice", "hausdorff_mm", "asd_mm", "landmark_mean_mm", "landmark_std_mm",
                  "folding_fraction", "jacobian_std", "seconds")


def _overlap_metrics(warped_mask, reference_mask, label):
    row = {}
    row["dice"] = dice(warped_mask, reference_mask, label)
    try:
        ps = extract_surface(warped_mask, label)
        rs = extract_surface(reference_mask, label)
        row["asd_mm"] = asd(ps, rs)
        row["hausdorff_mm"] = hausdorff(ps, rs)
    except ValueError:
        row["asd_mm"] = None
        row["hausdorff_mm"] = None
    return row


def evaluate_pair(fixed_bundle, moving_bundle, stage_results, label=1):
    """Metric rows for one registered pair.

    ``stage_results`` is a list of (name, stage_dvf, cumulative_dvf,
    seconds); overlap and landmark metrics use the cumulative field
    through each stage (the fixed bundle's mask and landmarks pushed
    onto the moving bundle's references), topology statistics use the
    stage's own field. A before-registration row comes first. Missing
    reference data leaves metrics absent rather than zero.
    """
    case_id = fixed_bundle.case_id or "pair"
    rows = []

    def blank_row(stage_name):
        row = {"case_id": case_id, "stage": stage_name}
        row.update({c: None for c in METRIC_COLUMNS})
        return row

    before = blank_row("before")
    if fixed_bundle.mask is not None and moving_bundle.mask is not None:
        before.update(_overlap_metrics(fixed_bundle.mask, moving_bundle.mask, label))
    if fixed_bundle.landmarks is not None and moving_bundle.landmarks is not None:
        m, s, _ = landmark_error(fixed_bundle.landmarks, moving_bundle.landmarks)
        before["landmark_mean_mm"] = m
        before["landmark_std_mm"] = s
    rows.append(before)

    for name, stage_dvf, cumulative_dvf, seconds in stage_results:
        row = blank_row(name)
        row["seconds"] = seconds
        if fixed_bundle.mask is not None and moving_bundle.mask is not None:
            warped = warp_nearest(fixed_bundle.mask, cumulative_dvf)
            row.update(_overlap_metrics(warped, moving_bundle.mask, label))
        if fixed_bundle.landmarks is not None and moving_bundle.landmarks is not None:
            moved = transform_points(fixed_bundle.landmarks, cumulative_dvf)
            m, s, _ = landmark_error(moved, moving_bundle.landmarks)
            row["landmark_mean_mm"] = m
            row["landmark_std_mm"] = s
        if min(stage_dvf.shape) >= 3:
            det = jacobian_determinant(stage_dvf)
            row["folding_fraction"] = folding_fraction(det)
            row["jacobian_std"] = jacobian_std(det)
        rows.append(row)
    return rows


# -- aggregation and report output ------------------------------------------------


def median_iqr(values):
    """(median, p75 - p25) with linear interpolation."""
    v = np.asarray(values, dtype=float)
    return float(np.median(v)), float(np.percentile(v, 75) - np.percentile(v, 25))


def mean_std(values):
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std())


@dataclass
class RegistrationReport:
    rows: list = field(default_factory=list)

    def add_pair(self, rows):
        self.rows.extend(rows)

    def stages(self):
        seen = []
        for r in self.rows:
            if r["stage"] not in seen:
                seen.append(r["stage"])
        return seen

    def aggregate(self):
        """Per stage, per metric: median, iqr, mean, std over pairs."""
        out = {}
        for stage in self.stages():
            stage_rows = [r for r in self.rows if r["stage"] == stage]
            metrics = {}
            for col in METRIC_COLUMNS:
                vals = [r[col] for r in stage_rows if r.get(col) is not None]
                if not vals:
                    continue
                med, iqr = median_iqr(vals)
                mean, std = mean_std(vals)
                metrics[col] = {"median": med, "iqr": iqr, "mean": mean, "std": std, "n": len(vals)}
            out[stage] = metrics
        return out

    def write_csv(self, path):
        """One row per pair per stage; RFC-4180 via the csv module."""
        columns = ["case_id", "stage"] + list(METRIC_COLUMNS)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for r in self.rows:
                writer.writerow(["" if r.get(c) is None else r.get(c) for c in columns])

    def write_long_csv(self, path):
        """Plot-ready long format: case_id, stage, metric, value."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case_id", "stage", "metric", "value"])
            for r in self.rows:
                for c in METRIC_COLUMNS:
                    if r.get(c) is not None:
                        writer.writerow([r["case_id"], r["stage"], c, r[c]])

    def summary_text(self):
        """Median +/- IQR table with mean (std) beneath, one row per stage.

        Standard deviations are population standard deviations.
        """
        agg = self.aggregate()
        cols = [c for c in METRIC_COLUMNS if any(c in m for m in agg.values())]
        width = max((len(s) for s in agg), default=8) + 2
        lines = ["stage".ljust(width) + "  ".join(c.ljust(22) for c in cols)]
        for stage, metrics in agg.items():
            cells = []
            for c in cols:
                if c in metrics:
                    m = metrics[c]
                    cells.append(f"{m['median']:.3f} +/- {m['iqr']:.3f}".ljust(22))
                else:
                    cells.append("--".ljust(22))
            lines.append(stage.ljust(width) + "  ".join(cells))
            cells = []
            for c in cols:
                if c in metrics:
                    m = metrics[c]
                    cells.append(f"  {m['mean']:.3f} ({m['std']:.3f})".ljust(22))
                else:
                    cells.append("".ljust(22))
            lines.append(" ".ljust(width) + "  ".join(cells))
        return "\n".join(lines) + "\n"


def read_report_csv(path) -> RegistrationReport:
    report = RegistrationReport()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for raw in reader:
            row = {"case_id": raw["case_id"], "stage": raw["stage"]}
            for c in METRIC_COLUMNS:
                row[c] = float(raw[c]) if raw.get(c) not in (None, "") else None
            report.rows.append(row)
    return report
