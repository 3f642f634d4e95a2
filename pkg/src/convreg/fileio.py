"""Volume and landmark file I/O.

MetaImage support covers the subset the engine emits and consumes:
NDims=3, MET_SHORT / MET_FLOAT elements, little-endian raw payloads,
optional 3-channel fields (ElementNumberOfChannels=3), as a combined
.mha or a .mhd header with a sibling .raw. Payloads are stored x-fastest
as usual for the format; in-memory arrays are indexed [x, y, z].

Landmark CSV: header ``name,x_mm,y_mm,z_mm``, UTF-8, LF line endings.

Case loading for the public 4D chest-CT benchmark reads headerless
int16 volumes with caller-supplied dims/spacing and whitespace-
delimited landmark triples in 1-based voxel indices.
"""

from __future__ import annotations

import csv
import os
import warnings
from pathlib import Path

import numpy as np
import yaml

from .grids import DisplacementField, Image, LandmarkSet, SegmentationMask

_ELEMENT_TYPES = {"MET_SHORT": np.int16, "MET_FLOAT": np.float32}


def _format_header(shape, spacing, origin, element_type, channels, data_file):
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        f"Offset = {origin[0]:.10g} {origin[1]:.10g} {origin[2]:.10g}",
        "CenterOfRotation = 0 0 0",
        f"ElementSpacing = {spacing[0]:.10g} {spacing[1]:.10g} {spacing[2]:.10g}",
        f"DimSize = {shape[0]} {shape[1]} {shape[2]}",
    ]
    if channels > 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    lines.append(f"ElementType = {element_type}")
    lines.append(f"ElementDataFile = {data_file}")
    return "\n".join(lines) + "\n"


def _payload_bytes(voxels, channels):
    """x-fastest layout; channel index fastest of all for multi-channel."""
    if channels == 1:
        arr = voxels.transpose(2, 1, 0)
    else:  # (3, x, y, z) -> z, y, x slowest-to-faster, channel fastest
        arr = voxels.transpose(3, 2, 1, 0)
    le = arr.dtype.newbyteorder("<")
    return np.ascontiguousarray(arr.astype(le, copy=False)).tobytes()


def write_metaimage(obj, path):
    """Write an Image (MET_FLOAT), SegmentationMask (MET_SHORT), or
    DisplacementField (MET_FLOAT, 3 channels)."""
    path = Path(path)
    if isinstance(obj, DisplacementField):
        voxels, channels = obj.vectors.astype(np.float32), 3
        element = "MET_FLOAT"
        shape = obj.shape
    elif isinstance(obj, SegmentationMask):
        voxels, channels = obj.voxels.astype(np.int16), 1
        element = "MET_SHORT"
        shape = obj.shape
    elif isinstance(obj, Image):
        voxels, channels = obj.voxels.astype(np.float32), 1
        element = "MET_FLOAT"
        shape = obj.shape
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as MetaImage")

    payload = _payload_bytes(voxels, channels)
    if path.suffix == ".mha":
        header = _format_header(shape, obj.spacing, obj.origin, element, channels, "LOCAL")
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(payload)
    elif path.suffix == ".mhd":
        raw_name = path.with_suffix(".raw").name
        header = _format_header(shape, obj.spacing, obj.origin, element, channels, raw_name)
        path.write_bytes(header.encode("ascii"))
        path.with_suffix(".raw").write_bytes(payload)
    else:
        raise ValueError(f"unsupported MetaImage extension {path.suffix!r} (use .mha or .mhd)")


def read_metaimage(path):
    """Read a volume; int16 data is converted to float32 on return.

    Returns an Image, or a DisplacementField when the header declares 3
    channels. Use ``as_mask`` to round-trip label volumes.
    """
    path = Path(path)
    keys = {}
    with open(path, "rb") as fh:
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: header ended before ElementDataFile")
            text = line.decode("ascii", errors="replace").strip()
            if "=" not in text:
                raise ValueError(f"{path}: malformed header line {text!r}")
            key, value = (s.strip() for s in text.split("=", 1))
            keys[key] = value
            if key == "ElementDataFile":
                break
        payload = fh.read() if keys["ElementDataFile"] == "LOCAL" else None

    for required in ("NDims", "DimSize", "ElementSpacing", "ElementType"):
        if required not in keys:
            raise ValueError(f"{path}: missing required header key {required}")
    if keys["NDims"] != "3":
        raise ValueError(f"{path}: NDims must be 3, got {keys['NDims']}")
    if keys.get("BinaryDataByteOrderMSB", "False") == "True":
        raise ValueError(f"{path}: big-endian payloads are not supported")
    if keys["ElementType"] not in _ELEMENT_TYPES:
        raise ValueError(f"{path}: unsupported ElementType {keys['ElementType']}")

    dims = tuple(int(v) for v in keys["DimSize"].split())
    spacing = tuple(float(v) for v in keys["ElementSpacing"].split())
    origin = tuple(float(v) for v in keys.get("Offset", "0 0 0").split())
    channels = int(keys.get("ElementNumberOfChannels", "1"))
    dtype = np.dtype(_ELEMENT_TYPES[keys["ElementType"]]).newbyteorder("<")

    if payload is None:
        raw_path = path.parent / keys["ElementDataFile"]
        payload = raw_path.read_bytes()
    expected = int(np.prod(dims)) * channels * dtype.itemsize
    if len(payload) != expected:
        raise ValueError(f"{path}: payload size mismatch: expected {expected} bytes, got {len(payload)}")

    flat = np.frombuffer(payload, dtype=dtype)
    if channels == 1:
        voxels = flat.reshape(dims[::-1]).transpose(2, 1, 0)
        if voxels.dtype == np.int16:
            voxels = voxels.astype(np.float32)
        return Image(voxels.copy(), spacing, origin)
    if channels != 3:
        raise ValueError(f"{path}: unsupported channel count {channels}")
    vectors = flat.reshape(dims[::-1] + (3,)).transpose(3, 2, 1, 0)
    return DisplacementField(vectors.astype(np.float32).copy(), spacing, origin)


def as_mask(image: Image) -> SegmentationMask:
    """Reinterpret a loaded label volume as integer labels."""
    return SegmentationMask(np.rint(image.voxels).astype(np.int16), image.spacing, image.origin)


# -- landmark CSV ---------------------------------------------------------------


def write_landmarks_csv(landmarks: LandmarkSet, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "x_mm", "y_mm", "z_mm"])
        names = landmarks.names or [f"p{i}" for i in range(len(landmarks))]
        for name, p in zip(names, landmarks.points):
            writer.writerow([name, repr(float(p[0])), repr(float(p[1])), repr(float(p[2]))])


def read_landmarks_csv(path) -> LandmarkSet:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["name", "x_mm", "y_mm", "z_mm"]:
            raise ValueError(f"{path}: unexpected landmark CSV header {header}")
        names, pts = [], []
        for row in reader:
            if not row:
                continue
            names.append(row[0])
            pts.append([float(row[1]), float(row[2]), float(row[3])])
    return LandmarkSet(np.array(pts), names)


# -- raw benchmark cases ----------------------------------------------------------


def _read_raw_int16(path, dims):
    data = Path(path).read_bytes()
    expected = int(np.prod(dims)) * 2
    if len(data) != expected:
        raise ValueError(f"{path}: byte-count mismatch: expected {expected}, got {len(data)}")
    return np.frombuffer(data, dtype=np.dtype(np.int16).newbyteorder("<")).reshape(
        tuple(dims)[::-1]).transpose(2, 1, 0).astype(np.float32)


def read_landmarks_voxel_text(path, spacing) -> LandmarkSet:
    """One whitespace-delimited 1-based ``x y z`` voxel triple per line,
    converted to mm via (index - 1) * spacing. Warns when the file does
    not hold the expected 300 points."""
    pts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: unparseable landmark line {line.rstrip()!r}")
            try:
                idx = [float(p) for p in parts[:3]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: unparseable landmark line {line.rstrip()!r}") from exc
            pts.append([(idx[a] - 1.0) * spacing[a] for a in range(3)])
    if len(pts) != 300:
        warnings.warn(f"{path}: expected 300 landmarks, found {len(pts)}")
    return LandmarkSet(np.array(pts))


def load_dirlab_case(raw_paths, dims, spacing, landmark_paths):
    """Load the two timepoints of one 4D chest-CT case.

    raw_paths / landmark_paths are (path, path) tuples for the two
    breathing phases; the headerless int16 volumes take their dims and
    spacing from the case manifest.
    """
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    images = tuple(Image(_read_raw_int16(p, dims), spacing) for p in raw_paths)
    landmarks = tuple(read_landmarks_voxel_text(p, spacing) for p in landmark_paths)
    return images, landmarks


# -- dataset manifest ---------------------------------------------------------------


def write_manifest(path, cases):
    """cases: list of dicts with id, role, file names, and geometry."""
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump({"cases": cases}, fh, sort_keys=False)


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "cases" not in doc:
        raise ValueError(f"{path}: manifest must contain a 'cases' list")
    return doc["cases"]


def save_pair(pair, case_dir):
    """Write one ground-truth pair's files; returns its manifest entry."""
    case_dir = Path(case_dir)
    os.makedirs(case_dir, exist_ok=True)
    entry = {"id": pair.fixed.case_id, "dir": case_dir.name}
    write_metaimage(pair.fixed.image, case_dir / "fixed.mha")
    write_metaimage(pair.moving.image, case_dir / "moving.mha")
    entry["fixed"] = "fixed.mha"
    entry["moving"] = "moving.mha"
    if pair.fixed.mask is not None:
        write_metaimage(pair.fixed.mask, case_dir / "fixed_mask.mha")
        write_metaimage(pair.moving.mask, case_dir / "moving_mask.mha")
        entry["fixed_mask"] = "fixed_mask.mha"
        entry["moving_mask"] = "moving_mask.mha"
    if pair.fixed.landmarks is not None:
        write_landmarks_csv(pair.fixed.landmarks, case_dir / "fixed_landmarks.csv")
        write_landmarks_csv(pair.moving.landmarks, case_dir / "moving_landmarks.csv")
        entry["fixed_landmarks"] = "fixed_landmarks.csv"
        entry["moving_landmarks"] = "moving_landmarks.csv"
    write_metaimage(pair.gt_dvf, case_dir / "gt_dvf.mha")
    entry["gt_dvf"] = "gt_dvf.mha"
    entry["extents"] = list(pair.fixed.image.shape)
    entry["spacing"] = list(pair.fixed.image.spacing)
    return entry


def load_pair(root, entry):
    """Rebuild a GroundTruthPair from a manifest entry."""
    from .phantom import Bundle, GroundTruthPair

    case_dir = Path(root) / entry["dir"]
    fixed_img = read_metaimage(case_dir / entry["fixed"])
    moving_img = read_metaimage(case_dir / entry["moving"])
    fixed_mask = as_mask(read_metaimage(case_dir / entry["fixed_mask"])) if "fixed_mask" in entry else None
    moving_mask = as_mask(read_metaimage(case_dir / entry["moving_mask"])) if "moving_mask" in entry else None
    fixed_lm = read_landmarks_csv(case_dir / entry["fixed_landmarks"]) if "fixed_landmarks" in entry else None
    moving_lm = read_landmarks_csv(case_dir / entry["moving_landmarks"]) if "moving_landmarks" in entry else None
    gt = read_metaimage(case_dir / entry["gt_dvf"])
    return GroundTruthPair(
        fixed=Bundle(fixed_img, fixed_mask, fixed_lm, case_id=entry["id"]),
        moving=Bundle(moving_img, moving_mask, moving_lm, case_id=entry["id"]),
        gt_dvf=gt,
    )
