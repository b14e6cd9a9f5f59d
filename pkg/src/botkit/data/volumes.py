"""Volume container and dataset manifest I/O.

A volume file is a small text header followed by a blank line and the raw
little-endian voxel blob::

    BOTKIT-VOLUME 1
    subject_id=S0001
    scan_id=S0001-0
    label=AD
    extents=64,64,64
    axis_order=sagittal,coronal,axial
    dtype=float32

    <raw bytes>
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LABELS = ("CN", "AD", "MCIc", "MCInc")
AXIS_ORDER = ("sagittal", "coronal", "axial")
VOLUME_MAGIC = "BOTKIT-VOLUME 1"
MANIFEST_FIELDS = ("subject_id", "scan_id", "label", "path")
MANIFEST_VERSION = 1
MIN_EXTENT = 10


class VolumeFormatError(ValueError):
    pass


@dataclass
class VolumeRecord:
    subject_id: str
    scan_id: str
    label: str
    voxels: np.ndarray  # (sagittal, coronal, axial)
    source_path: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be 3-D, got shape {self.voxels.shape}")
        if min(self.voxels.shape) < MIN_EXTENT:
            raise ValueError(f"every extent must be >= {MIN_EXTENT}, got {self.voxels.shape}")


def volume_from_array(voxels, subject_id, scan_id, label, axis_order=AXIS_ORDER, source_path="") -> VolumeRecord:
    """Reorder an array whose axes are named by ``axis_order`` into (sagittal, coronal, axial).

    This is the hook for real scans: load the image with a medical-imaging
    reader (e.g. nibabel for NIfTI), read the axis codes from its affine, and
    pass the array and codes here.
    """
    axis_order = tuple(axis_order)
    if sorted(axis_order) != sorted(AXIS_ORDER):
        raise ValueError(f"axis_order must be a permutation of {AXIS_ORDER}, got {axis_order}")
    perm = [axis_order.index(a) for a in AXIS_ORDER]
    arr = np.ascontiguousarray(np.transpose(np.asarray(voxels, dtype=np.float32), perm))
    return VolumeRecord(subject_id, scan_id, label, arr, source_path)


def write_volume(path, record: VolumeRecord) -> None:
    vox = np.ascontiguousarray(record.voxels, dtype="<f4")
    header = [
        VOLUME_MAGIC,
        f"subject_id={record.subject_id}",
        f"scan_id={record.scan_id}",
        f"label={record.label}",
        "extents=" + ",".join(str(n) for n in vox.shape),
        "axis_order=" + ",".join(AXIS_ORDER),
        "dtype=float32",
    ]
    Path(path).write_bytes(("\n".join(header) + "\n\n").encode("utf-8") + vox.tobytes())


def read_volume(path) -> VolumeRecord:
    raw = Path(path).read_bytes()
    head, sep, blob = raw.partition(b"\n\n")
    if not sep:
        raise VolumeFormatError(f"{path}: missing header terminator")
    lines = head.decode("utf-8").split("\n")
    if lines[0] != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: not a botkit volume (first line {lines[0]!r})")
    meta = dict(line.split("=", 1) for line in lines[1:] if line)
    try:
        extents = tuple(int(n) for n in meta["extents"].split(","))
        order = tuple(meta["axis_order"].split(","))
        dtype = {"float32": "<f4", "float64": "<f8"}[meta["dtype"]]
    except KeyError as exc:
        raise VolumeFormatError(f"{path}: header field {exc} missing or invalid") from None
    expected = int(np.prod(extents)) * np.dtype(dtype).itemsize
    if len(blob) != expected:
        raise VolumeFormatError(f"{path}: voxel blob has {len(blob)} bytes, header implies {expected}")
    vox = np.frombuffer(blob, dtype=dtype).reshape(extents)
    return volume_from_array(vox, meta["subject_id"], meta["scan_id"], meta["label"], order, str(path))


@dataclass(frozen=True)
class ManifestRow:
    subject_id: str
    scan_id: str
    label: str
    path: str


def write_manifest(path, rows) -> None:
    seen = set()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in rows:
            key = (r.subject_id, r.scan_id)
            if key in seen:
                raise ValueError(f"duplicate (subject_id, scan_id) {key}")
            seen.add(key)
            writer.writerow([r.subject_id, r.scan_id, r.label, r.path])


def read_manifest(path) -> list[ManifestRow]:
    """Rows of a manifest CSV; relative volume paths resolve against the manifest's directory."""
    path = Path(path)
    rows, seen = [], set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        for rec in reader:
            if rec["label"] not in LABELS:
                raise ValueError(f"{path}: unknown label {rec['label']!r} for scan {rec['scan_id']}")
            key = (rec["subject_id"], rec["scan_id"])
            if key in seen:
                raise ValueError(f"{path}: duplicate (subject_id, scan_id) {key}")
            seen.add(key)
            vol = Path(rec["path"])
            if not vol.is_absolute():
                vol = path.parent / vol
            rows.append(ManifestRow(rec["subject_id"], rec["scan_id"], rec["label"], str(vol)))
    return rows
