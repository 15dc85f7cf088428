"""On-disk formats: volume files, candidate/label/score CSVs.

Two volume containers are supported:

* a MetaImage-style pair: a text header next to a raw little-endian voxel
  file (x varies fastest on disk, matching the usual .mhd/.raw layout);
* a compact single file with a fixed 72-byte binary header (magic
  ``LRVOL1``, dims as three int32, spacing and origin as float64 triples)
  followed by voxels as little-endian int16 Hounsfield units.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import DataConsistencyError, FormatError
from .preprocess import NoduleCandidate, Volume

_ELEMENT_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}

COMPACT_MAGIC = b"LRVOL1\x00\x00"
_COMPACT_HEADER = struct.Struct("<8s3i6d4x")  # 72 bytes


def write_volume_pair(v: Volume, header_path, element_type: str = "MET_SHORT"):
    """Write the text-header + raw-file pair; returns the raw path."""
    if element_type not in _ELEMENT_TYPES:
        raise FormatError(f"unsupported element type {element_type!r}")
    header_path = Path(header_path)
    raw_path = header_path.with_suffix(".raw")
    dtype = _ELEMENT_TYPES[element_type]
    vox = v.voxels
    if element_type == "MET_SHORT":
        vox = np.clip(np.rint(vox), -32768, 32767)
    # disk order: z slowest, x fastest
    vox.astype(dtype).transpose(2, 1, 0).tofile(raw_path)
    lines = [
        "NDims = 3",
        f"DimSize = {v.dims[0]} {v.dims[1]} {v.dims[2]}",
        f"ElementSpacing = {v.spacing[0]!r} {v.spacing[1]!r} {v.spacing[2]!r}",
        f"Offset = {v.origin[0]!r} {v.origin[1]!r} {v.origin[2]!r}",
        f"ElementType = {element_type}",
        f"ElementDataFile = {raw_path.name}",
    ]
    header_path.write_text("\n".join(lines) + "\n")
    return raw_path


def read_volume_pair(header_path) -> Volume:
    header_path = Path(header_path)
    fields = {}
    for line in header_path.read_text().splitlines():
        if "=" not in line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        if int(fields["NDims"]) != 3:
            raise FormatError(f"expected NDims = 3 in {header_path}")
        dims = tuple(int(x) for x in fields["DimSize"].split())
        spacing = tuple(float(x) for x in fields["ElementSpacing"].split())
        origin = tuple(float(x) for x in fields["Offset"].split())
        element_type = fields["ElementType"]
        data_file = fields["ElementDataFile"]
    except KeyError as missing:
        raise FormatError(f"volume header {header_path} lacks key {missing}") from None
    if element_type not in _ELEMENT_TYPES:
        raise FormatError(f"unsupported element type {element_type!r} in {header_path}")
    dtype = _ELEMENT_TYPES[element_type]
    raw = np.fromfile(header_path.parent / data_file, dtype=dtype)
    if raw.size != int(np.prod(dims)):
        raise FormatError(f"raw file size does not match DimSize in {header_path}")
    vox = raw.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0).astype(np.float64)
    return Volume(vox, spacing, origin)


def write_volume_compact(v: Volume, path):
    """Single-file container with int16 HU voxels."""
    path = Path(path)
    header = _COMPACT_HEADER.pack(COMPACT_MAGIC, *v.dims, *v.spacing, *v.origin)
    vox = np.clip(np.rint(v.voxels), -32768, 32767).astype("<i2")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vox.transpose(2, 1, 0).tobytes())


def read_volume_compact(path) -> Volume:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _COMPACT_HEADER.size:
        raise FormatError(f"{path} is too short to hold a volume header")
    magic, nx, ny, nz, sx, sy, sz, ox, oy, oz = _COMPACT_HEADER.unpack_from(blob)
    if magic != COMPACT_MAGIC:
        raise FormatError(f"{path} does not carry the LRVOL1 magic")
    expected = _COMPACT_HEADER.size + 2 * nx * ny * nz
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    vox = np.frombuffer(blob, dtype="<i2", offset=_COMPACT_HEADER.size)
    vox = vox.reshape(nz, ny, nx).transpose(2, 1, 0).astype(np.float64)
    return Volume(vox, (sx, sy, sz), (ox, oy, oz))


# ---------------------------------------------------------------------------
# CSV formats

CANDIDATE_BASE_COLUMNS = ["scan_id", "x_mm", "y_mm", "z_mm", "radius_mm", "confidence"]


def write_candidates_csv(path, rows: dict[str, list[NoduleCandidate]],
                         with_sphericity: bool = False, with_lungrads: bool = False):
    """Write per-scan candidate lists; optional columns appear when requested."""
    columns = list(CANDIDATE_BASE_COLUMNS)
    if with_sphericity:
        columns.append("sphericity")
    if with_lungrads:
        columns.append("lungrads")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for scan_id in sorted(rows):
            for c in rows[scan_id]:
                row = [scan_id, repr(c.center[0]), repr(c.center[1]), repr(c.center[2]),
                       repr(c.radius_mm), repr(c.confidence)]
                if with_sphericity:
                    row.append("" if c.sphericity is None else repr(c.sphericity))
                if with_lungrads:
                    row.append("" if c.lungrads_category is None else str(c.lungrads_category))
                writer.writerow(row)


def read_candidates_csv(path) -> dict[str, list[NoduleCandidate]]:
    out: dict[str, list[NoduleCandidate]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CANDIDATE_BASE_COLUMNS if c not in header]
        if missing:
            raise FormatError(f"candidate file {path} lacks columns {missing}")
        for row in reader:
            sph = row.get("sphericity") or None
            lr = row.get("lungrads") or None
            cand = NoduleCandidate(
                center=(float(row["x_mm"]), float(row["y_mm"]), float(row["z_mm"])),
                radius_mm=float(row["radius_mm"]),
                confidence=float(row["confidence"]),
                sphericity=None if sph is None else float(sph),
                lungrads_category=None if lr is None else int(lr),
            )
            out.setdefault(row["scan_id"], []).append(cand)
    return out


def write_labels_csv(path, labels: dict[str, int]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan_id", "label"])
        for scan_id in sorted(labels):
            writer.writerow([scan_id, int(labels[scan_id])])


def read_labels_csv(path) -> dict[str, int]:
    out: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"scan_id", "label"} - set(reader.fieldnames):
            raise FormatError(f"label file {path} must carry scan_id,label columns")
        for row in reader:
            value = int(row["label"])
            if value not in (0, 1):
                raise FormatError(f"label for {row['scan_id']!r} must be 0 or 1, got {value}")
            if row["scan_id"] in out:
                raise DataConsistencyError(f"duplicate scan_id {row['scan_id']!r} in {path}")
            out[row["scan_id"]] = value
    return out


def write_scores_csv(path, scores: dict[str, float]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan_id", "score"])
        for scan_id in sorted(scores):
            writer.writerow([scan_id, repr(float(scores[scan_id]))])


def read_scores_csv(path) -> dict[str, float]:
    out: dict[str, float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"scan_id", "score"} - set(reader.fieldnames):
            raise FormatError(f"score file {path} must carry scan_id,score columns")
        for row in reader:
            if row["scan_id"] in out:
                raise DataConsistencyError(f"duplicate scan_id {row['scan_id']!r} in {path}")
            out[row["scan_id"]] = float(row["score"])
    return out
