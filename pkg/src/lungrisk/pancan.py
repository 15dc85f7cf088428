"""Logistic nodule-malignancy model over 9 clinical/image features.

The published coefficient values are not part of this package; weights are
loaded from a versioned key-value text file. A clearly-labeled placeholder
set (synthetic, for tests and demos only) ships in ``data/``.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, NoNoduleError

NODULE_TYPES = ("nonsolid", "part_solid", "solid")

WEIGHT_KEYS = (
    "age",
    "sex_male",
    "family_history",
    "emphysema",
    "nodule_count",
    "diameter_mm",
    "type_part_solid",
    "type_nonsolid",
    "upper_lobe",
    "spiculation",
)

_SCORE_LO = 1e-300
_SCORE_HI = 1.0 - 1e-15


@dataclass(frozen=True)
class PanCanFeatures:
    """Per-nodule inputs: three patient, one clinical, one scan, four nodule features."""

    age: float
    sex: str                 # "male" | "female"
    family_history: bool
    emphysema: bool
    nodule_count: int
    diameter_mm: float
    nodule_type: str         # "nonsolid" | "part_solid" | "solid"
    upper_lobe: bool
    spiculation: bool

    def __post_init__(self):
        if self.sex not in ("male", "female"):
            raise FormatError(f"sex must be 'male' or 'female', got {self.sex!r}")
        if self.nodule_type not in NODULE_TYPES:
            raise FormatError(f"nodule_type must be one of {NODULE_TYPES}, got {self.nodule_type!r}")
        if not self.diameter_mm > 0:
            raise FormatError(f"diameter_mm must be positive, got {self.diameter_mm}")
        if not self.nodule_count >= 1:
            raise FormatError(f"nodule_count must be >= 1, got {self.nodule_count}")


@dataclass(frozen=True)
class PanCanWeights:
    """One weight per model input, solid nodules as the type reference level.

    `intercept` is an optional additive constant (0 when the weight file
    omits it).
    """

    values: dict
    intercept: float = 0.0

    def __post_init__(self):
        missing = [k for k in WEIGHT_KEYS if k not in self.values]
        if missing:
            raise ConfigError(f"weight set lacks keys {missing}")
        extra = [k for k in self.values if k not in WEIGHT_KEYS]
        if extra:
            raise ConfigError(f"weight set has unknown keys {extra}")

    def __getitem__(self, key: str) -> float:
        return self.values[key]


def nodule_score(f: PanCanFeatures, w: PanCanWeights) -> float:
    """Sigmoid of the weighted feature sum, strictly inside (0,1)."""
    z = (
        w.intercept
        + w["age"] * f.age
        + w["sex_male"] * (f.sex == "male")
        + w["family_history"] * f.family_history
        + w["emphysema"] * f.emphysema
        + w["nodule_count"] * f.nodule_count
        + w["diameter_mm"] * f.diameter_mm
        + w["type_part_solid"] * (f.nodule_type == "part_solid")
        + w["type_nonsolid"] * (f.nodule_type == "nonsolid")
        + w["upper_lobe"] * f.upper_lobe
        + w["spiculation"] * f.spiculation
    )
    if z >= 0:
        p = 1.0 / (1.0 + np.exp(-z))
    else:
        e = np.exp(z)
        p = e / (1.0 + e)
    return float(min(max(p, _SCORE_LO), _SCORE_HI))


def patient_score(nodules: list[PanCanFeatures], w: PanCanWeights, agg: str = "max") -> float:
    """Scan-level score: max of the per-nodule scores (mean behind a flag)."""
    if not nodules:
        raise NoNoduleError("patient_score needs at least one nodule")
    scores = [nodule_score(f, w) for f in nodules]
    if agg == "max":
        return max(scores)
    if agg == "mean":
        return float(np.mean(scores))
    raise ConfigError(f"agg must be 'max' or 'mean', got {agg!r}")


# ---------------------------------------------------------------------------
# weight file format: `# comment` lines, a `version=` key, then key=value


WEIGHT_FILE_VERSION = 1


def load_weights(path) -> PanCanWeights:
    values = {}
    version = None
    intercept = 0.0
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        try:
            num = float(value.strip())
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric value for {key!r}") from None
        if key == "version":
            version = int(num)
        elif key == "intercept":
            intercept = num
        else:
            values[key] = num
    if version is None:
        raise FormatError(f"{path}: weight file must declare a version")
    if version != WEIGHT_FILE_VERSION:
        raise FormatError(f"{path}: unsupported weight file version {version}")
    return PanCanWeights(values=values, intercept=intercept)


def save_weights(w: PanCanWeights, path):
    lines = [f"version={WEIGHT_FILE_VERSION}", f"intercept={w.intercept!r}"]
    lines += [f"{k}={w.values[k]!r}" for k in WEIGHT_KEYS]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# per-nodule feature CSV (one row per nodule, grouped by scan_id)

FEATURE_COLUMNS = ["scan_id", "age", "sex", "family_history", "emphysema",
                   "nodule_count", "diameter_mm", "nodule_type", "upper_lobe",
                   "spiculation"]


def write_features_csv(path, rows: list[tuple[str, PanCanFeatures]]):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FEATURE_COLUMNS)
        for scan_id, f in rows:
            writer.writerow([scan_id, repr(f.age), f.sex, int(f.family_history),
                             int(f.emphysema), f.nodule_count, repr(f.diameter_mm),
                             f.nodule_type, int(f.upper_lobe), int(f.spiculation)])


def read_features_csv(path) -> dict[str, list[PanCanFeatures]]:
    import csv

    out: dict[str, list[PanCanFeatures]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(FEATURE_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise FormatError(f"feature file {path} lacks columns {sorted(missing)}")
        for row in reader:
            f = PanCanFeatures(
                age=float(row["age"]),
                sex=row["sex"],
                family_history=bool(int(row["family_history"])),
                emphysema=bool(int(row["emphysema"])),
                nodule_count=int(row["nodule_count"]),
                diameter_mm=float(row["diameter_mm"]),
                nodule_type=row["nodule_type"],
                upper_lobe=bool(int(row["upper_lobe"])),
                spiculation=bool(int(row["spiculation"])),
            )
            out.setdefault(row["scan_id"], []).append(f)
    return out


def placeholder_weights_path() -> Path:
    """Path of the shipped synthetic placeholder weight file."""
    return Path(importlib.resources.files("lungrisk").joinpath(
        "data/pancan_placeholder_weights.txt"))


def placeholder_weights() -> PanCanWeights:
    return load_weights(placeholder_weights_path())
