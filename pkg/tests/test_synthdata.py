import hashlib
from pathlib import Path

import numpy as np
import pytest

from lungrisk import evaluate as ev
from lungrisk import pancan, synthdata as sd
from lungrisk.errors import ConfigError
from lungrisk.fileio import read_candidates_csv, read_labels_csv, read_volume_compact


def dir_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(path.relative_to(root).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def test_spec_validation():
    with pytest.raises(ConfigError):
        sd.PhantomSpec(n_scans=10, prevalence=0.0)
    with pytest.raises(ConfigError):
        sd.PhantomSpec(n_scans=10, prevalence=0.2, size_range_mm=(4.0, 40.0))
    with pytest.raises(ConfigError):
        sd.PhantomSpec(n_scans=10, prevalence=0.2, volume_dims=(30, 96, 96))
    with pytest.raises(ConfigError):
        sd.PhantomSpec(n_scans=10, prevalence=0.2, nodules_per_scan=(0, 3))


def test_generation_deterministic_bytes(tmp_path):
    spec = sd.PhantomSpec(n_scans=6, prevalence=0.3, seed=42)
    sd.generate(spec, out_dir=tmp_path / "a")
    sd.generate(spec, out_dir=tmp_path / "b")
    assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")


def test_different_seed_changes_output(tmp_path):
    sd.generate(sd.PhantomSpec(n_scans=3, prevalence=0.3, seed=1), out_dir=tmp_path / "a")
    sd.generate(sd.PhantomSpec(n_scans=3, prevalence=0.3, seed=2), out_dir=tmp_path / "b")
    assert dir_digest(tmp_path / "a") != dir_digest(tmp_path / "b")


def test_positive_count_within_binomial_bounds():
    # 99% binomial interval for n=100, p=0.2 is [9, 32]
    ds = sd.generate(sd.PhantomSpec(n_scans=100, prevalence=0.2, seed=2024))
    positives = sum(s.label for s in ds.scans)
    assert 9 <= positives <= 32


def test_generative_risk_is_strong_oracle():
    ds = sd.generate(sd.PhantomSpec(n_scans=250, prevalence=0.2, seed=77))
    cohort = ev.ScoredCohort(
        scan_ids=[s.scan_id for s in ds.scans],
        scores=np.array([s.risk for s in ds.scans]),
        labels=np.array([s.label for s in ds.scans]),
    )
    assert ev.auc(cohort) >= 0.90


def test_label_is_or_of_nodule_malignancies():
    ds = sd.generate(sd.PhantomSpec(n_scans=60, prevalence=0.4, seed=5))
    for s in ds.scans:
        assert s.label == int(any(nd.malignant for nd in s.nodules))


def test_centers_respect_cube_margin():
    spec = sd.PhantomSpec(n_scans=40, prevalence=0.2, seed=6)
    ds = sd.generate(spec)
    dims = np.asarray(spec.volume_dims, dtype=float)
    for s in ds.scans:
        for nd in s.nodules:
            c = np.asarray(nd.center)
            assert np.all(c >= 16.0) and np.all(c <= dims - 16.0)


def test_written_files_are_consistent(tmp_path):
    spec = sd.PhantomSpec(n_scans=5, prevalence=0.3, seed=9)
    ds = sd.generate(spec, out_dir=tmp_path)
    labels = read_labels_csv(tmp_path / "labels.csv")
    assert labels == ds.labels
    cands = read_candidates_csv(tmp_path / "candidates.csv")
    assert set(cands) == {s.scan_id for s in ds.scans}
    for s in ds.scans:
        assert len(cands[s.scan_id]) == len(s.candidates)
        vol = read_volume_compact(tmp_path / "volumes" / f"{s.scan_id}.lrvol")
        assert vol.dims == spec.volume_dims
        assert vol.spacing == (1.0, 1.0, 1.0)
    truth = (tmp_path / "ground_truth.csv").read_text().splitlines()
    assert truth[0] == "scan_id,label,risk"
    assert len(truth) == 1 + len(ds.scans)


def test_upper_lobe_flag_matches_z_position():
    spec = sd.PhantomSpec(n_scans=50, prevalence=0.2, seed=10)
    ds = sd.generate(spec)
    lo, hi = 16.0, spec.volume_dims[2] - 16.0
    split = lo + 0.55 * (hi - lo)
    for s in ds.scans:
        for nd in s.nodules:
            assert nd.upper_lobe == (nd.center[2] >= split)


# ---------------------------------------------------------------------------
# pancan feature export


def test_export_row_count_matches_nodules(tmp_path):
    ds = sd.generate(sd.PhantomSpec(n_scans=12, prevalence=0.3, seed=11))
    path = tmp_path / "features.csv"
    rows = sd.export_pancan_features(ds, path)
    total = sum(len(s.nodules) for s in ds.scans)
    assert len(rows) == total
    back = pancan.read_features_csv(path)
    assert sum(len(v) for v in back.values()) == total


def test_export_nodule_count_equals_candidate_count(tmp_path):
    ds = sd.generate(sd.PhantomSpec(n_scans=10, prevalence=0.3, seed=12))
    path = tmp_path / "features.csv"
    sd.export_pancan_features(ds, path)
    back = pancan.read_features_csv(path)
    for s in ds.scans:
        for f in back[s.scan_id]:
            assert f.nodule_count == len(s.candidates)


def _crossing(line, start, threshold, direction):
    i = start
    while 0 < i < len(line) - 1:
        j = i + direction
        if line[j] < threshold:
            frac = (line[i] - threshold) / (line[i] - line[j])
            return abs(i - start) + frac
        i = j
    return abs(i - start)


def test_exported_diameter_matches_rendered_extent():
    # subvoxel threshold-crossing measurement of the in-slice long axis,
    # on spiculation-free nodules (spikes sit on top of the ellipsoid)
    ds = sd.generate(sd.PhantomSpec(n_scans=25, prevalence=0.2, seed=13), keep_volumes=True)
    measured = 0
    for s in ds.scans:
        vol = s.volume.voxels
        for nd in s.nodules:
            if nd.spiculation:
                continue
            cx, cy, cz = (int(round(c)) for c in nd.center)
            thr = (sd._CORE_HU[nd.nodule_type] + sd.BACKGROUND_HU) / 2.0
            line_x = vol[:, cy, cz]
            line_y = vol[cx, :, cz]
            ext_x = _crossing(line_x, cx, thr, +1) + _crossing(line_x, cx, thr, -1)
            ext_y = _crossing(line_y, cy, thr, +1) + _crossing(line_y, cy, thr, -1)
            assert abs(max(ext_x, ext_y) - nd.diameter_mm) <= 1.0
            measured += 1
    assert measured >= 10
