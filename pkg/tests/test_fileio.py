import numpy as np
import pytest

from lungrisk import fileio
from lungrisk.errors import DataConsistencyError, FormatError
from lungrisk.preprocess import NoduleCandidate, Volume


def sample_volume():
    rng = np.random.default_rng(0)
    vox = np.rint(rng.normal(-700, 150, size=(6, 5, 4)))
    return Volume(vox, (0.7, 0.7, 1.25), (-3.0, 4.0, 11.5))


def test_volume_pair_round_trip_short(tmp_path):
    v = sample_volume()
    header = tmp_path / "scan.mhd"
    fileio.write_volume_pair(v, header)
    back = fileio.read_volume_pair(header)
    np.testing.assert_array_equal(back.voxels, v.voxels)
    assert back.spacing == v.spacing
    assert back.origin == v.origin


def test_volume_pair_round_trip_double(tmp_path):
    v = Volume(np.random.default_rng(1).normal(size=(3, 3, 3)), (1, 1, 1), (0, 0, 0))
    header = tmp_path / "scan.mhd"
    fileio.write_volume_pair(v, header, element_type="MET_DOUBLE")
    back = fileio.read_volume_pair(header)
    np.testing.assert_array_equal(back.voxels, v.voxels)


def test_volume_pair_missing_key(tmp_path):
    header = tmp_path / "bad.mhd"
    header.write_text("NDims = 3\nDimSize = 2 2 2\n")
    with pytest.raises(FormatError):
        fileio.read_volume_pair(header)


def test_volume_pair_size_mismatch(tmp_path):
    v = sample_volume()
    header = tmp_path / "scan.mhd"
    raw = fileio.write_volume_pair(v, header)
    raw.write_bytes(raw.read_bytes()[:-2])
    with pytest.raises(FormatError):
        fileio.read_volume_pair(header)


def test_compact_round_trip(tmp_path):
    v = sample_volume()
    path = tmp_path / "scan.lrvol"
    fileio.write_volume_compact(v, path)
    back = fileio.read_volume_compact(path)
    np.testing.assert_array_equal(back.voxels, v.voxels)
    assert back.spacing == v.spacing
    assert back.origin == v.origin


def test_compact_bad_magic(tmp_path):
    v = sample_volume()
    path = tmp_path / "scan.lrvol"
    fileio.write_volume_compact(v, path)
    blob = bytearray(path.read_bytes())
    blob[0] = ord("X")
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        fileio.read_volume_compact(path)


def test_compact_truncated(tmp_path):
    v = sample_volume()
    path = tmp_path / "scan.lrvol"
    fileio.write_volume_compact(v, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError):
        fileio.read_volume_compact(path)


def test_candidates_csv_round_trip(tmp_path):
    rows = {
        "scan_b": [NoduleCandidate((1.5, -2.25, 3.0), 4.5, 0.75, sphericity=0.9, lungrads_category=3)],
        "scan_a": [NoduleCandidate((0.0, 1.0, 2.0), 2.0, 0.5, sphericity=0.8, lungrads_category=2),
                   NoduleCandidate((5.0, 6.0, 7.0), 8.0, 0.9, sphericity=0.7, lungrads_category=4)],
    }
    path = tmp_path / "candidates.csv"
    fileio.write_candidates_csv(path, rows, with_sphericity=True, with_lungrads=True)
    back = fileio.read_candidates_csv(path)
    assert back == rows


def test_candidates_csv_optional_columns_absent(tmp_path):
    rows = {"s": [NoduleCandidate((1.0, 2.0, 3.0), 4.0, 0.5)]}
    path = tmp_path / "candidates.csv"
    fileio.write_candidates_csv(path, rows)
    back = fileio.read_candidates_csv(path)
    assert back["s"][0].sphericity is None
    assert back["s"][0].lungrads_category is None


def test_candidates_csv_missing_column(tmp_path):
    path = tmp_path / "candidates.csv"
    path.write_text("scan_id,x_mm,y_mm,z_mm,radius_mm\ns,0,0,0,1\n")
    with pytest.raises(FormatError):
        fileio.read_candidates_csv(path)


def test_labels_csv_round_trip(tmp_path):
    labels = {"a": 1, "b": 0, "c": 1}
    path = tmp_path / "labels.csv"
    fileio.write_labels_csv(path, labels)
    assert fileio.read_labels_csv(path) == labels


def test_labels_csv_duplicate_rejected(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("scan_id,label\na,1\na,0\n")
    with pytest.raises(DataConsistencyError):
        fileio.read_labels_csv(path)


def test_labels_csv_bad_value(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("scan_id,label\na,2\n")
    with pytest.raises(FormatError):
        fileio.read_labels_csv(path)


def test_scores_csv_round_trip(tmp_path):
    scores = {"a": 0.123456789012345, "b": 1.0 / 3.0}
    path = tmp_path / "scores.csv"
    fileio.write_scores_csv(path, scores)
    back = fileio.read_scores_csv(path)
    assert back == scores  # repr round-trips float64 exactly
