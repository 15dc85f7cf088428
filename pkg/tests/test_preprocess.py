import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungrisk import preprocess as pp
from lungrisk.errors import ConfigError, DimensionError, FormatError, OutOfBoundsError


def make_volume(dims=(20, 20, 20), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), fill=None):
    if fill is None:
        vox = np.random.default_rng(0).normal(-800, 50, size=dims)
    else:
        vox = np.full(dims, float(fill))
    return pp.Volume(vox, spacing, origin)


# ---------------------------------------------------------------------------
# resample_isotropic


def test_resample_identity_for_isotropic_input():
    v = make_volume()
    out = pp.resample_isotropic(v)
    assert np.array_equal(out.voxels, v.voxels)
    assert out.spacing == (1.0, 1.0, 1.0)


def test_resample_constant_volume_doubles_dims():
    v = make_volume(dims=(5, 6, 7), spacing=(2.0, 2.0, 2.0), fill=100.0)
    out = pp.resample_isotropic(v)
    assert out.dims == (10, 12, 14)
    np.testing.assert_allclose(out.voxels, 100.0)


def test_resample_ramp_hits_midpoints():
    # values 0,10,20 along z at 2mm spacing -> 1mm samples include 5 and 15
    vox = np.zeros((1, 1, 3))
    vox[0, 0, :] = [0.0, 10.0, 20.0]
    v = pp.Volume(vox, (2.0, 2.0, 2.0), (0.0, 0.0, 0.0))
    out = pp.resample_isotropic(v)
    assert out.dims == (2, 2, 6)
    line = out.voxels[0, 0, :]
    np.testing.assert_allclose(line[:5], [0.0, 5.0, 10.0, 15.0, 20.0])


def test_resample_rejects_bad_spacing():
    with pytest.raises(FormatError):
        pp.Volume(np.zeros((2, 2, 2)), (0.0, 1.0, 1.0), (0.0, 0.0, 0.0))


def test_world_voxel_round_trip():
    v = make_volume(dims=(12, 10, 8), spacing=(0.7, 1.3, 2.5), origin=(-4.0, 3.0, 9.0))
    rng = np.random.default_rng(1)
    for _ in range(50):
        idx = rng.integers(0, v.dims, size=3)
        world = v.voxel_to_world(idx)
        back = v.world_to_voxel(world)
        assert np.all(np.abs(back - idx) < 0.5)


# ---------------------------------------------------------------------------
# extract_cube


def test_extract_interior_is_pure_copy():
    v = make_volume(dims=(64, 64, 64))
    block = pp.extract_cube(v, center=(32.0, 32.0, 32.0))
    assert block.shape == (32, 32, 32)
    np.testing.assert_array_equal(block, v.voxels[16:48, 16:48, 16:48])


def test_extract_corner_pads_with_air():
    v = make_volume(dims=(40, 40, 40), fill=100.0)
    block = pp.extract_cube(v, center=(0.0, 20.0, 20.0))
    # half of the x range is outside -> filled with -1000
    assert np.all(block[:16] == -1000.0)
    assert np.all(block[16:] == 100.0)


def test_extract_constant_interior():
    v = make_volume(dims=(64, 64, 64), fill=100.0)
    block = pp.extract_cube(v, center=(30.0, 30.0, 30.0))
    np.testing.assert_allclose(block, 100.0)


def test_extract_fully_outside_raises():
    v = make_volume(dims=(40, 40, 40))
    with pytest.raises(OutOfBoundsError):
        pp.extract_cube(v, center=(100.0, 20.0, 20.0))


def test_extract_requires_isotropic_grid():
    v = make_volume(spacing=(2.0, 1.0, 1.0))
    with pytest.raises(FormatError):
        pp.extract_cube(v, center=(5.0, 5.0, 5.0))


# ---------------------------------------------------------------------------
# crop28


def test_crop_infer_deterministic():
    cube = np.random.default_rng(2).normal(size=(32, 32, 32))
    a = pp.crop28(cube, "infer")
    b = pp.crop28(cube, "infer")
    assert np.array_equal(a, b)
    np.testing.assert_array_equal(a, cube[2:30, 2:30, 2:30])


def test_crop_train_seeded_reproducible():
    cube = np.random.default_rng(3).normal(size=(32, 32, 32))
    a = pp.crop28(cube, "train", np.random.default_rng(7))
    b = pp.crop28(cube, "train", np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_crop_infer_excludes_corner_marker():
    cube = np.zeros((32, 32, 32))
    cube[0, 0, 0] = 12345.0
    out = pp.crop28(cube, "infer")
    assert not np.any(out == 12345.0)


def test_crop_wrong_shape():
    with pytest.raises(DimensionError):
        pp.crop28(np.zeros((28, 28, 28)), "infer")


def test_crop_train_offsets_cover_range():
    cube = np.arange(32 ** 3, dtype=float).reshape(32, 32, 32)
    rng = np.random.default_rng(0)
    offsets = set()
    for _ in range(200):
        out = pp.crop28(cube, "train", rng)
        # recover the offset from the first element
        flat = int(out[0, 0, 0])
        offsets.add((flat // (32 * 32), (flat // 32) % 32, flat % 32))
    xs = {o[0] for o in offsets}
    assert xs == {0, 1, 2, 3, 4}


# ---------------------------------------------------------------------------
# triplanar


def test_triplanar_constant_cube():
    out = pp.triplanar(np.full((28, 28, 28), 7.0))
    assert out.shape == (3, 28, 28)
    np.testing.assert_allclose(out, 7.0)


def test_triplanar_separable_ramp():
    # cube = f(x): sagittal (fixed x) is constant, other two show the ramp
    x = np.arange(28, dtype=float)
    cube = np.broadcast_to(x[:, None, None], (28, 28, 28)).copy()
    cor, sag, tra = pp.triplanar(cube)
    assert np.ptp(sag) == 0.0
    assert np.ptp(cor) > 0.0 and np.ptp(tra) > 0.0
    np.testing.assert_array_equal(cor[:, 0], x)


def test_triplanar_axis_transpose_permutes_channels():
    cube = np.random.default_rng(4).normal(size=(28, 28, 28))
    cor, sag, tra = pp.triplanar(cube)
    cor2, sag2, tra2 = pp.triplanar(np.ascontiguousarray(cube.transpose(2, 1, 0)))
    # swapping x and z: coronal transposes in place, sagittal <-> transverse
    np.testing.assert_array_equal(cor2, cor.T)
    np.testing.assert_array_equal(sag2, tra.T)
    np.testing.assert_array_equal(tra2, sag.T)


def test_triplanar_mip_flag():
    cube = np.zeros((28, 28, 28))
    cube[5, 6, 7] = 99.0
    cor, sag, tra = pp.triplanar(cube, projection="mip")
    assert cor[5, 7] == 99.0 and sag[6, 7] == 99.0 and tra[5, 6] == 99.0


# ---------------------------------------------------------------------------
# normalize_hu


@pytest.mark.parametrize("hu,expected", [(-1000.0, 0.0), (400.0, 1.0), (-300.0, 0.5), (2000.0, 1.0), (-5000.0, 0.0)])
def test_normalize_hu_values(hu, expected):
    np.testing.assert_allclose(pp.normalize_hu(np.array([hu]))[0], expected)


# ---------------------------------------------------------------------------
# select_top_nodules


def cand(radius, conf=0.5, center=(0.0, 0.0, 0.0)):
    return pp.NoduleCandidate(center=center, radius_mm=radius, confidence=conf)


def test_select_takes_ten_largest():
    cands = [cand(r) for r in [3, 7, 1, 9, 4, 8, 2, 6, 5, 10, 11, 12]]
    out = pp.select_top_nodules(cands)
    assert [c.radius_mm for c in out] == [12, 11, 10, 9, 8, 7, 6, 5, 4, 3]


def test_select_short_list_passes_through():
    cands = [cand(3), cand(1), cand(2)]
    out = pp.select_top_nodules(cands)
    assert [c.radius_mm for c in out] == [3, 2, 1]


def test_select_tie_breaks_by_confidence():
    a = cand(5.0, conf=0.9, center=(1, 1, 1))
    b = cand(5.0, conf=0.4, center=(0, 0, 0))
    assert pp.select_top_nodules([b, a]) == [a, b]


def test_select_radius_tie_and_confidence_tie_uses_position():
    a = cand(5.0, conf=0.5, center=(0, 0, 1))
    b = cand(5.0, conf=0.5, center=(0, 0, 2))
    assert pp.select_top_nodules([b, a]) == [a, b]


@given(st.lists(st.tuples(st.floats(0.5, 20), st.floats(0, 1)), min_size=0, max_size=25))
@settings(max_examples=50, deadline=None)
def test_select_properties(pairs):
    cands = [cand(r, conf=c, center=(i, 0, 0)) for i, (r, c) in enumerate(pairs)]
    out = pp.select_top_nodules(cands)
    assert len(out) == min(10, len(cands))
    radii = [c.radius_mm for c in out]
    assert radii == sorted(radii, reverse=True)
    assert all(c in cands for c in out)


# ---------------------------------------------------------------------------
# build_scan_example


def volume_with_nodule(center=(30.0, 30.0, 30.0), dims=(64, 64, 64)):
    vox = np.full(dims, -850.0)
    cx, cy, cz = (int(c) for c in center)
    vox[cx - 3:cx + 3, cy - 3:cy + 3, cz - 3:cz + 3] = 50.0
    return pp.Volume(vox, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))


def test_build_zero_candidates_all_masked():
    v = volume_with_nodule()
    ex = pp.build_scan_example(v, [], label=0, mode="train", rng=np.random.default_rng(0))
    assert len(ex.patches) == 10
    assert all(p.masked for p in ex.patches)
    assert ex.n_unmasked == 0


def test_build_single_candidate():
    v = volume_with_nodule()
    c = cand(4.0, conf=0.8, center=(30.0, 30.0, 30.0))
    ex = pp.build_scan_example(v, [c], label=1, mode="train", rng=np.random.default_rng(0))
    assert ex.n_unmasked == 1
    assert not ex.patches[0].masked and all(p.masked for p in ex.patches[1:])
    assert ex.patches[0].planes.shape == (3, 28, 28)
    assert ex.patches[0].planes.min() >= 0.0 and ex.patches[0].planes.max() <= 1.0
    assert ex.cubes is not None and len(ex.cubes) == 1


def test_build_infer_deterministic_and_needs_stats():
    v = volume_with_nodule()
    c = cand(4.0, center=(30.0, 30.0, 30.0))
    stats = pp.MetadataStats(mean=np.zeros(5), std=np.ones(5))
    a = pp.build_scan_example(v, [c], 1, "infer", metadata_stats=stats)
    b = pp.build_scan_example(v, [c], 1, "infer", metadata_stats=stats)
    np.testing.assert_array_equal(a.patches[0].planes, b.patches[0].planes)
    np.testing.assert_array_equal(a.patches[0].metadata, b.patches[0].metadata)
    assert a.cubes is None
    with pytest.raises(ConfigError):
        pp.build_scan_example(v, [c], 1, "infer")


def test_build_train_seeded_determinism():
    v = volume_with_nodule()
    c = cand(4.0, center=(30.0, 30.0, 30.0))
    a = pp.build_scan_example(v, [c], 1, "train", rng=np.random.default_rng(5))
    b = pp.build_scan_example(v, [c], 1, "train", rng=np.random.default_rng(5))
    np.testing.assert_array_equal(a.patches[0].planes, b.patches[0].planes)


def test_build_output_shape_invariant_to_candidate_count():
    v = volume_with_nodule()
    for n in (0, 1, 3, 12):
        cands = [cand(4.0 + i, center=(30.0, 30.0, 30.0)) for i in range(n)]
        ex = pp.build_scan_example(v, cands, 0, "train", rng=np.random.default_rng(0))
        assert len(ex.patches) == 10
        assert all(p.planes.shape == (3, 28, 28) for p in ex.patches)


def test_metadata_standardization_round_trip():
    v = volume_with_nodule()
    cands = [cand(4.0, conf=0.2, center=(30.0, 30.0, 30.0)),
             cand(6.0, conf=0.9, center=(32.0, 30.0, 28.0))]
    ex = pp.build_scan_example(v, cands, 1, "train", rng=np.random.default_rng(0))
    stats = pp.metadata_stats_from_examples([ex])
    std = pp.standardize_example(ex, stats)
    rows = np.stack([p.metadata for p in std.patches if not p.masked])
    np.testing.assert_allclose(rows.mean(axis=0), 0.0, atol=1e-12)
    assert std.metadata_standardized
    with pytest.raises(ConfigError):
        pp.standardize_example(std, stats)


def test_metadata_dim6_requires_sphericity():
    v = volume_with_nodule()
    c = cand(4.0, center=(30.0, 30.0, 30.0))
    with pytest.raises(ConfigError):
        pp.build_scan_example(v, [c], 1, "train", rng=np.random.default_rng(0), metadata_dim=6)
