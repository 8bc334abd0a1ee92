import json
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image
from scipy import stats

from slicevolume.volume import (
    InvalidLabelError,
    LabelVolume,
    PatchTooLargeError,
    PayloadSizeError,
    PhaseVolume,
    Slice2D,
    VolumeError,
    VolumeFormatError,
    decode_argmax,
    labels_to_png,
    load_volume,
    one_hot_encode,
    phase_palette,
    sample_patches,
    save_volume,
    slice_axis,
    stack_slices,
)

dims3 = st.tuples(*[st.integers(1, 7)] * 3)


@st.composite
def label_volumes(draw, max_phases=5):
    n = draw(st.integers(2, max_phases))
    shape = draw(dims3)
    seed = draw(st.integers(0, 2**31))
    labels = np.random.default_rng(seed).integers(0, n, shape)
    return LabelVolume(labels, n)


@st.composite
def phase_volumes(draw):
    c = draw(st.integers(1, 4))
    shape = draw(dims3)
    seed = draw(st.integers(0, 2**31))
    x = np.random.default_rng(seed).random((c,) + shape).astype(np.float64) + 1e-3
    return PhaseVolume((x / x.sum(0)).astype(np.float32))


def test_one_hot_single_voxel():
    p = one_hot_encode(LabelVolume(np.zeros((1, 1, 1), int), 3))
    assert p.values[:, 0, 0, 0].tolist() == [1, 0, 0]


def test_one_hot_constant_volume():
    p = one_hot_encode(LabelVolume(np.full((2, 2, 2), 2), 3))
    assert p.dims == (2, 2, 2)
    assert np.all(p.values[2] == 1) and np.all(p.values[:2] == 0)


def test_invalid_label_names_voxel():
    labels = np.zeros((3, 3, 3), int)
    labels[1, 2, 0] = 3
    with pytest.raises(InvalidLabelError) as e:
        LabelVolume(labels, 3)
    assert e.value.index == (1, 2, 0)
    assert "(1, 2, 0)" in str(e.value)


def test_label_volume_invariants():
    with pytest.raises(VolumeError):
        LabelVolume(np.zeros((2, 2, 2), int), 1)
    with pytest.raises(VolumeError):
        LabelVolume(np.zeros((0, 2, 2), int), 2)
    with pytest.raises(VolumeError):
        LabelVolume(np.zeros((2, 2), int), 2)
    with pytest.raises(VolumeError):
        LabelVolume(np.zeros((2, 2, 2)), 2)  # float labels
    with pytest.raises(VolumeError):
        LabelVolume(np.zeros((2, 2, 2), int), 2, voxel_size_um=0.0)


def test_label_volume_is_immutable():
    v = LabelVolume(np.zeros((2, 2, 2), int), 2)
    with pytest.raises(ValueError):
        v.labels[0, 0, 0] = 1


def test_phase_volume_rejects_bad_sums():
    with pytest.raises(VolumeError):
        PhaseVolume(np.full((2, 2, 2, 2), 0.6, np.float32))
    with pytest.raises(VolumeError):
        PhaseVolume(np.stack([np.full((1, 1, 1), 1.5), np.full((1, 1, 1), -0.5)]))


def test_decode_argmax_examples():
    p = PhaseVolume(np.array([0.2, 0.5, 0.3], np.float32).reshape(3, 1, 1, 1))
    assert decode_argmax(p).labels[0, 0, 0] == 1
    p = PhaseVolume(np.array([0.5, 0.5, 0.0], np.float32).reshape(3, 1, 1, 1))
    assert decode_argmax(p).labels[0, 0, 0] == 0


def test_roundtrip_1000_voxels(rng):
    v = LabelVolume(rng.integers(0, 3, (10, 10, 10)), 3)
    assert decode_argmax(one_hot_encode(v)) == v


@given(label_volumes())
def test_one_hot_roundtrip_property(v):
    p = one_hot_encode(v)
    assert np.array_equal(p.values.sum(0), np.ones(v.dims, np.float32))
    assert decode_argmax(p) == v


def test_slice_counts():
    p = one_hot_encode(LabelVolume(np.zeros((64, 64, 64), int), 2))
    s = slice_axis(p, "z")
    assert len(s) == 64 and s[0].dims == (64, 64)
    p = one_hot_encode(LabelVolume(np.zeros((4, 6, 8), int), 2))
    s = slice_axis(p, "x")
    assert len(s) == 4 and s[0].dims == (6, 8)


def test_slice_content(rng):
    v = LabelVolume(rng.integers(0, 3, (4, 5, 6)), 3)
    p = one_hot_encode(v)
    for ax, name in enumerate("xyz"):
        for i, s in enumerate(slice_axis(p, name)):
            assert np.array_equal(s.values, np.take(p.values, i, axis=ax + 1))


@given(phase_volumes(), st.sampled_from(["x", "y", "z"]))
def test_stack_reconstructs_bit_exact(p, axis):
    q = stack_slices(slice_axis(p, axis), axis)
    assert q.values.tobytes() == p.values.tobytes()


def _img(rng, a, b, n=3):
    lab = rng.integers(0, n, (a, b))
    return Slice2D(np.moveaxis(np.eye(n, dtype=np.float32)[lab], -1, 0))


def test_full_size_patches_identical(rng):
    img = _img(rng, 64, 64)
    ps = sample_patches(img, 64, 3, rng)
    assert len(ps) == 3
    for p in ps:
        assert p.offset == (0, 0)
        assert np.array_equal(p.values, img.values)


def test_patch_sampling_deterministic(rng):
    img = _img(rng, 600, 600, 2)
    a = [p.offset for p in sample_patches(img, 64, 32, np.random.default_rng(7))]
    b = [p.offset for p in sample_patches(img, 64, 32, np.random.default_rng(7))]
    assert a == b


def test_patch_contained_and_matches_source(rng):
    img = _img(rng, 20, 30)
    for p in sample_patches(img, 7, 50, rng):
        r, c = p.offset
        assert 0 <= r <= 13 and 0 <= c <= 23
        assert np.array_equal(p.values, img.values[:, r : r + 7, c : c + 7])


def test_patch_too_large(rng):
    with pytest.raises(PatchTooLargeError):
        sample_patches(_img(rng, 10, 12), 11, 1, rng)


def test_offsets_uniform_chi_square():
    from slicevolume.volume import sample_offsets

    offs = sample_offsets((40, 50), 31, 100_000, np.random.default_rng(0))
    for k, n_pos in ((0, 10), (1, 20)):
        counts = np.bincount(offs[:, k], minlength=n_pos)
        assert len(counts) == n_pos
        assert stats.chisquare(counts).pvalue > 0.01
    joint = np.bincount(offs[:, 0] * 20 + offs[:, 1], minlength=200)
    assert stats.chisquare(joint).pvalue > 0.01


@given(label_volumes(max_phases=7), st.one_of(st.none(), st.floats(0.01, 10)))
def test_save_load_roundtrip(v, vs):
    v = LabelVolume(v.labels, v.n_phases, vs)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "v.raw"
        save_volume(v, path)
        assert load_volume(path) == v


def test_payload_is_x_fastest(tmp_path):
    labels = np.arange(24).reshape(2, 3, 4) % 5
    v = LabelVolume(labels, 5)
    save_volume(v, tmp_path / "v.raw")
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), np.uint8)
    H, W = 2, 3
    for x, y, z in np.ndindex(2, 3, 4):
        assert raw[x + H * (y + W * z)] == labels[x, y, z]
    meta = json.loads((tmp_path / "v.json").read_text())
    assert meta == {"dims": [2, 3, 4], "n_phases": 5, "voxel_size_um": None, "version": 1}


def test_truncated_payload(tmp_path):
    v = LabelVolume(np.zeros((4, 4, 4), int), 2)
    save_volume(v, tmp_path / "v.raw")
    (tmp_path / "v.raw").write_bytes(b"\0" * 63)
    with pytest.raises(PayloadSizeError):
        load_volume(tmp_path / "v.raw")


@pytest.mark.parametrize("patch", [
    {"n_phases": 0}, {"version": 2}, {"dims": [4, 4]}, {"dims": [4, 4, 0]},
])
def test_bad_header(tmp_path, patch):
    v = LabelVolume(np.zeros((4, 4, 4), int), 2)
    side = save_volume(v, tmp_path / "v.raw")
    meta = json.loads(side.read_text())
    meta.update(patch)
    side.write_text(json.dumps(meta))
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "v.raw")


def test_malformed_header(tmp_path):
    v = LabelVolume(np.zeros((2, 2, 2), int), 2)
    side = save_volume(v, tmp_path / "v.raw")
    side.write_text("{not json")
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "v.raw")


def test_palette_and_png(tmp_path):
    assert phase_palette(3).tolist() == [0, 128, 255]
    assert phase_palette(2).tolist() == [0, 255]
    assert phase_palette(5).tolist() == [0, 64, 128, 191, 255]
    lab = np.array([[0, 1], [2, 1]])
    labels_to_png(lab, 3, tmp_path / "s.png")
    img = np.asarray(Image.open(tmp_path / "s.png"))
    assert img.tolist() == [[0, 128], [255, 128]]
