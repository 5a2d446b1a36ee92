import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastconv import data, tensor
from fastconv.data import ClipSource, Motion, SyntheticSpec


def test_sample_indices_long_clip():
    assert data.sample_indices(240).tolist() == list(range(96, 144, 2))


def test_sample_indices_exact_window():
    assert data.sample_indices(48).tolist() == list(range(0, 48, 2))


def test_sample_indices_short_clip_wraps():
    assert data.sample_indices(10).tolist() == [i % 10 for i in range(0, 48, 2)]


def test_sample_indices_clamped_and_other_rates():
    # window 48 centred on frame 25 would start at 1; still fits
    assert data.sample_indices(50)[0] == 1
    idx = data.sample_indices(300, fps=30)  # window of 60 frames, 24 equally spaced
    assert len(idx) == 24 and idx[0] == 120 and idx[-1] < 180
    with pytest.raises(ValueError):
        data.sample_indices(0)


@settings(max_examples=15)
@given(st.integers(1, 80), st.integers(1, 3).map(lambda c: 1 if c == 2 else c), st.integers(2, 12))
def test_sample_clip_shape(t, c, size):
    frames = np.random.default_rng(t).uniform(0, 255, (t, c, size, size + 1)).astype(np.float32)
    clip = data.sample_clip(ClipSource(frames))
    assert clip.shape == (1, c, 24, 224, 224)


def test_resize_corners_exact():
    img = np.arange(12, dtype=np.float32).reshape(1, 3, 4)
    out = data.resize_bilinear(img, (5, 7))
    assert out[0, 0, 0] == 0 and out[0, 0, -1] == 3 and out[0, -1, 0] == 8 and out[0, -1, -1] == 11
    # a linear ramp stays linear
    assert np.allclose(out[0, 0], np.linspace(0, 3, 7))


def test_normalize():
    out = data.normalize(np.array([0, 128, 255], dtype=np.uint8))
    assert out.dtype == np.float32
    assert out[0] == 0.0 and out[2] == 1.0
    assert out[1] == pytest.approx(128 / 255)
    with pytest.raises(ValueError):
        data.normalize(out)
    with pytest.raises(ValueError):
        data.normalize(np.array([-1.0, 300.0]))


def test_pnm_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (3, 5, 7)).astype(np.uint8)
    data.write_pnm(tmp_path / "a.ppm", rgb)
    assert np.array_equal(data.read_pnm(tmp_path / "a.ppm"), rgb)
    gray = rgb[:1]
    data.write_pnm(tmp_path / "a.pgm", gray)
    assert np.array_equal(data.read_pnm(tmp_path / "a.pgm"), gray)
    (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        data.read_pnm(tmp_path / "bad.pgm")


def test_frame_dir_source(tmp_path):
    clip = np.random.default_rng(1).integers(0, 256, (1, 3, 6, 8, 8)).astype(np.float32)
    data.save_frames(clip, tmp_path, fps=12)
    src = ClipSource.from_dir(tmp_path)
    assert src.fps == 12 and src.frames.shape == (6, 3, 8, 8)
    assert np.array_equal(src.frames.transpose(1, 0, 2, 3)[None], clip)
    data.write_pnm(tmp_path / "frame_000099.ppm", np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        ClipSource.from_dir(tmp_path)
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(FileNotFoundError):
        ClipSource.from_dir(empty)


def test_extract_slice_shapes():
    clip = np.zeros((1, 3, 24, 224, 224), np.float32)
    assert data.extract_slice(clip, "yt", 112).shape == (24, 224)
    assert data.extract_slice(clip, "xt", 0).shape == (24, 224)
    with pytest.raises(IndexError):
        data.extract_slice(clip, "xt", 224)


def clean(**kw):
    return SyntheticSpec(classes=list(Motion), noise=0.0, **kw)


def test_static_frames_identical():
    clip, _ = data.gen_clip(clean(), "static", 3)
    assert all(np.array_equal(clip[:, :, 0], clip[:, :, t]) for t in range(clip.shape[2]))
    for plane, n in (("xt", 32), ("yt", 32)):
        for i in range(n):
            s = data.extract_slice(clip, plane, i)
            assert np.all(s == s[0])


@pytest.mark.parametrize("motion, axis, sign", [
    ("move_right", 4, 1), ("move_left", 4, -1), ("move_down", 3, 1), ("move_up", 3, -1)])
def test_moves_are_circular_shifts(motion, axis, sign):
    spec = clean(speed=3)
    clip, label = data.gen_clip(spec, motion, 11)
    assert label == spec.classes.index(Motion(motion))
    for t in range(clip.shape[2] - 1):
        shifted = np.roll(clip[:, :, t], sign * 3, axis=axis - 1)
        assert np.array_equal(clip[:, :, t + 1], shifted)


def _object_row_col(clip):
    energy = clip[0, 0, 0]
    rows, cols = np.nonzero(energy)
    return int(rows[0]), int(cols[0])


@pytest.mark.parametrize("speed", [1, 2, 3])
def test_move_right_xt_slope(speed):
    clip, _ = data.gen_clip(clean(speed=speed, frames=12, width=48), "move_right", speed)
    row, _ = _object_row_col(clip)
    slope = data.trajectory_slope(data.extract_slice(clip, "xt", row))
    assert abs(slope - speed) <= 0.5


def test_move_up_slices():
    clip, _ = data.gen_clip(clean(), "move_up", 5)
    row, col = _object_row_col(clip)
    assert abs(data.trajectory_slope(data.extract_slice(clip, "yt", col)) + 2) <= 0.5
    # the row through the object's first position sees it only while it passes: no horizontal drift
    xt = data.extract_slice(clip, "xt", row)
    visible = xt.max(axis=1) > 0
    assert np.ptp(data.argmax_trajectory(xt)[visible]) == 0


def test_generator_determinism_and_noise():
    spec = SyntheticSpec()
    a, _ = data.gen_clip(spec, "move_left", 42)
    b, _ = data.gen_clip(spec, "move_left", 42)
    c, _ = data.gen_clip(spec, "move_left", 43)
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()
    assert a.shape == (1, 3, 8, 32, 32) and a.dtype == np.float32
    with pytest.raises(ValueError):
        data.gen_clip(spec, "grow", 0)
    with pytest.raises(ValueError):
        SyntheticSpec(noise=-1)


def test_grow_and_blob_render():
    spec = clean(shape="blob", object_size=(4, 4))
    clip, _ = data.gen_clip(spec, "grow", 0)
    mass = clip[0, 0].sum(axis=(1, 2))
    assert np.all(np.diff(mass) > 0)


@given(st.integers(1, 5), st.integers(0, 1000))
@settings(max_examples=10)
def test_label_balance(per_class, seed):
    spec = SyntheticSpec(frames=2, height=8, width=8, object_size=(2, 2))
    x, y, seeds = data.gen_dataset(spec, per_class, seed)
    assert x.shape[0] == per_class * 4 == len(seeds)
    assert np.bincount(y, minlength=4).tolist() == [per_class] * 4


def test_split_disjoint_and_manifest(tmp_path):
    spec = SyntheticSpec(frames=2, height=8, width=8, object_size=(2, 2))
    ds = data.make_split(spec, 2, 2, 0)
    assert not any(np.array_equal(a, b) for a in ds.train_x for b in ds.val_x)
    manifest = data.write_dataset(spec, 2, 0, tmp_path)
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == json.loads(json.dumps(manifest))
    first = on_disk["clips"][0]
    assert set(first) == {"class", "seed", "path"}
    clip = tensor.load_t5b(tmp_path / first["path"])
    regen, _ = data.gen_clip(spec, first["class"], first["seed"])
    assert clip.tobytes() == regen.tobytes()
