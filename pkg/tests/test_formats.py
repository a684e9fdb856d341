from __future__ import annotations

import numpy as np
import numpy.testing as npt
import pytest

from egoflow import formats as fm
from egoflow.errors import EmptyInput, FormatError
from egoflow.flow_grid import FlowField, Frame
from egoflow.volume_builder import FlowVolume


def _f32(rng, shape):
    return rng.standard_normal(shape).astype(np.float32).astype(np.float64)


def _random_fields(rng, n):
    ones = np.ones((32, 32), bool)
    return [FlowField(_f32(rng, (32, 32)), _f32(rng, (32, 32)), ones, int(k)) for k in rng.integers(0, 2**31, n)]


def test_flow_roundtrip(tmp_path, rng):
    fields = _random_fields(rng, 5)
    path = tmp_path / "a.egfl"
    fm.save_flow(path, fields)
    assert path.stat().st_size == 20 + 5 * (4 + 2 * 4 * 1024)
    back = fm.load_flow(path)
    for a, b in zip(fields, back):
        assert a.frame_index == b.frame_index
        assert a.u.tobytes() == b.u.tobytes() and a.v.tobytes() == b.v.tobytes()
    fm.save_flow(tmp_path / "b.egfl", back)
    assert (tmp_path / "b.egfl").read_bytes() == path.read_bytes()


def test_flow_corruption(tmp_path, rng):
    path = tmp_path / "a.egfl"
    fm.save_flow(path, _random_fields(rng, 2))
    data = path.read_bytes()
    path.write_bytes(data[:-1])
    with pytest.raises(FormatError):
        fm.load_flow(path)
    path.write_bytes(b"EGVD" + data[4:])
    with pytest.raises(FormatError, match="magic"):
        fm.load_flow(path)


def test_volume_roundtrip_and_memmap(tmp_path, rng):
    vols = [FlowVolume(_f32(rng, (32, 32, 120)), 30 * k, k % 3) for k in range(4)]
    path = tmp_path / "v.egvd"
    assert fm.save_volumes(path, vols) == 4
    back = fm.load_volumes(path)
    for a, b in zip(vols, back):
        assert a.data.tobytes() == b.data.tobytes()
        assert (a.start_frame, a.label) == (b.start_frame, b.label)
    ds = fm.load_dataset(path, ["x", "y", "z"])
    assert ds.labels.tolist() == [0, 1, 2, 0]
    assert ds.groups.tolist() == [0, 0, 0, 0]
    npt.assert_array_equal(ds.batch([2]), vols[2].data[None])


def test_unlabelled_volumes(tmp_path, rng):
    path = tmp_path / "v.egvd"
    fm.save_volumes(path, [_f32(rng, (32, 32, 120))])
    assert fm.load_volumes(path)[0].label is None


def test_volume_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        fm.load_volumes(tmp_path / "missing.egvd")
    path = tmp_path / "v.egvd"
    fm.save_volumes(path, [np.zeros((32, 32, 120))])
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        fm.load_volumes(path)
    with pytest.raises(FormatError):
        fm.save_volumes(path, [np.zeros((32, 32, 60))])


def test_pgm_roundtrip(tmp_path, rng):
    luma = rng.integers(0, 256, (40, 36)) / 255.0
    frames = [Frame.from_array(luma, 0.0), Frame.from_array(1 - luma, 0.0)]
    fm.write_pgm_dir(tmp_path / "d", frames)
    back = fm.read_pgm_dir(tmp_path / "d", 15.0)
    npt.assert_array_equal(back[0].luma, luma)
    assert back[1].source_timestamp == pytest.approx(1 / 15)


def test_pgm_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    raster = bytes(range(256)) * 4
    path.write_bytes(b"P5\n# a comment\n32 32\n255\n" + raster)
    npt.assert_array_equal(fm.read_pgm(path).luma.ravel(), np.frombuffer(raster, np.uint8) / 255.0)
    path.write_bytes(b"P2\n32 32\n255\n0 255")
    with pytest.raises(FormatError):
        fm.read_pgm(path)


def test_empty_and_missing_dir(tmp_path):
    with pytest.raises(EmptyInput):
        fm.read_pgm_dir(tmp_path, 15.0)
    with pytest.raises(FileNotFoundError):
        fm.read_frames(tmp_path / "nope")


def test_frame_stream_roundtrip(tmp_path, rng):
    frames = [Frame.from_array(rng.integers(0, 256, (32, 48)) / 255.0, 0.0) for _ in range(3)]
    path = tmp_path / "s.egfr"
    fm.write_frame_stream(path, frames, 30.0)
    back, fps = fm.read_frames(path)
    assert fps == 30.0 and len(back) == 3
    npt.assert_array_equal(back[2].luma, frames[2].luma)
    assert back[2].source_timestamp == pytest.approx(2 / 30)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        fm.read_frame_stream(path)
