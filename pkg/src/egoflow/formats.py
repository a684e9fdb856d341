"""Binary file formats: PGM frame directories, EGFR frame streams, EGFL flow
files and EGVD volume datasets.  Every multi-byte value is little-endian."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInput, FormatError
from .flow_grid import GRID_COLS, GRID_ROWS, FlowField, Frame
from .volume_builder import DEPTH, FlowVolume, VolumeDataset

FRAMES_MAGIC = b"EGFR"
FLOW_MAGIC = b"EGFL"
VOLUME_MAGIC = b"EGVD"
FLOW_VERSION = 1
VOLUME_VERSION = 1

_FLOW_HEADER = struct.Struct("<4sIIII")
_VOLUME_HEADER = struct.Struct("<4sIIIII")
_VOLUME_RECORD = np.dtype(
    [("label", "<i4"), ("start_frame", "<u4"), ("data", "<f4", (GRID_ROWS, GRID_COLS, DEPTH))]
)


def _check_magic(found: bytes, expected: bytes, path) -> None:
    if found != expected:
        raise FormatError(f"{path}: bad magic {found!r}, expected {expected!r}")


# --------------------------------------------------------------------------- frames


def _pgm_tokens(buf: bytes, count: int, path):
    """First ``count`` header tokens of a binary PGM and the data offset."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # a single whitespace byte precedes the raster


def read_pgm(path, timestamp: float = 0.0) -> Frame:
    buf = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(buf, 4, path)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: bad magic {tokens[0]!r}, expected b'P5'")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header") from None
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    raster = buf[offset : offset + w * h]
    if len(raster) != w * h:
        raise FormatError(f"{path}: raster truncated ({len(raster)} of {w * h} bytes)")
    luma = np.frombuffer(raster, np.uint8).reshape(h, w) / float(maxval)
    return Frame(w, h, luma, timestamp)


def write_pgm(path, frame: Frame) -> None:
    raster = np.clip(np.round(frame.luma * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (frame.width, frame.height) + raster.tobytes())


def read_pgm_dir(directory, fps: float) -> list[Frame]:
    """Frames of a PGM directory in lexicographic file order, stamped k/fps."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory {directory} does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        raise EmptyInput(f"no .pgm files in {directory}")
    return [read_pgm(p, k / fps) for k, p in enumerate(files)]


def write_pgm_dir(directory, frames: Sequence[Frame]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(len(frames))))
    for k, fr in enumerate(frames):
        write_pgm(directory / f"frame_{k:0{width}d}.pgm", fr)


def read_frame_stream(path) -> tuple[list[Frame], float]:
    """EGFR stream -> (frames stamped k/fps, native fps)."""
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated header")
    magic, w, h, fps = struct.unpack_from("<4sIIf", buf)
    _check_magic(magic, FRAMES_MAGIC, path)
    if w == 0 or h == 0 or not fps > 0:
        raise FormatError(f"{path}: invalid header (width {w}, height {h}, fps {fps})")
    body = len(buf) - 16
    if body % (w * h):
        raise FormatError(f"{path}: {body} data bytes is not a whole number of {w}x{h} frames")
    n = body // (w * h)
    if n == 0:
        raise EmptyInput(f"{path}: stream holds no frames")
    raster = np.frombuffer(buf, np.uint8, offset=16).reshape(n, h, w)
    return [Frame(w, h, raster[k] / 255.0, k / fps) for k in range(n)], float(fps)


def write_frame_stream(path, frames: Sequence[Frame], fps: float) -> None:
    if not frames:
        raise EmptyInput("no frames to write")
    w, h = frames[0].width, frames[0].height
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIf", FRAMES_MAGIC, w, h, fps))
        for fr in frames:
            if (fr.width, fr.height) != (w, h):
                raise FormatError("all frames in a stream must share dimensions")
            fh.write(np.clip(np.round(fr.luma * 255.0), 0, 255).astype(np.uint8).tobytes())


def read_frames(path, fps: float | None = None) -> tuple[list[Frame], float]:
    """Frames from either a PGM directory (needs ``fps``, default 15) or an EGFR stream."""
    path = Path(path)
    if path.is_dir():
        rate = 15.0 if fps is None else fps
        return read_pgm_dir(path, rate), rate
    if not path.exists():
        raise FileNotFoundError(f"frame source {path} does not exist")
    frames, native = read_frame_stream(path)
    if fps is not None and fps != native:
        frames = [Frame(f.width, f.height, f.luma, k / fps) for k, f in enumerate(frames)]
        native = fps
    return frames, native


# --------------------------------------------------------------------------- flow


def save_flow(path, fields: Sequence[FlowField]) -> None:
    parts = [_FLOW_HEADER.pack(FLOW_MAGIC, FLOW_VERSION, GRID_ROWS, GRID_COLS, len(fields))]
    for f in fields:
        if f.u.shape != (GRID_ROWS, GRID_COLS):
            raise FormatError(f"flow fields must be {GRID_ROWS}x{GRID_COLS}, got {f.u.shape}")
        parts.append(struct.pack("<I", f.frame_index))
        parts.append(np.asarray(f.u, "<f4").tobytes())
        parts.append(np.asarray(f.v, "<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_flow(path) -> list[FlowField]:
    buf = Path(path).read_bytes()
    if len(buf) < _FLOW_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols, count = _FLOW_HEADER.unpack_from(buf)
    _check_magic(magic, FLOW_MAGIC, path)
    if version != FLOW_VERSION:
        raise FormatError(f"{path}: unsupported flow version {version}")
    if (rows, cols) != (GRID_ROWS, GRID_COLS):
        raise FormatError(f"{path}: grid {rows}x{cols}, expected {GRID_ROWS}x{GRID_COLS}")
    rec = np.dtype([("index", "<u4"), ("u", "<f4", (rows, cols)), ("v", "<f4", (rows, cols))])
    expected = _FLOW_HEADER.size + count * rec.itemsize
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {count} fields, found {len(buf)}")
    recs = np.frombuffer(buf, rec, count=count, offset=_FLOW_HEADER.size)
    ones = np.ones((rows, cols), dtype=bool)
    return [
        FlowField(r["u"].astype(np.float64), r["v"].astype(np.float64), ones.copy(), int(r["index"]))
        for r in recs
    ]


# --------------------------------------------------------------------------- volumes


def save_volumes(path, volumes: Iterable, labels=None, start_frames=None) -> int:
    """Write an EGVD file; returns the number of volumes written.

    ``volumes`` yields FlowVolume objects or bare arrays; ``labels`` and
    ``start_frames`` override whatever the items carry (None label -> -1).
    Records are streamed, so lazy sequences never need to fit in memory.
    """
    vols = list(volumes) if not isinstance(volumes, Sequence) else volumes
    n = len(vols)
    with open(path, "wb") as fh:
        fh.write(_VOLUME_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, n, GRID_ROWS, GRID_COLS, DEPTH))
        rec = np.zeros(1, _VOLUME_RECORD)
        for i in range(n):
            item = vols[i]
            data = item.data if isinstance(item, FlowVolume) else np.asarray(item)
            if data.shape != (GRID_ROWS, GRID_COLS, DEPTH):
                raise FormatError(f"volume {i} has shape {data.shape}")
            label = labels[i] if labels is not None else getattr(item, "label", None)
            start = start_frames[i] if start_frames is not None else getattr(item, "start_frame", 0)
            rec["label"] = -1 if label is None else int(label)
            rec["start_frame"] = int(start)
            rec["data"] = data
            fh.write(rec.tobytes())
    return n


def _volume_records(path, mmap: bool):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume file {path} does not exist")
    with open(path, "rb") as fh:
        head = fh.read(_VOLUME_HEADER.size)
    if len(head) < _VOLUME_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, count, rows, cols, depth = _VOLUME_HEADER.unpack(head)
    _check_magic(magic, VOLUME_MAGIC, path)
    if version != VOLUME_VERSION:
        raise FormatError(f"{path}: unsupported volume version {version}")
    if (rows, cols, depth) != (GRID_ROWS, GRID_COLS, DEPTH):
        raise FormatError(f"{path}: volumes are {rows}x{cols}x{depth}, expected {GRID_ROWS}x{GRID_COLS}x{DEPTH}")
    expected = _VOLUME_HEADER.size + count * _VOLUME_RECORD.itemsize
    size = path.stat().st_size
    if size != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {count} volumes, found {size}")
    if count == 0:
        return np.zeros(0, _VOLUME_RECORD)
    if mmap:
        return np.memmap(path, _VOLUME_RECORD, mode="r", offset=_VOLUME_HEADER.size, shape=(count,))
    return np.fromfile(path, _VOLUME_RECORD, count=count, offset=_VOLUME_HEADER.size)


def load_volumes(path) -> list[FlowVolume]:
    recs = _volume_records(path, mmap=False)
    return [
        FlowVolume(r["data"].astype(np.float64), int(r["start_frame"]), None if r["label"] < 0 else int(r["label"]))
        for r in recs
    ]


def load_dataset(path, label_names=None, mmap: bool = True) -> VolumeDataset:
    """EGVD file as a :class:`VolumeDataset` backed by a memory map.

    Volumes stay float32 on disk; they are widened batch by batch.  Sequence
    groups are inferred from the start frames.
    """
    recs = _volume_records(path, mmap)
    return VolumeDataset(
        recs["data"],
        np.asarray(recs["label"], dtype=np.int64),
        np.asarray(recs["start_frame"], dtype=np.int64),
        label_names=label_names,
    )
