"""Blocks of flow fields -> 32x32x120 network input volumes.

Slice ``2*tau`` of a volume holds the horizontal flow of field ``t + tau``
and slice ``2*tau + 1`` the vertical flow.  Normalisation clamps each
component to its dataset-level 95th percentile of absolute values and
rescales into [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyInput, InsufficientFrames, InvalidWindow
from .flow_grid import FlowField

BLOCK_LEN = 60
BLOCK_STRIDE = 30
DEPTH = 2 * BLOCK_LEN
PERCENTILE = 95.0
ZERO_GUARD = 1e-6


@dataclass
class FlowVolume:
    data: np.ndarray
    start_frame: int = 0
    label: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] % 2:
            raise InvalidWindow(f"volume must be rows x cols x even-depth, got {self.data.shape}")

    @property
    def u(self) -> np.ndarray:
        return self.data[:, :, 0::2]

    @property
    def v(self) -> np.ndarray:
        return self.data[:, :, 1::2]


def _f32(x: float) -> float:
    return float(np.float32(x))


@dataclass(frozen=True)
class NormStats:
    """Clamp thresholds for each flow component.

    Values are kept at float32 precision because that is how they are
    persisted in model files; rounding here keeps in-memory and on-disk
    normalisation identical.
    """

    p95_u: float
    p95_v: float

    def __post_init__(self):
        if not (self.p95_u > 0 and self.p95_v > 0):
            raise ValueError("percentile thresholds must be positive")
        object.__setattr__(self, "p95_u", _f32(self.p95_u))
        object.__setattr__(self, "p95_v", _f32(self.p95_v))

    def to_dict(self) -> dict:
        return {"p95_u": self.p95_u, "p95_v": self.p95_v}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(float(d["p95_u"]), float(d["p95_v"]))


def segment_blocks(
    fields: Sequence[FlowField], block_len: int = BLOCK_LEN, stride: int = BLOCK_STRIDE
) -> list[tuple[int, list[FlowField]]]:
    """Windows of ``block_len`` fields starting every ``stride`` fields.

    A trailing remainder shorter than one block is dropped.
    """
    n = len(fields)
    if n < block_len:
        raise InsufficientFrames(f"need at least {block_len} flow fields, got {n}")
    out = []
    for start in range(0, n - block_len + 1, stride):
        window = list(fields[start : start + block_len])
        out.append((window[0].frame_index, window))
    return out


def stack_volume(window: Sequence[FlowField], start_frame: int | None = None) -> FlowVolume:
    if len(window) != BLOCK_LEN:
        raise InvalidWindow(f"a block holds exactly {BLOCK_LEN} fields, got {len(window)}")
    idx = [f.frame_index for f in window]
    if any(b - a != 1 for a, b in zip(idx, idx[1:])):
        raise InvalidWindow("block fields must have consecutive frame indices")
    rows, cols = window[0].u.shape
    data = np.empty((rows, cols, DEPTH))
    data[:, :, 0::2] = np.stack([f.u for f in window], axis=-1)
    data[:, :, 1::2] = np.stack([f.v for f in window], axis=-1)
    return FlowVolume(data, idx[0] if start_frame is None else start_frame)


def unstack_volume(volume: FlowVolume) -> list[FlowField]:
    """Index inverse of :func:`stack_volume`."""
    d = volume.data
    ones = np.ones(d.shape[:2], dtype=bool)
    return [
        FlowField(d[:, :, 2 * tau].copy(), d[:, :, 2 * tau + 1].copy(), ones, volume.start_frame + tau)
        for tau in range(d.shape[2] // 2)
    ]


def build_volumes(fields: Sequence[FlowField], label: int | None = None) -> list[FlowVolume]:
    vols = []
    for start, window in segment_blocks(fields):
        vol = stack_volume(window, start)
        vol.label = label
        vols.append(vol)
    return vols


def _as_array(vol) -> np.ndarray:
    return vol.data if isinstance(vol, FlowVolume) else np.asarray(vol)


def _nearest_rank(volumes, parity: int) -> float:
    """Exact nearest-rank 95th percentile of |values| in slices of one parity.

    Two streaming passes keep memory flat for large datasets: a histogram over
    the top bits of the IEEE-754 pattern (monotone for non-negative doubles)
    locates the bucket holding the target rank, then only that bucket's
    values are collected and sorted.
    """
    shift = 44
    hist = np.zeros(1 << (64 - shift), dtype=np.int64)
    total = 0
    for vol in volumes:
        a = np.abs(_as_array(vol)[..., parity::2], dtype=np.float64).ravel()
        hist += np.bincount(a.view(np.uint64) >> shift, minlength=hist.size)
        total += a.size
    if total == 0:
        raise EmptyInput("no flow values to take a percentile of")
    rank = max(1, math.ceil(PERCENTILE / 100.0 * total))
    cum = np.cumsum(hist)
    bucket = int(np.searchsorted(cum, rank, side="left"))
    below = int(cum[bucket - 1]) if bucket else 0
    chunks = []
    for vol in volumes:
        a = np.abs(_as_array(vol)[..., parity::2], dtype=np.float64).ravel()
        chunks.append(a[(a.view(np.uint64) >> shift) == bucket])
    vals = np.sort(np.concatenate(chunks))
    return float(vals[rank - below - 1])


def fit_norm_stats(volumes) -> NormStats:
    """95th percentile (nearest rank) of |u| and |v| pooled over ``volumes``.

    ``volumes`` may hold :class:`FlowVolume` objects or bare arrays and is
    traversed twice.
    """
    if isinstance(volumes, np.ndarray) and volumes.ndim == 3:
        volumes = [volumes]
    if not isinstance(volumes, (Sequence, np.ndarray)):
        volumes = list(volumes)
    if len(volumes) == 0:
        raise EmptyInput("cannot fit normalisation on an empty dataset")
    pu = _nearest_rank(volumes, 0)
    pv = _nearest_rank(volumes, 1)
    return NormStats(pu if pu > 0 else ZERO_GUARD, pv if pv > 0 else ZERO_GUARD)


def normalize_array(data: np.ndarray, stats: NormStats) -> np.ndarray:
    """Normalise raw volume data; the last axis is the interleaved depth."""
    out = np.array(data, dtype=np.float64)
    u = out[..., 0::2]
    v = out[..., 1::2]
    np.clip(u, -stats.p95_u, stats.p95_u, out=u)
    np.clip(v, -stats.p95_v, stats.p95_v, out=v)
    u /= stats.p95_u
    v /= stats.p95_v
    return out


def normalize_volume(volume: FlowVolume, stats: NormStats) -> FlowVolume:
    return FlowVolume(normalize_array(volume.data, stats), volume.start_frame, volume.label)


class NormalizedVolumes(Sequence):
    """Lazy view applying ``stats`` to each item of a raw volume sequence."""

    def __init__(self, source, stats: NormStats):
        self.source = source
        self.stats = stats

    def __len__(self):
        return len(self.source)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        return normalize_array(_as_array(self.source[i]), self.stats)


def infer_groups(start_frames) -> np.ndarray:
    """Sequence ids from block starts: a new sequence begins whenever a start
    frame is not exactly one block stride after its predecessor."""
    sf = np.asarray(start_frames, dtype=np.int64)
    if sf.size == 0:
        return np.zeros(0, dtype=np.int64)
    breaks = np.concatenate([[False], np.diff(sf) != BLOCK_STRIDE])
    return np.cumsum(breaks)


@dataclass
class VolumeDataset:
    """Labelled volumes plus the bookkeeping evaluation needs.

    ``volumes`` is anything indexable that yields 32x32x120 arrays (an array,
    a memory map, or a lazy generator).  ``norm_stats`` records the
    statistics the volumes were normalised with; None means raw flow.
    """

    volumes: Sequence
    labels: np.ndarray
    start_frames: np.ndarray | None = None
    groups: np.ndarray | None = None
    norm_stats: NormStats | None = None
    label_names: list[str] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.volumes):
            raise ValueError(f"{len(self.labels)} labels for {len(self.volumes)} volumes")
        if self.start_frames is None:
            self.start_frames = np.arange(len(self.labels), dtype=np.int64) * BLOCK_STRIDE
        self.start_frames = np.asarray(self.start_frames, dtype=np.int64)
        if self.groups is None:
            self.groups = infer_groups(self.start_frames)
        self.groups = np.asarray(self.groups, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def batch(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if isinstance(self.volumes, np.ndarray):
            return np.asarray(self.volumes[idx], dtype=np.float64)
        return np.stack([np.asarray(self.volumes[int(i)], dtype=np.float64) for i in idx])

    def subset(self, idx) -> "VolumeDataset":
        idx = np.asarray(idx, dtype=np.int64)
        if isinstance(self.volumes, np.ndarray):
            vols = self.volumes[idx]
        else:
            vols = _Subset(self.volumes, idx)
        return VolumeDataset(
            vols,
            self.labels[idx],
            self.start_frames[idx],
            self.groups[idx],
            self.norm_stats,
            self.label_names,
        )

    def normalized(self, stats: NormStats) -> "VolumeDataset":
        if self.norm_stats is not None:
            raise ValueError("dataset is already normalised")
        return VolumeDataset(
            NormalizedVolumes(self.volumes, stats),
            self.labels,
            self.start_frames,
            self.groups,
            stats,
            self.label_names,
        )

    def materialize(self, dtype=np.float32) -> "VolumeDataset":
        """Copy every volume into one in-memory array."""
        arr = np.empty((len(self),) + np.shape(self.volumes[0]), dtype=dtype)
        for i in range(len(self)):
            arr[i] = self.volumes[i]
        return VolumeDataset(
            arr, self.labels, self.start_frames, self.groups, self.norm_stats, self.label_names
        )


class _Subset(Sequence):
    def __init__(self, source, idx):
        self.source = source
        self.idx = idx

    def __len__(self):
        return len(self.idx)

    def __getitem__(self, i):
        return self.source[int(self.idx[i])]
