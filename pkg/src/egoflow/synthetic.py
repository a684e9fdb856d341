"""Synthetic motion classes and textured frame pairs with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .flow_grid import GRID_COLS, GRID_ROWS, Frame
from .volume_builder import BLOCK_LEN, BLOCK_STRIDE, DEPTH, FlowVolume

KINDS = ("translate", "rotate_z", "radial_zoom", "vertical_bob", "static_noise", "mixed_window")
BOB_HALF_PERIOD = 7
CENTER = (GRID_COLS - 1) / 2.0  # 15.5, the grid centre in cell units
WINDOW_HALF_WIDTH = 8.0


@dataclass(frozen=True)
class MotionClassSpec:
    """One synthetic activity.

    ``amplitude`` is a flow magnitude in pixels/frame.  For rotate_z and
    radial_zoom it is the magnitude at a radius of 15.5 cells (the grid
    half-width), so the angular / zoom rate is ``amplitude / 15.5``.
    ``direction`` only matters for translate.
    """

    name: str
    kind: str
    amplitude: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0
    direction: tuple[float, float] = (1.0, 0.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown motion kind {self.kind!r}; expected one of {KINDS}")
        if self.amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("amplitude and noise_sigma must be non-negative")


def _cell_coords():
    y, x = np.mgrid[0:GRID_ROWS, 0:GRID_COLS].astype(np.float64)
    return x, y


def clean_flow(spec: MotionClassSpec, frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free (u, v) for absolute frame index ``frame``; arrays are [row, col]."""
    x, y = _cell_coords()
    a = spec.amplitude
    zero = np.zeros_like(x)
    if spec.kind == "translate":
        dx, dy = spec.direction
        return zero + a * dx, zero + a * dy
    if spec.kind == "rotate_z":
        w = a / CENTER
        return -w * (y - CENTER), w * (x - CENTER)
    if spec.kind == "radial_zoom":
        s = a / CENTER
        return s * (x - CENTER), s * (y - CENTER)
    if spec.kind == "vertical_bob":
        sign = 1.0 if (frame // BOB_HALF_PERIOD) % 2 == 0 else -1.0
        return zero, zero + sign * a
    if spec.kind == "static_noise":
        return zero, zero
    # mixed_window: still interior (inside the car), forward motion at the borders
    rx, ry = x - CENTER, y - CENTER
    border = np.maximum(np.abs(rx), np.abs(ry)) > WINDOW_HALF_WIDTH
    r = np.hypot(rx, ry)
    return np.where(border, a * rx / r, 0.0), np.where(border, a * ry / r, 0.0)


def generate_volume(spec: MotionClassSpec, t: int, label: int | None = None) -> FlowVolume:
    """Block ``t`` of an endless sequence of class ``spec`` (starts at frame 30*t)."""
    start = t * BLOCK_STRIDE
    data = np.empty((GRID_ROWS, GRID_COLS, DEPTH))
    for tau in range(BLOCK_LEN):
        u, v = clean_flow(spec, start + tau)
        data[:, :, 2 * tau] = u
        data[:, :, 2 * tau + 1] = v
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, t])
        data += rng.normal(0.0, spec.noise_sigma, size=data.shape)
    return FlowVolume(data, start, label)


def default_classes(count: int = 6, noise_ratio: float = 0.2, seed: int = 0) -> list[MotionClassSpec]:
    """The six archetypes at a common 2 px/frame amplitude."""
    base = [
        ("translate", "translate", 2.0),
        ("rotate", "rotate_z", 2.0),
        ("zoom", "radial_zoom", 2.0),
        ("bob", "vertical_bob", 2.0),
        ("static", "static_noise", 1.0),
        ("car", "mixed_window", 2.0),
    ]
    if not 1 <= count <= len(base):
        raise ValueError(f"between 1 and {len(base)} classes are available")
    return [
        MotionClassSpec(name, kind, amp, noise_ratio * amp, seed * 1000 + k)
        for k, (name, kind, amp) in enumerate(base[:count])
    ]


@dataclass
class SyntheticCorpus(Sequence):
    """Lazily generated labelled corpus of block sequences.

    Sample ``i`` belongs to class ``i // per_class``; within a class, samples
    are cut into sequences of ``seq_len`` consecutive blocks so temporal
    aggregation has something to work on.  Items are raw (un-normalised)
    arrays of shape 32x32x120.
    """

    classes: list[MotionClassSpec]
    per_class: int
    seq_len: int = 20
    offset: int = 0
    labels: np.ndarray = field(init=False, repr=False)
    groups: np.ndarray = field(init=False, repr=False)
    start_frames: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.classes) * self.per_class
        idx = np.arange(n)
        within = idx % self.per_class
        self.labels = idx // self.per_class
        seq, pos = np.divmod(within, self.seq_len)
        seqs_per_class = -(-self.per_class // self.seq_len)
        self.groups = self.labels * seqs_per_class + seq
        # one spare block between sequences, so their start frames are not
        # contiguous and sequence boundaries survive a round trip to disk
        self._blocks = self.offset + seq * (self.seq_len + 1) + pos
        self.start_frames = self._blocks * BLOCK_STRIDE

    def _block(self, i: int) -> int:
        return int(self._blocks[i])

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        i = int(i)
        if not 0 <= i < len(self):
            raise IndexError(i)
        spec = self.classes[self.labels[i]]
        return generate_volume(spec, self._block(i)).data

    @property
    def label_names(self) -> list[str]:
        return [c.name for c in self.classes]


def smooth_texture(size: tuple[int, int], seed: int, sigma: float = 5.0) -> np.ndarray:
    """Periodic band-limited noise in [0, 1] (Gaussian low-pass in Fourier space)."""
    h, w = size
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    gain = np.exp(-2.0 * (np.pi * sigma) ** 2 * (fx**2 + fy**2))
    tex = np.fft.irfft2(np.fft.rfft2(noise) * gain, s=(h, w))
    tex -= tex.min()
    return tex / tex.max()


def generate_frame_pair(
    shift: tuple[int, int], texture_seed: int, size: tuple[int, int] = (512, 512)
) -> tuple[Frame, Frame]:
    """Textured frame and its cyclic shift by ``(dx, dy)`` pixels."""
    dx, dy = shift
    if abs(dx) > 8 or abs(dy) > 8:
        raise ValueError("shifts are limited to 8 pixels per axis")
    tex = smooth_texture(size, texture_seed)
    moved = np.roll(tex, (dy, dx), axis=(0, 1))
    return Frame.from_array(tex, 0.0), Frame.from_array(moved, 1.0 / 15.0)


def generate_frames(
    n_frames: int,
    shift: tuple[int, int],
    texture_seed: int,
    fps: float = 15.0,
    size: tuple[int, int] = (512, 512),
) -> list[Frame]:
    """A texture panning by ``shift`` pixels per frame, as 8-bit-quantised frames."""
    tex = smooth_texture(size, texture_seed)
    frames = []
    for k in range(n_frames):
        img = np.roll(tex, (k * shift[1], k * shift[0]), axis=(0, 1))
        img = np.round(img * 255.0) / 255.0
        frames.append(Frame.from_array(img, k / fps))
    return frames
