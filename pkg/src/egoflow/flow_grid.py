"""Per-cell sparse optical flow on a fixed 32x32 grid.

Frames are grayscale, resampled to 15 FPS by nearest-frame selection, and
each grid cell gets one translation vector estimated with single-level
iterative Lucas-Kanade.  Cells where the solver fails are filled in later by
temporal interpolation (:func:`interpolate_failures`).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, InvalidTimestamps

log = logging.getLogger(__name__)

GRID_ROWS = 32
GRID_COLS = 32
TARGET_FPS = 15.0


@dataclass
class Frame:
    width: int
    height: int
    luma: np.ndarray
    source_timestamp: float = 0.0

    def __post_init__(self):
        luma = np.asarray(self.luma, dtype=np.float64)
        if self.width <= 0 or self.height <= 0:
            raise DimensionMismatch(f"frame size must be positive, got {self.width}x{self.height}")
        if luma.size != self.width * self.height:
            raise DimensionMismatch(
                f"luma has {luma.size} values, expected {self.width}x{self.height}"
            )
        if self.width < GRID_COLS or self.height < GRID_ROWS:
            raise DimensionMismatch(
                f"frame {self.width}x{self.height} is smaller than the {GRID_COLS}x{GRID_ROWS} grid"
            )
        if self.source_timestamp < 0:
            raise InvalidTimestamps("timestamps must be non-negative")
        self.luma = luma.reshape(self.height, self.width)

    @classmethod
    def from_array(cls, luma, timestamp: float = 0.0) -> "Frame":
        luma = np.asarray(luma, dtype=np.float64)
        return cls(luma.shape[1], luma.shape[0], luma, timestamp)


@dataclass(frozen=True)
class GridGeometry:
    """Non-overlapping tiling of a frame into ``rows x cols`` cells.

    ``cell_bounds[i, j] = (left, top, width, height)`` for grid row ``i`` and
    column ``j``.  Leftover pixels go to the last row / column.
    """

    width: int
    height: int
    rows: int = GRID_ROWS
    cols: int = GRID_COLS
    cell_bounds: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.width < self.cols or self.height < self.rows:
            raise DimensionMismatch(
                f"frame {self.width}x{self.height} cannot hold a {self.cols}x{self.rows} grid"
            )
        cw, ch = self.width // self.cols, self.height // self.rows
        bounds = np.empty((self.rows, self.cols, 4), dtype=np.int64)
        for i in range(self.rows):
            top = i * ch
            h = ch if i < self.rows - 1 else self.height - top
            for j in range(self.cols):
                left = j * cw
                w = cw if j < self.cols - 1 else self.width - left
                bounds[i, j] = (left, top, w, h)
        bounds.setflags(write=False)
        object.__setattr__(self, "cell_bounds", bounds)

    @classmethod
    def for_frame(cls, frame: Frame) -> "GridGeometry":
        return cls(frame.width, frame.height)


@dataclass
class LkConfig:
    max_iterations: int = 20
    epsilon: float = 0.01
    # smallest structure-tensor eigenvalue, relative to the cell pixel count
    min_eigenvalue: float = 1e-6
    max_displacement: float = 8.0
    # coarse-to-fine initialisation: levels (1 = single level) and the
    # widening of each cell's window on coarse levels, in cells
    pyramid_levels: int = 2
    init_margin: float = 1.0


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    converged: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.converged = np.asarray(self.converged, dtype=bool)
        if not (self.u.shape == self.v.shape == self.converged.shape):
            raise DimensionMismatch("u, v and converged must share one grid shape")

    @classmethod
    def zeros(cls, frame_index: int = 0, shape=(GRID_ROWS, GRID_COLS)) -> "FlowField":
        return cls(np.zeros(shape), np.zeros(shape), np.ones(shape, bool), frame_index)


def resample_to_15fps(frames: Sequence[Frame], native_fps: float) -> list[Frame]:
    """Pick, for every instant ``k/15`` s, the input frame nearest in time.

    Ties go to the earlier frame.  Output frames are re-stamped with ``k/15``.
    """
    if not frames:
        raise EmptyInput("no frames to resample")
    if not native_fps > 0:
        raise ValueError(f"native_fps must be positive, got {native_fps}")
    ts = np.array([f.source_timestamp for f in frames], dtype=np.float64)
    if np.any(np.diff(ts) <= 0):
        raise InvalidTimestamps("frame timestamps must be strictly increasing")

    count = int(np.floor(ts[-1] * TARGET_FPS + 1e-9)) + 1
    out = []
    for k in range(count):
        target = k / TARGET_FPS
        hi = int(np.searchsorted(ts, target, side="left"))
        if hi == 0:
            idx = 0
        elif hi == len(ts):
            idx = len(ts) - 1
        else:
            # ties resolve to the earlier frame
            idx = hi - 1 if target - ts[hi - 1] <= ts[hi] - target else hi
        src = frames[idx]
        out.append(Frame(src.width, src.height, src.luma, target))
    return out


def _bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2)
    fx = xs - x0
    fy = ys - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x0 + 1] * fx
    bot = img[y0 + 1, x0] * (1 - fx) + img[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _solve_group(prev, nxt, gx, gy, bounds, cfg, p0=None):
    """Run LK for a batch of equally sized cells. ``bounds`` is (n, 4);
    ``p0`` is an optional (n, 2) starting translation."""
    n = len(bounds)
    w, h = int(bounds[0, 2]), int(bounds[0, 3])
    ys = bounds[:, 1, None, None] + np.arange(h)[None, :, None]
    xs = bounds[:, 0, None, None] + np.arange(w)[None, None, :]
    ys, xs = np.broadcast_arrays(ys, xs)
    xs = xs.astype(np.float64)
    ys = ys.astype(np.float64)

    tmpl = prev[ys.astype(np.intp), xs.astype(np.intp)]
    tx = gx[ys.astype(np.intp), xs.astype(np.intp)]
    ty = gy[ys.astype(np.intp), xs.astype(np.intp)]
    a = np.sum(tx * tx, axis=(1, 2))
    b = np.sum(tx * ty, axis=(1, 2))
    c = np.sum(ty * ty, axis=(1, 2))
    det = a * c - b * b
    # smaller eigenvalue of [[a, b], [b, c]]
    lam_min = 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)
    well = lam_min >= cfg.min_eigenvalue * (w * h)

    p = np.zeros((n, 2)) if p0 is None else np.array(p0, dtype=np.float64)
    active = well.copy()
    converged = np.zeros(n, dtype=bool)
    safe_det = np.where(well, det, 1.0)
    for _ in range(cfg.max_iterations):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        warped = _bilinear(nxt, xs[idx] + p[idx, 0, None, None], ys[idx] + p[idx, 1, None, None])
        err = warped - tmpl[idx]
        bx = np.sum(tx[idx] * err, axis=(1, 2))
        by = np.sum(ty[idx] * err, axis=(1, 2))
        dx = (c[idx] * bx - b[idx] * by) / safe_det[idx]
        dy = (a[idx] * by - b[idx] * bx) / safe_det[idx]
        p[idx, 0] -= dx
        p[idx, 1] -= dy
        done = np.hypot(dx, dy) < cfg.epsilon
        converged[idx[done]] = True
        active[idx[done]] = False

    bad = ~np.isfinite(p).all(axis=1)
    p[bad] = 0.0
    converged &= ~bad
    return p, converged


def lk_cell_flow(
    prev: Frame,
    next: Frame,
    geom: GridGeometry | None = None,
    cfg: LkConfig | None = None,
    frame_index: int = 0,
) -> FlowField:
    """Estimate one translation per grid cell from ``prev`` to ``next``.

    The returned ``(u, v)`` satisfies ``next(x + u, y + v) ~ prev(x, y)`` over
    the cell, found by Gauss-Newton iterations on the linearised brightness
    constancy residual.  ``converged`` is False for cells whose structure
    tensor is near singular or which exhausted ``cfg.max_iterations``.
    """
    cfg = cfg or LkConfig()
    if (prev.width, prev.height) != (next.width, next.height):
        raise DimensionMismatch(
            f"frame sizes differ: {prev.width}x{prev.height} vs {next.width}x{next.height}"
        )
    geom = geom or GridGeometry.for_frame(prev)
    if (geom.width, geom.height) != (prev.width, prev.height):
        raise DimensionMismatch("grid geometry does not match the frame size")

    u, v, conv = _cell_flow(prev.luma, next.luma, geom, cfg, cfg.pyramid_levels)
    shape = (geom.rows, geom.cols)
    return FlowField(u.reshape(shape), v.reshape(shape), conv.reshape(shape), frame_index)


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    return img[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _solve_cells(prev, nxt, bounds, cfg, init):
    """LK over arbitrary (n, 4) windows, batching windows of equal size."""
    gy, gx = np.gradient(prev)
    p = np.zeros((len(bounds), 2))
    ok = np.zeros(len(bounds), dtype=bool)
    sizes = bounds[:, 2:4]
    for size in np.unique(sizes, axis=0):
        members = np.flatnonzero((sizes == size).all(axis=1))
        p[members], ok[members] = _solve_group(prev, nxt, gx, gy, bounds[members], cfg, init[members])
    return p, ok


def _cell_flow(prev, nxt, geom: GridGeometry, cfg: LkConfig, levels: int):
    """Flat per-cell (u, v, converged).

    With ``levels > 1`` the fine solve starts from a coarse-to-fine estimate:
    on each downsampled level every cell's window is widened by
    ``cfg.init_margin`` cells on each side, which extends the capture range
    for displacements approaching the cell size.  The reported flow and
    convergence flags always come from the fine level on the exact cell.
    """
    cells = geom.cell_bounds.reshape(-1, 4)
    init = np.zeros((len(cells), 2))
    pyramid = [(prev, nxt)]
    while len(pyramid) < levels and min(pyramid[-1][0].shape) >= 2 * max(geom.rows, geom.cols):
        pyramid.append((_halve(pyramid[-1][0]), _halve(pyramid[-1][1])))
    for level in range(len(pyramid) - 1, 0, -1):
        cp, cn = pyramid[level]
        f = 2**level
        win = cells // f
        win[:, 2:] = np.maximum(cells[:, 2:] // f, 1)
        mx = int(np.ceil(cfg.init_margin * win[0, 2]))
        my = int(np.ceil(cfg.init_margin * win[0, 3]))
        left = np.maximum(win[:, 0] - mx, 0)
        top = np.maximum(win[:, 1] - my, 0)
        right = np.minimum(win[:, 0] + win[:, 2] + mx, cp.shape[1])
        bottom = np.minimum(win[:, 1] + win[:, 3] + my, cp.shape[0])
        win = np.column_stack([left, top, right - left, bottom - top])
        p, ok = _solve_cells(cp, cn, win, cfg, init / f)
        init[ok] = p[ok] * f
    p, ok = _solve_cells(prev, nxt, cells, cfg, init)
    return p[:, 0], p[:, 1], ok


def interpolate_failures(fields: Sequence[FlowField]) -> list[FlowField]:
    """Fill non-converged cells linearly in time from the same cell's
    converged neighbours; one-sided gaps copy the nearest value, and cells
    that never converge become (0, 0)."""
    if not fields:
        raise EmptyInput("no flow fields to interpolate")
    t = np.array([f.frame_index for f in fields], dtype=np.float64)
    u = np.stack([f.u for f in fields])
    v = np.stack([f.v for f in fields])
    ok = np.stack([f.converged for f in fields]) & np.isfinite(u) & np.isfinite(v)
    shape = u.shape[1:]
    u = u.reshape(len(fields), -1).copy()
    v = v.reshape(len(fields), -1).copy()
    ok = ok.reshape(len(fields), -1)

    for cell in np.flatnonzero(~ok.all(axis=0)):
        good = ok[:, cell]
        bad = ~good
        if not good.any():
            u[:, cell] = 0.0
            v[:, cell] = 0.0
            continue
        # np.interp clamps outside the known range, i.e. copies the one neighbour
        u[bad, cell] = np.interp(t[bad], t[good], u[good, cell])
        v[bad, cell] = np.interp(t[bad], t[good], v[good, cell])

    return [
        FlowField(u[k].reshape(shape), v[k].reshape(shape), np.ones(shape, bool), f.frame_index)
        for k, f in enumerate(fields)
    ]


def extract_flow(
    frames: Sequence[Frame],
    native_fps: float,
    cfg: LkConfig | None = None,
    threads: int = 1,
    progress_every: int = 1000,
) -> tuple[list[FlowField], float]:
    """Full ingestion path: resample, LK on every consecutive pair, fill gaps.

    Returns the interpolated fields and the raw non-convergence rate.
    """
    frames = resample_to_15fps(frames, native_fps)
    if len(frames) < 2:
        raise EmptyInput("need at least two frames after resampling")
    geom = GridGeometry.for_frame(frames[0])
    for f in frames:
        if (f.width, f.height) != (geom.width, geom.height):
            raise DimensionMismatch("all frames in a sequence must share one size")

    def solve(k):
        if progress_every and k and k % progress_every == 0:
            log.info("flow: %d / %d frame pairs", k, len(frames) - 1)
        return lk_cell_flow(frames[k], frames[k + 1], geom, cfg, frame_index=k)

    pairs = range(len(frames) - 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(solve, pairs))
    else:
        raw = [solve(k) for k in pairs]
    failed = sum(int((~f.converged).sum()) for f in raw)
    rate = failed / (len(raw) * raw[0].converged.size)
    return interpolate_failures(raw), rate
