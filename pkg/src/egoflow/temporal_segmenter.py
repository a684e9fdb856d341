"""Temporal context: sum softmax scores over eta neighbouring blocks, then
turn the per-block labels into a timeline of labelled intervals."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyInput, InvalidTimestamps, ShapeError
from .volume_builder import BLOCK_STRIDE

DEFAULT_ETA = 21
SUM_TOLERANCE = 1e-9


@dataclass
class ScoreSeries:
    """Per-block softmax vectors for one sequence, ordered in time."""

    start_frames: np.ndarray
    scores: np.ndarray  # (n_blocks, K)
    block_stride: int = BLOCK_STRIDE

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.start_frames = np.asarray(self.start_frames, dtype=np.int64)
        if self.scores.ndim != 2:
            raise ShapeError(f"scores must be (blocks, classes), got {self.scores.shape}")
        if len(self.start_frames) != len(self.scores):
            raise ShapeError("one start frame per score vector")
        if np.any(self.scores < 0) or np.any(np.abs(self.scores.sum(axis=1) - 1.0) > SUM_TOLERANCE):
            raise ValueError("every score vector must be a probability vector")
        if np.any(np.diff(self.start_frames) != self.block_stride):
            raise InvalidTimestamps(f"start frames must advance by exactly {self.block_stride}")

    @classmethod
    def from_scores(cls, scores, first_frame: int = 0) -> "ScoreSeries":
        scores = np.asarray(scores, dtype=np.float64)
        return cls(first_frame + BLOCK_STRIDE * np.arange(len(scores)), scores)

    def __len__(self):
        return len(self.scores)


def _scores(series) -> np.ndarray:
    s = series.scores if isinstance(series, ScoreSeries) else np.asarray(series, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"scores must be (blocks, classes), got {s.shape}")
    if len(s) == 0:
        raise EmptyInput("empty score series")
    return s


def aggregate_scores(series, eta: int = DEFAULT_ETA) -> np.ndarray:
    """Sum of score vectors over the centred window of ``eta`` blocks,
    truncated at the sequence ends."""
    if eta < 1 or eta % 2 == 0:
        raise ValueError(f"eta must be an odd positive integer, got {eta}")
    s = _scores(series)
    if eta == 1:
        return s.copy()
    half = eta // 2
    # zero padding stands in for the truncated window at either end
    padded = np.pad(s, ((half, half), (0, 0)))
    return sliding_window_view(padded, eta, axis=0).sum(axis=-1)


def aggregate_labels(series, eta: int = DEFAULT_ETA) -> np.ndarray:
    """Per-block class ids after temporal aggregation; ties go to the lowest id."""
    return np.argmax(aggregate_scores(series, eta), axis=1)


@dataclass(frozen=True)
class Segment:
    start_s: float
    end_s: float
    label: int
    score: float


@dataclass
class ActivityTimeline:
    segments: list[Segment] = field(default_factory=list)
    fps: float = 15.0

    def to_dict(self, label_names=None) -> dict:
        def name(k):
            return label_names[k] if label_names is not None else k

        return {
            "fps": self.fps,
            "segments": [
                {"start_s": s.start_s, "end_s": s.end_s, "label": name(s.label), "score": s.score}
                for s in self.segments
            ],
        }

    def to_json(self, label_names=None) -> str:
        return json.dumps(self.to_dict(label_names), indent=2) + "\n"

    def to_csv(self, label_names=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["start_s", "end_s", "label", "score"])
        for seg in self.to_dict(label_names)["segments"]:
            w.writerow([seg["start_s"], seg["end_s"], seg["label"], repr(seg["score"])])
        return buf.getvalue()


def labels_to_timeline(
    labels, fps: float = 15.0, block_stride: int = BLOCK_STRIDE, scores=None
) -> ActivityTimeline:
    """Run-length merge of per-block labels into contiguous segments.

    Blocks overlap by half, so each block is credited with the time up to
    the next block's start: block ``i`` owns ``[i*s, (i+1)*s)`` with
    ``s = block_stride / fps`` (2 s by default).  ``scores`` are optional
    aggregated score rows; a segment's score is the mean, over its blocks,
    of the winning class's share of the aggregated mass.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyInput("no labels to segment")
    step = block_stride / fps
    share = None
    if scores is not None:
        agg = np.asarray(scores, dtype=np.float64)
        share = agg[np.arange(len(labels)), labels] / agg.sum(axis=1)
    cuts = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [len(labels)]])
    segs = [
        Segment(
            float(a * step),
            float(b * step),
            int(labels[a]),
            float(share[a:b].mean()) if share is not None else 1.0,
        )
        for a, b in zip(starts, ends)
    ]
    return ActivityTimeline(segs, fps)


def segment_series(series, eta: int = DEFAULT_ETA, fps: float = 15.0) -> ActivityTimeline:
    agg = aggregate_scores(series, eta)
    labels = np.argmax(agg, axis=1)
    return labels_to_timeline(labels, fps, scores=agg)
