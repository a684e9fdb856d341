"""Evaluation metrics, split protocols, kernel affinity and kernel rendering."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import LabelError, SplitError
from .temporal_segmenter import DEFAULT_ETA, aggregate_labels
from .volume_builder import VolumeDataset

# --------------------------------------------------------------------------- metrics


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted

    @classmethod
    def from_predictions(cls, truth, pred, num_classes: int) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        for name, arr in (("true", truth), ("predicted", pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
                raise LabelError(f"{name} labels outside [0, {num_classes})")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (truth, pred), 1)
        return cls(counts)

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


@dataclass
class EvaluationReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    confusion: ConfusionMatrix
    label_names: list[str]
    eta: int

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, label_names=None, eta: int = DEFAULT_ETA):
        c = cm.counts.astype(np.float64)
        tp = np.diag(c)
        predicted = c.sum(axis=0)
        actual = c.sum(axis=1)
        precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
        recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
        f1 = np.array([f1_score(p, r) for p, r in zip(precision, recall)])
        k = len(tp)
        names = list(label_names) if label_names is not None else [str(i) for i in range(k)]
        return cls(precision, recall, f1, cm, names, eta)

    @property
    def present(self) -> np.ndarray:
        """Classes with at least one test sample."""
        return self.confusion.counts.sum(axis=1) > 0

    @property
    def macro_precision(self) -> float:
        return float(self.precision[self.present].mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall[self.present].mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1[self.present].mean())

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "accuracy": self.confusion.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": [
                {
                    "label": name,
                    "precision": float(p),
                    "recall": float(r),
                    "f1": float(f),
                    "support": int(n),
                }
                for name, p, r, f, n in zip(
                    self.label_names, self.precision, self.recall, self.f1, self.confusion.counts.sum(axis=1)
                )
            ],
            "confusion_matrix": self.confusion.counts.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def predict_scores(model, dataset: VolumeDataset, chunk: int = 64) -> np.ndarray:
    """Softmax rows for every volume of a normalised dataset."""
    from .ego_net import forward_batch

    n = len(dataset)
    out = np.empty((n, model.num_classes))
    for i in range(0, n, chunk):
        idx = np.arange(i, min(i + chunk, n))
        out[idx] = forward_batch(model, dataset.batch(idx), chunk)
    return out


def aggregate_by_group(scores, groups, start_frames, eta: int = DEFAULT_ETA) -> np.ndarray:
    """Per-sample labels, aggregating only within each source sequence."""
    scores = np.asarray(scores)
    groups = np.asarray(groups)
    start_frames = np.asarray(start_frames)
    labels = np.empty(len(scores), dtype=np.int64)
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        idx = idx[np.argsort(start_frames[idx], kind="stable")]
        labels[idx] = aggregate_labels(scores[idx], eta)
    return labels


def evaluate_scores(scores, dataset: VolumeDataset, eta: int = DEFAULT_ETA, label_names=None):
    pred = aggregate_by_group(scores, dataset.groups, dataset.start_frames, eta)
    k = np.shape(scores)[1]
    cm = ConfusionMatrix.from_predictions(dataset.labels, pred, k)
    return EvaluationReport.from_confusion(cm, label_names or dataset.label_names, eta)


def evaluate(model, dataset: VolumeDataset, eta: int = DEFAULT_ETA) -> EvaluationReport:
    """Forward every volume, aggregate within sequences, and score against truth."""
    if len(dataset) == 0:
        raise ValueError("empty test set")
    if dataset.labels.min() < 0 or dataset.labels.max() >= model.num_classes:
        raise LabelError(f"test labels must lie in [0, {model.num_classes})")
    return evaluate_scores(predict_scores(model, dataset), dataset, eta, model.labels)


# --------------------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "random_half"  # random_half | group_holdout
    seed: int = 0
    holdout_group: int | None = None

    def __post_init__(self):
        if self.mode not in ("random_half", "group_holdout"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.mode == "group_holdout" and self.holdout_group is None:
            raise ValueError("group_holdout needs holdout_group")


def split_indices(groups, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sample indices (train, test); no group ever lands on both sides.

    random_half shuffles the distinct groups with ``spec.seed`` and puts the
    first ceil(n/2) in training.
    """
    groups = np.asarray(groups)
    distinct = np.unique(groups)
    if len(distinct) < 2:
        raise SplitError(f"need at least 2 groups to split, found {len(distinct)}")
    if spec.mode == "group_holdout":
        if spec.holdout_group not in distinct:
            raise SplitError(f"group {spec.holdout_group} not present")
        test_groups = np.array([spec.holdout_group])
    else:
        perm = np.random.default_rng(spec.seed).permutation(distinct)
        test_groups = perm[math.ceil(len(distinct) / 2) :]
    test = np.isin(groups, test_groups)
    return np.flatnonzero(~test), np.flatnonzero(test)


def split(dataset: VolumeDataset, spec: SplitSpec) -> tuple[VolumeDataset, VolumeDataset]:
    train_idx, test_idx = split_indices(dataset.groups, spec)
    return dataset.subset(train_idx), dataset.subset(test_idx)


# --------------------------------------------------------------------------- kernel affinity


def top_kernels(responses: np.ndarray, depth: int) -> np.ndarray:
    """Indices of the ``depth`` largest responses per row; ties to the lowest id."""
    order = np.argsort(-responses, axis=1, kind="stable")
    return order[:, :depth]


def kernel_affinity(model, dataset: VolumeDataset, vote_depth: int = 3, chunk: int = 64) -> np.ndarray:
    """Votes (classes x C1 kernels): each sample's ``vote_depth`` most
    responsive kernels vote for the sample's true class."""
    from .ego_net import c1_responses

    k = model.num_classes
    n_kernels = model.params["c1_w"].shape[0]
    if not 1 <= vote_depth <= n_kernels:
        raise ValueError(f"vote depth must lie in [1, {n_kernels}]")
    votes = np.zeros((k, n_kernels), dtype=np.int64)
    for i in range(0, len(dataset), chunk):
        idx = np.arange(i, min(i + chunk, len(dataset)))
        labels = dataset.labels[idx]
        if labels.min() < 0 or labels.max() >= k:
            raise LabelError(f"affinity needs labels in [0, {k})")
        top = top_kernels(c1_responses(model, dataset.batch(idx), chunk), vote_depth)
        np.add.at(votes, (np.repeat(labels, vote_depth), top.ravel()), 1)
    return votes


def affinity_csv(votes: np.ndarray, label_names=None) -> str:
    buf = io.StringIO()
    names = label_names or [str(i) for i in range(len(votes))]
    buf.write("class," + ",".join(f"k{j}" for j in range(votes.shape[1])) + "\n")
    for name, row in zip(names, votes):
        buf.write(f"{name}," + ",".join(str(int(v)) for v in row) + "\n")
    return buf.getvalue()


# --------------------------------------------------------------------------- kernel rendering

CELL_PX = 24


@dataclass
class FlowImage:
    """One slice pair of a C1 kernel as a normalised vector field."""

    kernel_id: int
    pair: int
    u: np.ndarray  # [row, col], divided by the kernel's peak magnitude
    v: np.ndarray
    sparsity: int = 1

    @property
    def filename(self) -> str:
        return f"kernel_{self.kernel_id}_pair_{self.pair}.svg"

    def arrows(self):
        """(x0, y0, x1, y1) in pixels for each drawn grid point, row-major."""
        rows, cols = self.u.shape
        half = CELL_PX / 2
        scale = 0.9 * CELL_PX
        out = []
        for r in range(rows):
            for c in range(cols):
                if (r * cols + c) % self.sparsity:
                    continue
                x0, y0 = c * CELL_PX + half, r * CELL_PX + half
                out.append((x0, y0, x0 + scale * self.u[r, c], y0 + scale * self.v[r, c]))
        return out

    def to_svg(self) -> str:
        rows, cols = self.u.shape
        w, h = cols * CELL_PX, rows * CELL_PX
        lines = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
            "<defs>",
            '<marker id="head" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="4" markerHeight="4" orient="auto">',
            '<path d="M0,0 L10,5 L0,10 z" fill="black"/>',
            "</marker>",
            "</defs>",
            f'<rect width="{w}" height="{h}" fill="white"/>',
            f"<!-- kernel {self.kernel_id} slices {2 * self.pair} (u) and {2 * self.pair + 1} (v) -->",
        ]
        for x0, y0, x1, y1 in self.arrows():
            if math.hypot(x1 - x0, y1 - y0) < 0.5:
                lines.append(f'<circle cx="{x0:.3f}" cy="{y0:.3f}" r="1.500" fill="black"/>')
            else:
                lines.append(
                    f'<line x1="{x0:.3f}" y1="{y0:.3f}" x2="{x1:.3f}" y2="{y1:.3f}" '
                    'stroke="black" stroke-width="1.2" marker-end="url(#head)"/>'
                )
        lines.append("</svg>")
        return "\n".join(lines) + "\n"

    def to_ppm(self) -> bytes:
        """Rasterised arrows (shafts and dots) as a binary PPM."""
        rows, cols = self.u.shape
        w, h = cols * CELL_PX, rows * CELL_PX
        img = np.full((h, w, 3), 255, dtype=np.uint8)
        for x0, y0, x1, y1 in self.arrows():
            steps = max(2, int(math.ceil(2 * math.hypot(x1 - x0, y1 - y0))))
            t = np.linspace(0.0, 1.0, steps)
            xs = np.clip(np.round(x0 + t * (x1 - x0)).astype(int), 0, w - 1)
            ys = np.clip(np.round(y0 + t * (y1 - y0)).astype(int), 0, h - 1)
            img[ys, xs] = 0
            tip_y, tip_x = ys[-1], xs[-1]
            img[max(tip_y - 1, 0) : tip_y + 2, max(tip_x - 1, 0) : tip_x + 2] = (200, 0, 0)
        return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def kernel_pairs(weights: np.ndarray, kernel_id: int, sparsity: int = 1) -> list[FlowImage]:
    """Split one C1 kernel into its u/v slice pairs, normalised by the
    kernel's largest vector magnitude."""
    if not 0 <= kernel_id < weights.shape[0]:
        raise IndexError(f"kernel {kernel_id} out of range [0, {weights.shape[0]})")
    if sparsity < 1:
        raise ValueError("sparsity must be >= 1")
    k = np.asarray(weights[kernel_id], dtype=np.float64)
    u, v = k[:, :, 0::2], k[:, :, 1::2]
    peak = float(np.sqrt(u**2 + v**2).max())
    if peak > 0:
        u, v = u / peak, v / peak
    return [FlowImage(kernel_id, p, u[:, :, p], v[:, :, p], sparsity) for p in range(u.shape[2])]


def render_kernel_flowfields(
    model_or_weights, kernel_id: int, out_dir=None, sparsity: int = 1, ppm: bool = False
) -> list[FlowImage]:
    """Vector-field images for every slice pair of a C1 kernel, optionally
    written as ``kernel_<id>_pair_<p>.svg`` (and .ppm) into ``out_dir``."""
    weights = model_or_weights.params["c1_w"] if hasattr(model_or_weights, "params") else model_or_weights
    images = kernel_pairs(np.asarray(weights), kernel_id, sparsity)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for im in images:
            (out / im.filename).write_text(im.to_svg(), encoding="utf-8")
            if ppm:
                (out / im.filename.replace(".svg", ".ppm")).write_bytes(im.to_ppm())
    return images


def curl_divergence(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference curl (dv/dx - du/dy) and divergence of a [row, col] field."""
    du_dy, du_dx = np.gradient(u)
    dv_dy, dv_dx = np.gradient(v)
    return dv_dx - du_dy, du_dx + dv_dy
