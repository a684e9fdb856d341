"""The compact 3D CNN: architecture, training, parameter accounting, model files.

Layer order: C1 (3D conv) -> ReLU -> P1 (3D max pool on the kernel-wise
concatenation) -> C2 (2D conv over all P1 channels) -> ReLU -> 2x2 max pool
-> FC1 -> ReLU -> FC2 -> ReLU -> classifier -> softmax.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor_nn as nn
from .errors import DatasetError, FormatError, LabelError, NormalizationError, ShapeError
from .volume_builder import NormStats, VolumeDataset

log = logging.getLogger(__name__)

LAYERS = ("c1", "c2", "fc1", "fc2", "cls")
MODEL_MAGIC = b"EGNT"
MODEL_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    input_dims: tuple[int, int, int] = (32, 32, 120)
    c1_kernels: int = 30
    c1_kernel: tuple[int, int, int] = (17, 17, 20)
    c1_stride: tuple[int, int, int] = (2, 2, 4)
    p1_window: tuple[int, int, int] = (2, 2, 13)
    c2_kernels: int = 100
    c2_kernel: tuple[int, int] = (3, 3)
    pool2: tuple[int, int] = (2, 2)
    fc1: int = 400
    fc2: int = 50
    c1_method: str = "fft"
    c1_dtype: str = "float32"  # precision of the spectral C1 arithmetic

    def __post_init__(self):
        if self.c1_stride[2] % 2 or self.c1_kernel[2] % 2:
            raise ShapeError("C1 temporal stride and extent must be even to keep u/v slices apart")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Activation shape after every stage (per sample)."""
        c1 = nn.output_dims(self.input_dims, self.c1_kernel, self.c1_stride)
        concat = (c1[0], c1[1], c1[2] * self.c1_kernels)
        p1 = nn.output_dims(concat, self.p1_window, self.p1_window)
        c2 = nn.output_dims(p1[:2], self.c2_kernel, (1, 1)) + (self.c2_kernels,)
        p2 = nn.output_dims(c2[:2], self.pool2, self.pool2) + (self.c2_kernels,)
        return {
            "input": tuple(self.input_dims),
            "c1": (self.c1_kernels,) + c1,
            "concat": concat,
            "p1": p1,
            "c2": c2,
            "p2": p2,
            "fc1": (self.fc1,),
            "fc2": (self.fc2,),
        }

    def param_shapes(self, num_classes: int) -> dict[str, tuple[int, ...]]:
        s = self.shapes()
        flat = int(np.prod(s["p2"]))
        return {
            "c1_w": (self.c1_kernels,) + tuple(self.c1_kernel),
            "c1_b": (self.c1_kernels,),
            "c2_w": (self.c2_kernels,) + tuple(self.c2_kernel) + (s["p1"][2],),
            "c2_b": (self.c2_kernels,),
            "fc1_w": (self.fc1, flat),
            "fc1_b": (self.fc1,),
            "fc2_w": (self.fc2, self.fc1),
            "fc2_b": (self.fc2,),
            "cls_w": (num_classes, self.fc2),
            "cls_b": (num_classes,),
        }


STANDARD = Architecture()
# Shrunken clone for end-to-end gradient checks.
TINY = Architecture(
    input_dims=(8, 8, 12),
    c1_kernels=2,
    c1_kernel=(3, 3, 4),
    c1_stride=(1, 1, 2),
    p1_window=(2, 2, 5),
    c2_kernels=3,
    c2_kernel=(2, 2),
    fc1=6,
    fc2=5,
    c1_dtype="float64",
)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    iterations: int = 3000
    seed: int = 0
    mode: str = "full"  # full | last_layer_only | warm_start

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.iterations < 0:
            raise ValueError("learning rate and batch size must be positive, iterations non-negative")
        if self.mode not in ("full", "last_layer_only", "warm_start"):
            raise ValueError(f"unknown training mode {self.mode!r}")


def _fan(name: str, shape) -> tuple[int, int]:
    if name.startswith("c"):
        # conv kernels: (out, *receptive, [in_channels])
        if name == "c1_w":
            receptive, c_in = int(np.prod(shape[1:])), 1
        elif name == "c2_w":
            receptive, c_in = int(np.prod(shape[1:-1])), shape[-1]
        else:
            return shape[1], shape[0]
        return receptive * c_in, receptive * shape[0]
    return shape[1], shape[0]


def _round_f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


@dataclass
class NetworkModel:
    params: dict[str, np.ndarray]
    labels: list[str]
    norm_stats: NormStats
    seed: int = 0
    arch: Architecture = field(default=STANDARD)

    def __post_init__(self):
        if len(self.labels) < 1:
            raise LabelError("a model needs at least one class")
        expect = self.arch.param_shapes(len(self.labels))
        for name, shape in expect.items():
            if name not in self.params:
                raise ShapeError(f"missing parameter {name}")
            if tuple(self.params[name].shape) != shape:
                raise ShapeError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    @property
    def c1(self) -> nn.ConvSpec3D:
        return nn.ConvSpec3D(self.params["c1_w"], self.params["c1_b"], self.arch.c1_stride)

    @property
    def c2(self) -> nn.ConvSpec3D:
        return nn.ConvSpec3D(self.params["c2_w"], self.params["c2_b"])

    def dense(self, layer: str) -> nn.DenseSpec:
        return nn.DenseSpec(self.params[f"{layer}_w"], self.params[f"{layer}_b"])

    def copy(self) -> "NetworkModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()}, labels=list(self.labels))


def _init_layer(params, arch, num_classes, rng, names):
    shapes = arch.param_shapes(num_classes)
    for name in names:
        shape = shapes[name]
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = _fan(name, shape)
            params[name] = _round_f32(nn.xavier_init(fan_in, fan_out, rng, shape))


def init_model(
    labels, norm_stats: NormStats, seed: int = 0, arch: Architecture = STANDARD
) -> NetworkModel:
    """Xavier-initialised weights, zero biases.  Weights are drawn in layer
    order from one seeded generator and held at float32 precision."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    _init_layer(params, arch, len(labels), rng, list(arch.param_shapes(len(labels))))
    return NetworkModel(params, list(labels), norm_stats, seed, arch)


# --------------------------------------------------------------------------- forward / backward


@dataclass
class _Cache:
    x: np.ndarray
    xf: np.ndarray | None
    z1: np.ndarray
    concat_dims: tuple
    arg1: np.ndarray
    p1: np.ndarray
    z2: np.ndarray
    arg2: np.ndarray
    f: np.ndarray
    z3: np.ndarray
    h1: np.ndarray
    z4: np.ndarray
    h2: np.ndarray


def _c1_plan(arch: Architecture):
    return nn.FFTConv3D(arch.input_dims, arch.c1_kernel, arch.c1_stride, np.dtype(arch.c1_dtype))


def _check_input(x, arch):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != tuple(arch.input_dims):
        raise ShapeError(f"network input must be {arch.input_dims}, got {x.shape[1:]}")
    return x


def _features(params, arch, x, keep=False):
    """Forward pass up to the FC2 activations for a batch ``x``."""
    c1 = nn.ConvSpec3D(params["c1_w"], params["c1_b"], arch.c1_stride)
    xf = None
    if arch.c1_method == "fft":
        plan = _c1_plan(arch)
        xf = plan.transform_input(x)
        z1 = plan.forward(x, c1, xf)
    else:
        z1 = nn.conv3d_forward(x, c1)
    bsz, k, r, c, d = z1.shape
    concat = nn.relu_forward(z1).transpose(0, 2, 3, 1, 4).reshape(bsz, r, c, k * d)
    p1, arg1 = nn.maxpool3d_forward(concat, nn.PoolSpec3D(arch.p1_window, arch.p1_window))
    z2 = nn.conv2d_forward(p1, nn.ConvSpec3D(params["c2_w"], params["c2_b"]))
    p2, arg2 = nn.maxpool2d_forward(nn.relu_forward(z2), arch.pool2, arch.pool2)
    f = p2.reshape(bsz, -1)
    z3 = nn.dense_forward(f, nn.DenseSpec(params["fc1_w"], params["fc1_b"]))
    h1 = nn.relu_forward(z3)
    z4 = nn.dense_forward(h1, nn.DenseSpec(params["fc2_w"], params["fc2_b"]))
    h2 = nn.relu_forward(z4)
    cache = _Cache(x, xf, z1, concat.shape[1:], arg1, p1, z2, arg2, f, z3, h1, z4, h2) if keep else None
    return h2, cache


def _logits(params, h2):
    return nn.dense_forward(h2, nn.DenseSpec(params["cls_w"], params["cls_b"]))


def loss_and_grads(params, arch: Architecture, x, y, trainable=None):
    """Mean cross-entropy over the batch and gradients for every parameter
    (or only those named in ``trainable``)."""
    x = _check_input(x, arch)
    h2, cache = _features(params, arch, x, keep=True)
    probs = nn.softmax(_logits(params, h2))
    loss, dlogits = nn.cross_entropy(probs, y)
    grads = _backward(params, arch, cache, dlogits, trainable)
    return loss, grads


def _backward(params, arch, cache: _Cache, dlogits, trainable=None):
    want = set(trainable) if trainable is not None else set(params)
    grads = {}
    dw, db, dh2 = nn.dense_backward(cache.h2, nn.DenseSpec(params["cls_w"], params["cls_b"]), dlogits)
    grads["cls_w"], grads["cls_b"] = dw, db
    if want <= {"cls_w", "cls_b"}:
        return {k: v for k, v in grads.items() if k in want}

    dz4 = nn.relu_backward(cache.z4, dh2)
    grads["fc2_w"], grads["fc2_b"], dh1 = nn.dense_backward(
        cache.h1, nn.DenseSpec(params["fc2_w"], params["fc2_b"]), dz4
    )
    dz3 = nn.relu_backward(cache.z3, dh1)
    grads["fc1_w"], grads["fc1_b"], df = nn.dense_backward(
        cache.f, nn.DenseSpec(params["fc1_w"], params["fc1_b"]), dz3
    )
    bsz = df.shape[0]
    p2_dims = cache.z2.shape[1:]
    dp2 = df.reshape((bsz,) + tuple(arch.shapes()["p2"]))
    da2 = nn.maxpool2d_backward(cache.arg2, dp2, p2_dims)
    dz2 = nn.relu_backward(cache.z2, da2)
    c2 = nn.ConvSpec3D(params["c2_w"], params["c2_b"])
    grads["c2_w"], grads["c2_b"], dp1 = nn.conv2d_backward(cache.p1, c2, dz2)

    dconcat = nn.maxpool3d_backward(cache.arg1, dp1, cache.concat_dims)
    _, k, r, c, d = cache.z1.shape
    da1 = dconcat.reshape(bsz, r, c, k, d).transpose(0, 3, 1, 2, 4)
    dz1 = nn.relu_backward(cache.z1, da1)
    c1 = nn.ConvSpec3D(params["c1_w"], params["c1_b"], arch.c1_stride)
    if arch.c1_method == "fft":
        dw, db, _ = _c1_plan(arch).backward(cache.x, c1, dz1, False, cache.xf)
    else:
        dw, db, _ = nn.conv3d_backward(cache.x, c1, dz1, need_input_grad=False)
    grads["c1_w"], grads["c1_b"] = dw, db
    return {k: v for k, v in grads.items() if k in want}


def features(model: NetworkModel, volumes, chunk: int = 64) -> np.ndarray:
    """FC2 activations (the classifier's input) for a batch of volumes."""
    x = _check_input(volumes, model.arch)
    out = [_features(model.params, model.arch, x[i : i + chunk])[0] for i in range(0, len(x), chunk)]
    return np.concatenate(out)


def forward_batch(model: NetworkModel, volumes, chunk: int = 64) -> np.ndarray:
    """Softmax scores, one row per volume."""
    return nn.softmax(_logits(model.params, features(model, volumes, chunk)))


def forward(model: NetworkModel, volume) -> np.ndarray:
    """Softmax score vector (length K) for one normalised volume."""
    data = getattr(volume, "data", volume)
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"forward takes one volume, got shape {x.shape}")
    return forward_batch(model, x)[0]


def activations(model: NetworkModel, volume) -> dict[str, np.ndarray]:
    """Every intermediate tensor of one forward pass, keyed by stage."""
    x = _check_input(getattr(volume, "data", volume), model.arch)
    h2, cache = _features(model.params, model.arch, x[:1], keep=True)
    logits = _logits(model.params, h2)
    p2 = cache.f.reshape((1,) + model.arch.shapes()["p2"])
    return {
        "c1": nn.relu_forward(cache.z1[0]),
        "concat": nn.relu_forward(cache.z1[0]).transpose(1, 2, 0, 3).reshape(cache.concat_dims),
        "p1": cache.p1[0],
        "c2": nn.relu_forward(cache.z2[0]),
        "p2": p2[0],
        "fc1": cache.h1[0],
        "fc2": h2[0],
        "logits": logits[0],
        "scores": nn.softmax(logits[0]),
    }


def c1_responses(model: NetworkModel, volumes, chunk: int = 64) -> np.ndarray:
    """Per-sample, per-kernel maximum post-ReLU C1 activation, shape (N, kernels)."""
    x = _check_input(volumes, model.arch)
    c1 = model.c1
    out = []
    for i in range(0, len(x), chunk):
        xb = x[i : i + chunk]
        if model.arch.c1_method == "fft":
            z1 = _c1_plan(model.arch).forward(xb, c1)
        else:
            z1 = nn.conv3d_forward(xb, c1)
        out.append(nn.relu_forward(z1).max(axis=(2, 3, 4)))
    return np.concatenate(out)


# --------------------------------------------------------------------------- training


def count_parameters(model: NetworkModel) -> tuple[int, int]:
    """(weights excluding biases and the classifier, every trainable value)."""
    core = sum(model.params[f"{name}_w"].size for name in LAYERS if name != "cls")
    total = sum(p.size for p in model.params.values())
    return int(core), int(total)


def train(
    dataset: VolumeDataset,
    cfg: TrainConfig | None = None,
    init: NetworkModel | None = None,
    label_names=None,
    arch: Architecture | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> NetworkModel:
    """Minibatch SGD on mean cross-entropy.

    Minibatches are drawn uniformly with replacement from a generator seeded
    with ``cfg.seed``.  ``last_layer_only`` freezes everything except the
    classifier, which is re-initialised; ``warm_start`` starts every layer
    from ``init`` (the classifier too, when the class count matches).
    """
    cfg = cfg or TrainConfig()
    if dataset.norm_stats is None:
        raise NormalizationError("training volumes must be normalised (dataset has no NormStats)")
    if len(dataset) == 0:
        raise DatasetError("empty training set")
    names = list(label_names or dataset.label_names or [])
    k = len(names) if names else int(dataset.labels.max()) + 1
    if not names:
        names = [str(i) for i in range(k)]
    if dataset.labels.min() < 0 or dataset.labels.max() >= k:
        raise LabelError(f"training labels must lie in [0, {k})")
    counts = np.bincount(dataset.labels, minlength=k)
    if np.any(counts == 0):
        raise DatasetError(f"classes without samples: {[names[i] for i in np.flatnonzero(counts == 0)]}")

    if cfg.mode == "full":
        model = init_model(names, dataset.norm_stats, cfg.seed, arch or (init.arch if init else STANDARD))
    else:
        if init is None:
            raise ValueError(f"mode {cfg.mode!r} needs an initial model")
        if init.norm_stats != dataset.norm_stats:
            raise NormalizationError(
                f"dataset normalised with {dataset.norm_stats}, initial model expects {init.norm_stats}"
            )
        params = {n: p.copy() for n, p in init.params.items()}
        if cfg.mode == "last_layer_only" or init.num_classes != k:
            # the classifier is the only application-specific layer
            _init_layer(params, init.arch, k, np.random.default_rng(cfg.seed), ["cls_w", "cls_b"])
        model = NetworkModel(params, names, init.norm_stats, cfg.seed, init.arch)

    rng = np.random.default_rng(cfg.seed)
    params = model.params
    n = len(dataset)
    if cfg.mode == "last_layer_only":
        feats = np.concatenate(
            [features(model, dataset.batch(np.arange(i, min(i + 256, n)))) for i in range(0, n, 256)]
        )
        for it in range(cfg.iterations):
            idx = rng.integers(0, n, size=cfg.batch_size)
            h2 = feats[idx]
            probs = nn.softmax(_logits(params, h2))
            loss, dlogits = nn.cross_entropy(probs, dataset.labels[idx])
            dw, db, _ = nn.dense_backward(h2, model.dense("cls"), dlogits)
            _check_finite(loss, it)
            nn.sgd_step(params, {"cls_w": dw, "cls_b": db}, cfg.learning_rate)
            if callback:
                callback(it, loss)
    else:
        for it in range(cfg.iterations):
            idx = rng.integers(0, n, size=cfg.batch_size)
            loss, grads = loss_and_grads(params, model.arch, dataset.batch(idx), dataset.labels[idx])
            _check_finite(loss, it)
            nn.sgd_step(params, grads, cfg.learning_rate)
            if callback:
                callback(it, loss)
            if (it + 1) % 100 == 0:
                log.info("iteration %d/%d loss %.4f", it + 1, cfg.iterations, loss)

    for name in params:
        params[name] = _round_f32(params[name])
    return model


def _check_finite(loss, it):
    if not np.isfinite(loss):
        from .errors import NumericError

        raise NumericError(f"loss became non-finite at iteration {it}")


# --------------------------------------------------------------------------- model files


def save_model(model: NetworkModel, path) -> None:
    labels = "\n".join(model.labels).encode("utf-8")
    parts = [
        MODEL_MAGIC,
        struct.pack("<III", MODEL_VERSION, model.num_classes, len(labels)),
        labels,
        struct.pack("<ffQ", model.norm_stats.p95_u, model.norm_stats.p95_v, model.seed),
    ]
    for layer in LAYERS:
        w = model.params[f"{layer}_w"]
        b = model.params[f"{layer}_b"]
        parts.append(struct.pack("<I", w.ndim) + struct.pack(f"<{w.ndim}I", *w.shape))
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path) -> NetworkModel:
    buf = Path(path).read_bytes()
    r = _Reader(buf, f"model file {path}")
    magic = r.take(4)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r} in {path}; expected {MODEL_MAGIC!r}")
    version, k, nlab = r.unpack("<III")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    try:
        labels = r.take(nlab).decode("utf-8").split("\n") if nlab else [""]
    except UnicodeDecodeError as e:
        raise FormatError(f"label block is not UTF-8: {e}") from None
    if len(labels) != k:
        raise FormatError(f"header says {k} classes but {len(labels)} labels are stored")
    pu, pv, seed = r.unpack("<ffQ")
    params = {}
    for layer in LAYERS:
        (ndim,) = r.unpack("<I")
        if not 1 <= ndim <= 4:
            raise FormatError(f"layer {layer}: implausible rank {ndim}")
        dims = r.unpack(f"<{ndim}I")
        nw = int(np.prod(dims))
        params[f"{layer}_w"] = np.frombuffer(r.take(4 * nw), "<f4").astype(np.float64).reshape(dims)
        params[f"{layer}_b"] = np.frombuffer(r.take(4 * dims[0]), "<f4").astype(np.float64)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} unexpected trailing bytes in {path}")
    if tuple(params["c1_w"].shape[1:]) != STANDARD.c1_kernel:
        arch = _arch_from_params(params)
    else:
        arch = STANDARD
    try:
        return NetworkModel(params, labels, NormStats(pu, pv), int(seed), arch)
    except (ShapeError, ValueError) as e:
        raise FormatError(f"inconsistent layer shapes in {path}: {e}") from None


def _arch_from_params(params) -> Architecture:
    raise FormatError(
        f"model has C1 kernels of shape {params['c1_w'].shape[1:]}; only the standard "
        f"{STANDARD.c1_kernel} architecture can be loaded"
    )
