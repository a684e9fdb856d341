"""Command-line entry point: ``egoflow <subcommand> ...``.

Every subcommand prints one ``key=value`` summary line on stdout; logs go to
stderr.  Exit codes: 1 usage, 2 missing input, 3 format, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import analysis, ego_net, formats, synthetic
from .errors import EgoFlowError, FormatError
from .flow_grid import GRID_COLS, GRID_ROWS, TARGET_FPS, LkConfig, extract_flow
from .temporal_segmenter import DEFAULT_ETA, aggregate_scores, labels_to_timeline
from .volume_builder import BLOCK_LEN, BLOCK_STRIDE, NormStats, build_volumes, fit_norm_stats

log = logging.getLogger("egoflow")

EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT, EXIT_NUMERIC = 1, 2, 3, 4


@dataclass
class PipelineConfig:
    fps: float = TARGET_FPS
    grid_rows: int = GRID_ROWS
    grid_cols: int = GRID_COLS
    block_len: int = BLOCK_LEN
    block_overlap: int = BLOCK_STRIDE
    eta: int = DEFAULT_ETA
    learning_rate: float = 0.01
    batch_size: int = 64
    iterations: int = 3000
    transfer_iterations: int = 800
    seed: int = 0
    threads: int | None = None

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def merged(self, overrides: dict) -> "PipelineConfig":
        """Copy with ``overrides`` applied (values are converted to field types)."""
        out = PipelineConfig(**asdict(self))
        types = {"fps": float, "learning_rate": float}
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in self.keys():
                raise UsageError(f"unknown config key {key!r}")
            conv = types.get(key, int)
            try:
                setattr(out, key, conv(value))
            except ValueError:
                raise UsageError(f"config key {key!r}: cannot parse {value!r}") from None
        return out


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    out = {}
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value.strip("\"'")
    return out


# --------------------------------------------------------------------------- helpers


def _summary(**items) -> None:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    print(" ".join(f"{k}={fmt(v)}" for k, v in items.items()), flush=True)


def _read_labels(path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"labels file {path} does not exist")
    return [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def _sidecar(volume_path) -> Path:
    return Path(str(volume_path) + ".labels")


def _label_names(args, volume_path=None):
    if getattr(args, "labels", None):
        return _read_labels(args.labels)
    if volume_path is not None and _sidecar(volume_path).exists():
        return _read_labels(_sidecar(volume_path))
    return None


def _load_stats(path) -> NormStats:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"normalisation file {path} does not exist")
    try:
        return NormStats.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: not a normalisation file ({e})") from None


def _dataset(path, args, stats: NormStats | None, label_names=None):
    """EGVD dataset, normalised with ``stats`` unless --normalized was given."""
    ds = formats.load_dataset(path, label_names=label_names)
    if getattr(args, "normalized", False):
        if stats is None:
            raise UsageError("--normalized needs the statistics the volumes were normalised with (--norm)")
        ds.norm_stats = stats
        return ds
    return ds.normalized(stats) if stats is not None else ds


def _load_model(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file {path} does not exist")
    return ego_net.load_model(path)


def _progress(every=100):
    def cb(it, loss):
        if (it + 1) % every == 0:
            log.info("iteration %d loss %.5f", it + 1, loss)

    return cb


# --------------------------------------------------------------------------- subcommands


def cmd_extract_flow(args, cfg: PipelineConfig):
    frames, native = formats.read_frames(args.frames, args.native_fps)
    log.info("read %d frames at %.3f fps from %s", len(frames), native, args.frames)
    fields_, rate = extract_flow(frames, native, LkConfig(), threads=cfg.threads or 1)
    formats.save_flow(args.out, fields_)
    log.info("LK non-convergence rate %.4f", rate)
    _summary(command="extract-flow", out=args.out, fields=len(fields_), nonconvergence=rate)


def cmd_build_volumes(args, cfg: PipelineConfig):
    vols, labels = [], []
    label_ids = args.label or []
    if label_ids and len(label_ids) not in (1, len(args.flow)):
        raise UsageError("give one --label, or one per --flow file")
    for i, path in enumerate(args.flow):
        if not Path(path).exists():
            raise FileNotFoundError(f"flow file {path} does not exist")
        lab = label_ids[min(i, len(label_ids) - 1)] if label_ids else None
        built = build_volumes(formats.load_flow(path), lab)
        vols.extend(built)
        labels.extend([v.label for v in built])
    n = formats.save_volumes(args.out, vols)
    if args.labels:
        _sidecar(args.out).write_text("\n".join(_read_labels(args.labels)) + "\n", encoding="utf-8")
    _summary(command="build-volumes", out=args.out, volumes=n)


def cmd_fit_norm(args, cfg: PipelineConfig):
    ds = formats.load_dataset(args.volumes)
    stats = fit_norm_stats(ds.volumes)
    Path(args.out).write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")
    _summary(command="fit-norm", out=args.out, p95_u=stats.p95_u, p95_v=stats.p95_v)


def cmd_train(args, cfg: PipelineConfig):
    names = _label_names(args, args.volumes)
    if args.norm:
        stats = _load_stats(args.norm)
    elif args.normalized:
        raise UsageError("--normalized needs --norm")
    else:
        stats = fit_norm_stats(formats.load_dataset(args.volumes).volumes)
        log.info("fitted normalisation p95_u=%.6g p95_v=%.6g", stats.p95_u, stats.p95_v)
    ds = _dataset(args.volumes, args, stats, names)
    tc = ego_net.TrainConfig(cfg.learning_rate, cfg.batch_size, cfg.iterations, cfg.seed)
    losses = []
    progress = _progress()

    def record(it, loss):
        losses.append(loss)
        progress(it, loss)

    model = ego_net.train(ds, tc, label_names=names, callback=record)
    ego_net.save_model(model, args.out)
    _summary(
        command="train", out=args.out, classes=model.num_classes, iterations=tc.iterations,
        final_loss=float(losses[-1]) if losses else float("nan"),
    )


def cmd_transfer(args, cfg: PipelineConfig):
    init = _load_model(args.init)
    names = _label_names(args, args.volumes)
    ds = _dataset(args.volumes, args, init.norm_stats, names)
    iters = args.iterations if args.iterations is not None else cfg.transfer_iterations
    mode = {"last-layer": "last_layer_only", "warm-start": "warm_start"}[args.mode]
    tc = ego_net.TrainConfig(cfg.learning_rate, cfg.batch_size, iters, cfg.seed, mode)
    losses = []
    model = ego_net.train(ds, tc, init=init, label_names=names, callback=lambda it, loss: losses.append(loss))
    ego_net.save_model(model, args.out)
    _summary(
        command="transfer", out=args.out, mode=args.mode, classes=model.num_classes, iterations=iters,
        final_loss=float(losses[-1]) if losses else float("nan"),
    )


def _check_labels(model, args):
    if getattr(args, "labels", None):
        names = _read_labels(args.labels)
        if len(names) != model.num_classes:
            raise FormatError(f"labels file lists {len(names)} classes but the model has {model.num_classes}")


def cmd_classify(args, cfg: PipelineConfig):
    model = _load_model(args.model)
    _check_labels(model, args)
    ds = _dataset(args.volumes, args, model.norm_stats)
    scores = analysis.predict_scores(model, ds)
    lines = ["start_frame,predicted," + ",".join(model.labels)]
    for sf, row in zip(ds.start_frames, scores):
        lines.append(f"{sf},{model.labels[int(np.argmax(row))]}," + ",".join(repr(float(s)) for s in row))
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    _summary(command="classify", out=args.out, volumes=len(ds))


def cmd_segment(args, cfg: PipelineConfig):
    model = _load_model(args.model)
    ds = _dataset(args.volumes, args, model.norm_stats)
    scores = analysis.predict_scores(model, ds)
    groups = np.unique(ds.groups)
    doc = {"fps": int(cfg.fps) if float(cfg.fps).is_integer() else cfg.fps, "segments": []}
    rows = []
    for g in groups:
        idx = np.flatnonzero(ds.groups == g)
        idx = idx[np.argsort(ds.start_frames[idx], kind="stable")]
        agg = aggregate_scores(scores[idx], cfg.eta)
        tl = labels_to_timeline(np.argmax(agg, axis=1), cfg.fps, cfg.block_overlap, scores=agg)
        offset = ds.start_frames[idx[0]] / cfg.fps
        for seg in tl.to_dict(model.labels)["segments"]:
            seg["start_s"] += offset
            seg["end_s"] += offset
            if len(groups) > 1:
                seg["sequence"] = int(g)
            doc["segments"].append(seg)
            rows.append(seg)
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if args.csv:
        head = ["start_s", "end_s", "label", "score"] + (["sequence"] if len(groups) > 1 else [])
        body = [",".join(repr(r[h]) if isinstance(r[h], float) else str(r[h]) for h in head) for r in rows]
        Path(args.csv).write_text("\n".join([",".join(head)] + body) + "\n", encoding="utf-8")
    _summary(command="segment", out=args.out, segments=len(rows), sequences=len(groups), eta=cfg.eta)


def cmd_evaluate(args, cfg: PipelineConfig):
    model = _load_model(args.model)
    ds = _dataset(args.volumes, args, model.norm_stats)
    report = analysis.evaluate(model, ds, cfg.eta)
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    _summary(
        command="evaluate", out=args.out, eta=cfg.eta, accuracy=report.confusion.accuracy,
        macro_precision=report.macro_precision, macro_recall=report.macro_recall, macro_f1=report.macro_f1,
    )


def cmd_affinity(args, cfg: PipelineConfig):
    model = _load_model(args.model)
    ds = _dataset(args.volumes, args, model.norm_stats)
    votes = analysis.kernel_affinity(model, ds, args.vote_depth)
    Path(args.out).write_text(analysis.affinity_csv(votes, model.labels), encoding="utf-8")
    _summary(command="affinity", out=args.out, votes=int(votes.sum()), vote_depth=args.vote_depth)


def cmd_visualize_kernels(args, cfg: PipelineConfig):
    model = _load_model(args.model)
    kernels = range(model.params["c1_w"].shape[0]) if args.kernel is None else [args.kernel]
    n = 0
    for k in kernels:
        n += len(analysis.render_kernel_flowfields(model, k, args.out_dir, args.sparsity, args.ppm))
    _summary(command="visualize-kernels", out_dir=args.out_dir, images=n)


def cmd_synth(args, cfg: PipelineConfig):
    if args.frames_out:
        frames = synthetic.generate_frames(args.n_frames, tuple(args.shift), cfg.seed, args.frame_fps,
                                           (args.size, args.size))
        if args.frames_out.endswith(".egfr"):
            formats.write_frame_stream(args.frames_out, frames, args.frame_fps)
        else:
            formats.write_pgm_dir(args.frames_out, frames)
        _summary(command="synth", out=args.frames_out, frames=len(frames))
        return
    if not args.out:
        raise UsageError("synth needs --out (volumes) or --frames-out")
    classes = synthetic.default_classes(args.classes, args.noise_ratio, cfg.seed)
    corpus = synthetic.SyntheticCorpus(classes, args.per_class, args.seq_len)
    n = formats.save_volumes(args.out, corpus, corpus.labels, corpus.start_frames)
    _sidecar(args.out).write_text("\n".join(corpus.label_names) + "\n", encoding="utf-8")
    _summary(command="synth", out=args.out, volumes=n, classes=len(classes))


# --------------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker cap (also EGOFLOW_THREADS)")
    common.add_argument("--eta", type=int)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="egoflow", description="Egocentric activity indexing from sparse optical flow.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    def training(sp):
        sp.add_argument("--lr", dest="learning_rate", type=float)
        sp.add_argument("--batch", dest="batch_size", type=int)

    sp = add("extract-flow", cmd_extract_flow, "frames -> EGFL flow file")
    sp.add_argument("--frames", required=True, help="PGM directory or EGFR stream")
    sp.add_argument("--out", required=True)
    sp.add_argument("--fps", dest="native_fps", type=float, help="native frame rate of the source")

    sp = add("build-volumes", cmd_build_volumes, "EGFL files -> EGVD volumes")
    sp.add_argument("--flow", required=True, action="append", help="repeatable; one file per sequence")
    sp.add_argument("--label", type=int, action="append", help="class id (one, or one per --flow)")
    sp.add_argument("--labels", help="class names file copied next to the output")
    sp.add_argument("--out", required=True)

    sp = add("fit-norm", cmd_fit_norm, "95th-percentile normalisation statistics")
    sp.add_argument("--volumes", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a model from scratch")
    sp.add_argument("--volumes", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--norm", help="statistics JSON (default: fit on the training volumes)")
    sp.add_argument("--normalized", action="store_true", help="volumes are already normalised")
    sp.add_argument("--labels")
    sp.add_argument("--iters", dest="iterations", type=int)
    training(sp)

    sp = add("transfer", cmd_transfer, "retrain on new classes from an existing model")
    sp.add_argument("--init", required=True)
    sp.add_argument("--volumes", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("last-layer", "warm-start"), default="last-layer")
    sp.add_argument("--normalized", action="store_true")
    sp.add_argument("--labels")
    sp.add_argument("--iters", dest="iterations", type=int)
    training(sp)

    for name, fn, help_ in (
        ("classify", cmd_classify, "per-block softmax scores as CSV"),
        ("segment", cmd_segment, "activity timeline JSON"),
        ("evaluate", cmd_evaluate, "metrics JSON"),
        ("affinity", cmd_affinity, "class-kernel affinity CSV"),
    ):
        sp = add(name, fn, help_)
        sp.add_argument("--model", required=True)
        sp.add_argument("--volumes", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--normalized", action="store_true")
        if name == "classify":
            sp.add_argument("--labels", help="class names; must match the model's class count")
        if name == "segment":
            sp.add_argument("--csv", help="also write the segments as CSV")
        if name == "affinity":
            sp.add_argument("--vote-depth", type=int, default=3)

    sp = add("visualize-kernels", cmd_visualize_kernels, "C1 kernels as SVG vector fields")
    sp.add_argument("--model", required=True)
    sp.add_argument("--kernel", type=int, help="kernel id (default: all)")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--sparsity", type=int, default=1)
    sp.add_argument("--ppm", action="store_true", help="also write rasterised PPM images")

    sp = add("synth", cmd_synth, "synthetic volumes or textured frames")
    sp.add_argument("--out", help="EGVD output (volumes mode)")
    sp.add_argument("--classes", type=int, default=6)
    sp.add_argument("--per-class", type=int, default=1300)
    sp.add_argument("--seq-len", type=int, default=20)
    sp.add_argument("--noise-ratio", type=float, default=0.2)
    sp.add_argument("--frames-out", help="PGM directory, or a path ending in .egfr")
    sp.add_argument("--n-frames", type=int, default=61)
    sp.add_argument("--shift", type=int, nargs=2, default=(1, 0), metavar=("DX", "DY"))
    sp.add_argument("--frame-fps", type=float, default=15.0)
    sp.add_argument("--size", type=int, default=512)
    return p


def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.config:
        cfg = cfg.merged(read_config_file(args.config))
    if args.threads is None and os.environ.get("EGOFLOW_THREADS"):
        cfg = cfg.merged({"threads": os.environ["EGOFLOW_THREADS"]})
    flags = {k: getattr(args, k, None) for k in PipelineConfig.keys()}
    return cfg.merged(flags)


def _run(args, cfg):
    if cfg.threads:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=cfg.threads):
            args.func(args, cfg)
    else:
        args.func(args, cfg)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return int(e.code or 0)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        cfg = resolve_config(args)
        if cfg.eta < 1 or cfg.eta % 2 == 0:
            raise UsageError("eta must be an odd positive integer")
        _run(args, cfg)
    except UsageError as e:
        print(f"egoflow: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"egoflow: error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except EgoFlowError as e:
        print(f"egoflow: error: {e}", file=sys.stderr)
        return e.exit_code
    except FloatingPointError as e:
        print(f"egoflow: error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
