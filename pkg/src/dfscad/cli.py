"""Command-line entry point: ``dfscad <command> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numerical failure during training.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path


from . import config as cfgmod
from .datasets import gen_mini_loco, load_loco_layout, preprocess, split
from .errors import CheckpointError, CheckpointShapeError, ConfigError, DatasetError, NumericalError
from .metrics import REPORT_KEYS, evaluate_maps, format_report, oracle_maps, report_json, score_samples
from .nets import TripletModel, load_model, save_model
from .scorer import AnomalyMap, calibrate, export_maps, read_maps
from .trainer import pretrain_teacher, run_training

log = logging.getLogger("dfscad")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
RESOLVED_NAME = "resolved_config.txt"
MARGIN_GRID = (0.0, 0.2, 0.4, 1.0, 2.0)
# cumulative rows: each adds one component on top of the previous row
ABLATION_ROWS = (
    ("baseline", {"instance_norm_relu": False, "sigmoid_projection": False, "dfsc": False, "momentum_update": False}),
    ("+in_relu", {"instance_norm_relu": True}),
    ("+sigmoid", {"sigmoid_projection": True}),
    ("+dfsc", {"dfsc": True}),
    ("+momentum", {"momentum_update": True}),
)
COMMAND_SECTIONS = {
    "gen-data": ("data",),
    "pretrain-teacher": ("run", "model", "teacher"),
    "train": ("run", "model", "train", "loss", "toggles"),
    "eval": ("sigmoid_projection",),
    "score": ("sigmoid_projection",),
    "sweep": ("run", "model", "train", "loss", "toggles"),
}


class UsageError(Exception):
    """Bad combination of command-line arguments."""


# -- helpers -----------------------------------------------------------------------

def _resolve(args) -> cfgmod.RunConfig:
    file_values = cfgmod.read_file(args.config) if getattr(args, "config", None) else {}
    overrides = {k: getattr(args, k) for k in cfgmod.FIELDS if hasattr(args, k)}
    return cfgmod.resolve(file_values, overrides)


def _write_resolved(rc: cfgmod.RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(rc.to_text())


def _data_root(args) -> Path:
    root = getattr(args, "data", None) or cfgmod.default_data_root()
    if not root:
        raise UsageError(f"no data directory: pass --data or set {cfgmod.DATA_ENV}")
    return Path(root)


def _images(samples, name: str, size: int) -> list:
    return [preprocess(s.pixels, size) for s in split(samples, name)]


def _load_checkpoint(path) -> TripletModel:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return load_model(p)


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    rc = _resolve(argparse.Namespace(config=args.spec, **{k: v for k, v in vars(args).items() if k in cfgmod.FIELDS}))
    spec = rc.data_spec()
    out = Path(args.out) if args.out else _data_root(args)
    samples = gen_mini_loco(spec, out)
    counts = {}
    for s in samples:
        counts[(s.split, s.label)] = counts.get((s.split, s.label), 0) + 1
    print(f"wrote {len(samples)} images to {out}")
    for (sp, label), n in counts.items():
        print(f"  {sp:<11} {label:<19} {n:4d}")
    return EXIT_OK


def cmd_pretrain_teacher(args) -> int:
    rc = _resolve(args)
    samples = load_loco_layout(_data_root(args))
    out = Path(args.out)
    _write_resolved(rc, out)
    model = TripletModel(rc.model_config())
    trace = pretrain_teacher(model, _images(samples, "train", rc.image_size), rc.teacher_iterations,
                             rc.teacher_lr, seed=rc.seed)
    with open(out / "teacher_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "mse"))
        w.writerows((t, repr(v)) for t, v in enumerate(trace))
    save_model(model, out / "teacher.dfsc")
    if trace:
        print(f"teacher distillation: mse {trace[0]:.4g} -> {trace[-1]:.4g} over {len(trace)} steps")
    print(f"saved {out / 'teacher.dfsc'}")
    return EXIT_OK


def train_run(rc: cfgmod.RunConfig, samples, out: Path, init=None, resume=None) -> TripletModel:
    _write_resolved(rc, out)
    model = None
    if init is not None and resume is None:
        model = load_model(init, rc.model_config())
        model.step = 0  # teacher statistics are refit by run_training
    every = max(1, rc.iterations // 10)

    def progress(t, b):
        if (t + 1) % every == 0:
            log.info("step %d/%d total %.5f dfsc %.5f", t + 1, rc.iterations, b.total, b.l_dfsc)

    return run_training(_images(samples, "train", rc.image_size), rc.train_config(), out, model=model,
                        resume=resume, model_config=rc.model_config(), progress=progress)


def cmd_train(args) -> int:
    rc = _resolve(args)
    samples = load_loco_layout(_data_root(args))
    train_run(rc, samples, Path(args.out), init=args.init, resume=args.resume)
    print(f"saved {Path(args.out) / 'final.dfsc'}")
    return EXIT_OK


def eval_run(model: TripletModel, samples, sigmoid: bool) -> dict:
    size = model.config.image_size
    stats = calibrate(model, _images(samples, "validation", size))
    maps, _ = score_samples(model, stats, samples, size, sigmoid=sigmoid)
    return evaluate_maps(maps, samples)


def _write_report(report: dict, out: Path, category: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report_json(report, category))
    (out / "report.txt").write_text(format_report(report, category))


def cmd_eval(args) -> int:
    rc = _resolve(args)
    root = _data_root(args)
    samples = load_loco_layout(root)
    if args.oracle_maps:
        report = evaluate_maps(oracle_maps(samples), samples)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --oracle-maps)")
        report = eval_run(_load_checkpoint(args.checkpoint), samples, rc.sigmoid_projection)
    out = Path(args.out)
    _write_resolved(rc, out)
    _write_report(report, out, root.name)
    print(format_report(report, root.name), end="")
    return EXIT_OK


def cmd_score(args) -> int:
    rc = _resolve(args)
    samples = load_loco_layout(_data_root(args))
    model = _load_checkpoint(args.checkpoint)
    size = model.config.image_size
    stats = calibrate(model, _images(samples, "validation", size))
    maps, amaps = score_samples(model, stats, samples, size, sigmoid=rc.sigmoid_projection)
    out = Path(args.out)
    _write_resolved(rc, out)
    labels = {s.image_id: s.label for s in samples}
    exported = {iid: AnomalyMap(v, amaps[iid].source_shape, amaps[iid].branch) for iid, v in maps.items()}
    extra = {iid: {"label": labels[iid], "score": float(v.max())} for iid, v in maps.items()}
    export_maps(exported, out / "maps", extra)
    (out / "calibration.json").write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("image_id", "label", "score"))
        for iid in sorted(maps):
            w.writerow((iid, labels[iid], repr(extra[iid]["score"])))
    print(f"scored {len(maps)} images; maps in {out / 'maps'}")
    return EXIT_OK


def sweep_points(axis: str, rc: cfgmod.RunConfig, points=None) -> list:
    """``[(name, RunConfig)]`` for one sweep axis."""
    if axis == "margin":
        grid = MARGIN_GRID if points is None else points
        return [(f"margin_{float(m)!r}", rc.replace(margin=float(m))) for m in grid]
    if axis == "ablation":
        rows, state = [], {}
        for name, change in ABLATION_ROWS:
            state.update(change)
            rows.append((name, rc.replace(**state)))
        if points is not None:
            rows = [r for r in rows if r[0] in points]
        return rows
    raise ConfigError(f"unknown sweep axis {axis!r}")


def cmd_sweep(args) -> int:
    rc = _resolve(args)
    root = _data_root(args)
    samples = load_loco_layout(root)
    points = None
    if args.points:
        raw = [p.strip() for p in args.points.split(",") if p.strip()]
        points = [cfgmod.coerce("margin", p) for p in raw] if args.axis == "margin" else raw
    plan = sweep_points(args.axis, rc, points)
    if not plan:
        raise UsageError("the sweep has no points")
    out = Path(args.out)
    _write_resolved(rc, out)
    rows = []
    for name, prc in plan:
        log.info("sweep point %s", name)
        d = out / name
        model = train_run(prc, samples, d)
        report = eval_run(model, samples, prc.sigmoid_projection)
        _write_report(report, d, root.name)
        rows.append((name, report))
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("point", *REPORT_KEYS))
        for name, rep in rows:
            w.writerow((name, *(repr(rep[k]) for k in REPORT_KEYS)))
    table = format_sweep(rows)
    (out / "sweep.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def format_sweep(rows) -> str:
    width = max(len("point"), *(len(n) for n, _ in rows))
    head = f"{'point':<{width}}  " + "  ".join(f"{k:>22}" for k in REPORT_KEYS)
    lines = [head, "-" * len(head)]
    for name, rep in rows:
        lines.append(f"{name:<{width}}  " + "  ".join(f"{rep[k]:>22.4f}" for k in REPORT_KEYS))
    return "\n".join(lines) + "\n"


def cmd_plot(args) -> int:
    from .plotting import render_panels

    maps_dir = Path(args.maps)
    if not (maps_dir / "manifest.json").is_file():
        raise UsageError(f"no exported maps in {maps_dir}")
    entries = read_maps(maps_dir)
    if not entries:
        raise UsageError(f"no exported maps in {maps_dir}")
    samples = {s.image_id: s for s in load_loco_layout(_data_root(args))}
    n = render_panels(entries, samples, Path(args.out), cmap=args.cmap)
    print(f"wrote {n} panels to {args.out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def _typed(key: str):
    def conv(text):
        try:
            return cfgmod.coerce(key, text)
        except ConfigError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    conv.__name__ = cfgmod.FIELDS[key].type
    return conv


def _add_config_flags(p: argparse.ArgumentParser, sections):
    """One flag per config key; ``sections`` holds section names or single keys."""
    for section in sections:
        g = p.add_argument_group(f"{section} settings") if section in cfgmod.SECTIONS else p
        for name, f in cfgmod.FIELDS.items():
            if section not in (f.metadata["section"], name):
                continue
            default = cfgmod.format_value(f.default)
            g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=_typed(name), default=None,
                           metavar=f.type.upper(), help=f"{f.metadata['help']} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfscad",
        description="Train and evaluate the teacher / student / auto-encoder anomaly detector.",
        epilog=f"Settings resolve as defaults < profile < --config file < flags. "
               f"{cfgmod.DATA_ENV} sets the default data directory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def command(name, help_, data=True, config=True):
        p = sub.add_parser(name, help=help_, description=help_)
        if config:
            p.add_argument("--config", metavar="FILE", help="flat 'key = value' settings file")
        if data:
            p.add_argument("--data", metavar="DIR", help=f"dataset root in LOCO layout (default: ${cfgmod.DATA_ENV})")
        _add_config_flags(p, COMMAND_SECTIONS.get(name, ()))
        return p

    p = command("gen-data", "generate the synthetic pegboard dataset", data=False, config=False)
    p.add_argument("--spec", metavar="FILE", help="'key = value' dataset spec file")
    p.add_argument("--out", metavar="DIR", help=f"output directory (default: ${cfgmod.DATA_ENV})")
    p.add_argument("--profile", type=_typed("profile"), default=None, help="desk (256 px) or fast (64 px)")
    p.set_defaults(func=cmd_gen_data)

    p = command("pretrain-teacher", "distill the teacher from a fixed random descriptor network")
    p.add_argument("--out", metavar="DIR", required=True, help="output directory for teacher.dfsc")
    p.set_defaults(func=cmd_pretrain_teacher)

    p = command("train", "train the student and auto-encoder on normal training images")
    p.add_argument("--out", metavar="DIR", required=True, help="run directory (checkpoints, loss log)")
    p.add_argument("--init", metavar="CKPT", help="start from this checkpoint (e.g. a pretrained teacher)")
    p.add_argument("--resume", metavar="CKPT", help="continue an interrupted run from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = command("eval", "calibrate on validation images and report test metrics")
    p.add_argument("--checkpoint", metavar="CKPT", help="trained model")
    p.add_argument("--out", metavar="DIR", required=True, help="directory for report.json / report.txt")
    p.add_argument("--oracle-maps", action="store_true", help="use ground-truth masks as maps (sanity check)")
    p.set_defaults(func=cmd_eval)

    p = command("score", "export per-image anomaly maps and scores")
    p.add_argument("--checkpoint", metavar="CKPT", required=True, help="trained model")
    p.add_argument("--out", metavar="DIR", required=True, help="output directory")
    p.set_defaults(func=cmd_score)

    p = command("sweep", "train and evaluate over a margin grid or the cumulative ablation rows")
    p.add_argument("--axis", choices=("margin", "ablation"), required=True, help="what to sweep")
    p.add_argument("--points", metavar="LIST",
                   help="comma-separated subset: margins, or ablation row names "
                        f"({', '.join(n for n, _ in ABLATION_ROWS)})")
    p.add_argument("--out", metavar="DIR", required=True, help="sweep directory")
    p.set_defaults(func=cmd_sweep)

    p = command("plot", "render input / ground truth / anomaly map panels", config=False)
    p.add_argument("--maps", metavar="DIR", required=True, help="maps directory written by 'score'")
    p.add_argument("--out", metavar="DIR", required=True, help="output directory for PNG panels")
    p.add_argument("--cmap", default="inferno", help="matplotlib colormap name (default: inferno)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointShapeError, DatasetError) as exc:
        print(f"dfscad {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"dfscad {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"dfscad {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
