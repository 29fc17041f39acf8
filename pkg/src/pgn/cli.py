"""``pgn`` command line: dataset generation, training, evaluation and analyses.

Exit codes: 0 success, 1 usage error (bad flags, missing inputs), 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import analysis as A
from . import datasets as DS
from .checkpoint import CheckpointError, load_checkpoint
from .diagnostics import GRAD_TOLERANCE, gradient_suite, worst
from .training import TrainConfig, TrainingDiverged, load_trained, pretrain_discriminator, train_adversarial, \
    train_mse

log = logging.getLogger("pgn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TRAINING = ("train", "pretrain-d", "train-adv")
_TRAIN_FLAGS = (
    ("--model", "model", str), ("--arch", "arch", str), ("--train", "train_data", str),
    ("--val", "val_data", str), ("--batch-size", "batch_size", int), ("--epochs", "epochs", int),
    ("--lam", "lam", float), ("--min-len", "min_len", int), ("--max-len", "max_len", int),
    ("--eval-len", "eval_len", int), ("--lr", "lr", float), ("--d-lr", "d_lr", float),
    ("--d-momentum", "d_momentum", float), ("--d-threshold", "d_threshold", float),
    ("--patience", "patience", int), ("--checkpoint-every", "checkpoint_every", int),
    ("--max-train", "max_train", int), ("--rho", "rho", float), ("--eps", "eps", float),
)
_KEY_ALIASES = {"out_dir": "out"}


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="key=value file; explicit flags take precedence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", "-o", dest="out", help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pgn", description="Predictive generative networks on procedural video.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    for name, helptext in (("gen-balls", "bouncing-balls videos"), ("gen-objects", "rotating-object videos")):
        p = sub.add_parser(name, help=helptext)
        _common(p, "output .pgnv path")
        p.add_argument("--n", type=int, default=1000, help="number of videos")
        p.add_argument("--frames", type=int, default=20 if name == "gen-balls" else 6)
        p.add_argument("--split", type=int, default=0, help="independent seed stream per split")
        if name == "gen-objects":
            p.add_argument("--size", type=int, default=32)

    p = sub.add_parser("gen-classes", help="static identity x angle image set")
    _common(p, "output .pgnv path")
    p.add_argument("--ids", type=int, default=50)
    p.add_argument("--angles", type=int, default=12)
    p.add_argument("--size", type=int, default=32)

    for name in ("train", "pretrain-d", "train-adv"):
        p = sub.add_parser(name, help={"train": "MSE training",
                                       "pretrain-d": "pretrain the discriminator against a fixed generator",
                                       "train-adv": "adversarial fine-tuning"}[name])
        _common(p, "run directory (checkpoints, metrics.csv, config.txt)")
        for flag, dest, kind in _TRAIN_FLAGS:
            p.add_argument(flag, dest=dest, type=kind)
        p.add_argument("--init", dest="init_checkpoint", help="generator checkpoint to start from")
        if name != "train":
            p.add_argument("--generator", dest="init_checkpoint", help="generator checkpoint")
        p.add_argument("--disc", dest="disc_checkpoint",
                       help="pretrained discriminator checkpoint" if name == "train-adv" else argparse.SUPPRESS)

    p = sub.add_parser("eval", help="one-step prediction error with a sliding context window")
    _common(p, "optional CSV with per-video errors")
    p.add_argument("--checkpoint", help="model checkpoint (omit with --copy)")
    p.add_argument("--copy", action="store_true", help="score the copy-last-frame predictor")
    p.add_argument("--data", help="test .pgnv")
    p.add_argument("--context", type=int, default=10)

    analyses = {"decode": "ridge-decode latents from LSTM states of one or more checkpoints",
                "project": "project states onto the decoding directions",
                "extrapolate": "render predictions after moving the state along a latent direction"}
    for name, helptext in analyses.items():
        p = sub.add_parser(name, help=helptext)
        _common(p, {"decode": "decoding CSV", "project": "projection CSV", "extrapolate": "image prefix"}[name])
        p.add_argument("--checkpoint", nargs="+" if name == "decode" else None)
        p.add_argument("--probe-train")
        p.add_argument("--probe-val")
        p.add_argument("--probe-test")
        p.add_argument("--state", choices=("h", "c"), default="h")
        if name == "project":
            p.add_argument("--latents", default="z1,speed")
        if name == "extrapolate":
            p.add_argument("--component", type=int, default=1)
            p.add_argument("--deltas", default="-2,-1,0,1,2", help="shifts in units of the component's std")
            p.add_argument("--index", type=int, default=0, help="probe-test sequence to perturb")

    p = sub.add_parser("classify", help="identity classification on held-out angles")
    _common(p, "classification CSV")
    p.add_argument("--model", action="append", dest="models", metavar="NAME=CHECKPOINT")
    p.add_argument("--classes", help="classification set .pgnv")
    p.add_argument("--ks", default="2,4,6,8,10")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of every layer type")
    _common(p, "unused")
    p.add_argument("--max-coords", type=int, default=24)
    return parser


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse once to find the subcommand and --config, load it as defaults, parse again."""
    first = parser.parse_args(argv)
    if not getattr(first, "config", None):
        return first
    path = Path(first.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    sub = _subparser(parser, first.command)
    dests = {a.dest for a in sub._actions}
    pairs = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        key = _KEY_ALIASES.get(key, key)
        if not sep or key not in dests or key in ("config", "help", "command"):
            raise UsageError(f"{path}:{lineno}: unknown or malformed entry {line!r}")
        pairs[key] = value.strip()
    sub.set_defaults(**pairs)
    return parser.parse_args(argv)


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _echo(args: argparse.Namespace) -> None:
    print(f"# resolved config: {args.command}", file=sys.stderr)
    if args.command in _TRAINING:
        print(_train_config(args).to_text(), end="", file=sys.stderr)
        return
    for k, v in sorted(vars(args).items()):
        if k not in ("verbose", "command", "config"):
            print(f"{k}={'' if v is None else v}", file=sys.stderr)


_FLAG_NAMES = {"train_data": "--train", "val_data": "--val", "init_checkpoint": "--init/--generator",
               "disc_checkpoint": "--disc"}


def _need(args, *names):
    for n in names:
        flag = _FLAG_NAMES.get(n, "--" + n.replace("_", "-"))
        v = getattr(args, n, None)
        if not v:
            raise UsageError(f"missing required {flag}")
        for path in (v if isinstance(v, list) else [v]):
            if not Path(path).exists():
                raise UsageError(f"{flag}: no such file: {path}")


def _train_config(args) -> TrainConfig:
    base = TrainConfig.objects() if args.arch == "objects" else TrainConfig()
    overrides = {}
    for _, dest, kind in _TRAIN_FLAGS + (("", "init_checkpoint", str), ("", "disc_checkpoint", str)):
        v = getattr(args, dest, None)
        if v is not None:
            overrides[dest] = kind(v)
    overrides["seed"] = args.seed
    overrides["out_dir"] = args.out or "run"
    try:
        return base.replace(**overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _out(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_gen_balls(args) -> int:
    ds = DS.gen_balls_split(args.n, args.frames, args.seed, args.split)
    path = _out(args, "balls.pgnv")
    DS.write_dataset(path, ds)
    print(f"wrote {len(ds)} videos to {path} ({ds.constants})")
    return 0


def cmd_gen_objects(args) -> int:
    ds = DS.gen_object_split(args.n, args.frames, args.seed, args.split, args.size)
    path = _out(args, "objects.pgnv")
    DS.write_dataset(path, ds)
    print(f"wrote {len(ds)} videos to {path}")
    return 0


def cmd_gen_classes(args) -> int:
    cs = DS.gen_classification_set(args.ids, args.angles, args.seed, args.size)
    path = _out(args, "classes.pgnv")
    DS.write_classification_set(path, cs)
    print(f"wrote {cs.n_ids} identities x {cs.n_angles} angles to {path}")
    return 0


def cmd_train(args) -> int:
    _need(args, "train_data", "val_data")
    cfg = _train_config(args)
    fn = {"train": train_mse, "pretrain-d": pretrain_discriminator, "train-adv": train_adversarial}[args.command]
    if args.command != "train":
        _need(args, "init_checkpoint")
    res = fn(cfg)
    for split, metric in (("val", "mse"), ("val", "d_acc")):
        try:
            print(f"final {split} {metric}: {res.metrics.last(split, metric):.6g}")
        except KeyError:
            pass
    print(f"checkpoint: {res.final}")
    return 0


def cmd_eval(args) -> int:
    _need(args, "data")
    data = DS.read_dataset(args.data)
    if args.copy:
        predict, label = A.CopyLastFrame(), "copy-last-frame"
    else:
        _need(args, "checkpoint")
        predict, label = A.model_predictor(load_trained(args.checkpoint)), args.checkpoint
    err = A.eval_prediction_error(predict, data.frames, args.context)
    print(f"{label}: {err.mean:.6f} +- {err.std:.6f} over {len(data)} videos")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("video,error\n")
            fh.writelines(f"{i},{e!r}\n" for i, e in enumerate(err.per_video.tolist()))
    return 0


def _probe_sets(args) -> list[DS.VideoDataset]:
    _need(args, "probe_train", "probe_val", "probe_test")
    return [DS.read_dataset(getattr(args, f"probe_{s}"), s) for s in ("train", "val", "test")]


def cmd_decode(args) -> int:
    _need(args, "checkpoint")
    probes = _probe_sets(args)
    reports = []
    for path in args.checkpoint:
        rep = A.decode_latents(load_trained(path), probes, args.state, load_checkpoint(path).epoch)
        reports.append(rep)
        print(f"epoch {rep.epoch}: " + " ".join(f"{k}={v:.4f}" for k, v in rep.r2.items()))
    A.write_decoding_csv(_out(args, "decoding.csv"), reports)
    return 0


def cmd_project(args) -> int:
    _need(args, "checkpoint")
    probes = _probe_sets(args)
    model = load_trained(args.checkpoint)
    latents = tuple(args.latents.split(","))
    if len(latents) != 2 or any(l not in DS.LATENT_NAMES for l in latents):
        raise UsageError(f"--latents needs two of {DS.LATENT_NAMES}")
    rep = A.decode_latents(model, probes, args.state)
    proj = A.project_features(A.probe_features(model, probes[2], args.state), rep, latents)
    A.write_projection_csv(_out(args, "projection.csv"), proj)
    print(f"spread {proj.spread:.6g}")
    return 0


def cmd_extrapolate(args) -> int:
    _need(args, "checkpoint")
    probes = _probe_sets(args)
    model = load_trained(args.checkpoint)
    rep = A.decode_latents(model, probes)
    test = probes[2]
    if not 0 <= args.index < len(test):
        raise UsageError(f"--index must lie in [0, {len(test) - 1}]")
    ex = A.extrapolate_component(model, test.frames[args.index], rep, args.component, _floats(args.deltas),
                                 test.latents[args.index])
    prefix = _out(args, "extrapolation")
    A.dump_frames(ex.images, prefix.with_name(prefix.name + "_model"))
    A.dump_frames(ex.truth, prefix.with_name(prefix.name + "_truth"))
    print(f"wrote {len(ex.deltas)} model and truth frames with prefix {prefix}")
    return 0


def cmd_classify(args) -> int:
    _need(args, "classes")
    if not args.models:
        raise UsageError("give at least one --model NAME=CHECKPOINT")
    models = {}
    for spec in args.models:
        name, sep, path = spec.partition("=")
        if not sep:
            raise UsageError(f"--model expects NAME=CHECKPOINT, got {spec!r}")
        if not Path(path).exists():
            raise UsageError(f"--model {name}: no such file: {path}")
        models[name] = load_trained(path)
    try:
        ks = _ints(args.ks)
    except ValueError as exc:
        raise UsageError(f"--ks: {exc}") from exc
    cs = DS.read_classification_set(args.classes)
    reports = A.classify_transfer(models, cs, ks, args.seed)
    for r in reports:
        print(f"{r.model} k={r.k}: {r.accuracy:.4f}")
    A.write_classification_csv(_out(args, "classification.csv"), reports)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradient_suite(args.seed, args.max_coords)
    for name, r in results.items():
        print(f"{name:16s} {r.max_rel_error:.3e}")
    name, err = worst(results)
    print(f"max relative error {err:.3e} ({name})")
    return 0 if err < GRAD_TOLERANCE else 2


COMMANDS = {
    "gen-balls": cmd_gen_balls, "gen-objects": cmd_gen_objects, "gen-classes": cmd_gen_classes,
    "train": cmd_train, "pretrain-d": cmd_train, "train-adv": cmd_train, "eval": cmd_eval,
    "decode": cmd_decode, "project": cmd_project, "extrapolate": cmd_extrapolate,
    "classify": cmd_classify, "gradcheck": cmd_gradcheck,
}


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = None
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _echo(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        if args is not None and not str(exc).startswith("usage:"):
            print(_subparser(parser, args.command).format_usage(), end="", file=sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    except (TrainingDiverged, CheckpointError, DS.DatasetFormatError, ValueError, FloatingPointError,
            OSError, RuntimeError) as exc:
        print(f"pgn: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
