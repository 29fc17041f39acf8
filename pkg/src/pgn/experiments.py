"""End-to-end pipelines behind the acceptance suite.

Every stage writes into its own directory together with a ``stage.json``
stamp.  The stamp records a key built from the stage parameters and a digest
of the package sources the stage depends on, so an unchanged stage is read
back instead of recomputed.  Run ``python3 -m pgn.experiments STAGE`` to
precompute a stage outside the test suite.
"""
from __future__ import annotations

import argparse
import ast
import contextlib
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

from . import analysis as A
from . import datasets as DS
from .checkpoint import load_checkpoint
from .models import CONTROL_VARIANTS
from .training import (TrainConfig, batch_error, discriminator_accuracy, eval_batch, load_trained,
                       pretrain_discriminator, train_adversarial, train_mse)

log = logging.getLogger(__name__)

PKG_DIR = Path(__file__).resolve().parent
DEFAULT_ROOT = Path(os.environ.get("PGN_EXPERIMENTS", Path.home() / ".cache" / "pgn-experiments"))

TRAINING_SOURCES = ("tensor", "layers", "models", "losses", "optim", "datasets", "checkpoint", "training")
ANALYSIS_SOURCES = TRAINING_SOURCES + ("probes", "analysis")

LAM_HIGH = 0.02
CLASS_KS = (2, 4, 6, 8, 10)
AE_CONTROLS = CONTROL_VARIANTS


def _code_only(source: str) -> str:
    """AST dump without docstrings, so comment and docstring edits keep cached results."""
    tree = ast.parse(source)
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return ast.dump(tree)


def source_digest(modules=ANALYSIS_SOURCES) -> str:
    h = hashlib.sha256()
    for name in sorted(modules):
        h.update(name.encode())
        h.update(_code_only((PKG_DIR / f"{name}.py").read_text()).encode())
    return h.hexdigest()[:16]


def cached(out: Path, params: dict, modules, compute: Callable[[Path], dict]) -> dict:
    """Return the stored result when the stamp key matches, else run ``compute``."""
    out = Path(out)
    key = hashlib.sha256(json.dumps({"params": params, "src": source_digest(modules)},
                                    sort_keys=True).encode()).hexdigest()[:16]
    stamp = out / "stage.json"
    if stamp.exists():
        saved = json.loads(stamp.read_text())
        if saved.get("key") == key:
            return saved["result"]
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    result = compute(out)
    result["seconds"] = time.time() - t0
    stamp.write_text(json.dumps({"key": key, "params": params, "result": result}, indent=1, sort_keys=True))
    return result


# ---------------------------------------------------------------------------
# Bouncing balls
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BallsPlan:
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 200
    frames: int = 20
    data_seed: int = 11
    epochs: int = 50
    seed: int = 0


def balls_data(root: Path, plan: BallsPlan = BallsPlan()) -> dict:
    def compute(out):
        splits = DS.gen_balls_dataset(plan.n_train, plan.n_val, plan.n_test, plan.frames, plan.data_seed)
        for d in splits:
            DS.write_dataset(out / f"{d.split}.pgnv", d)
        test = splits[2]
        return {"constants": test.constants, "recorded_baseline": DS.baseline_from_constants(test.constants)}
    params = {k: getattr(plan, k) for k in ("n_train", "n_val", "n_test", "frames", "data_seed")}
    return cached(Path(root) / "balls" / "data", params, ("datasets",), compute)


def balls_pipeline(root: Path = DEFAULT_ROOT, plan: BallsPlan = BallsPlan()) -> dict:
    """Generate, train PGN(MSE) with MSE only, and score one-step error against the copy baseline."""
    root = Path(root)
    data = balls_data(root, plan)
    ddir = root / "balls" / "data"

    def compute(out):
        cfg = TrainConfig(train_data=str(ddir / "train.pgnv"), val_data=str(ddir / "val.pgnv"),
                          out_dir=str(out), epochs=plan.epochs, patience=plan.epochs, seed=plan.seed)
        t0 = time.time()
        res = train_mse(cfg)
        train_seconds = time.time() - t0
        test = DS.read_dataset(ddir / "test.pgnv")
        copy = A.eval_prediction_error(A.CopyLastFrame(), test.frames)
        model = A.eval_prediction_error(A.model_predictor(res.model), test.frames)
        epochs = res.metrics.series("val", "mse")[-1][0]
        return {"copy_mean": copy.mean, "copy_std": copy.std, "pgn_mean": model.mean, "pgn_std": model.std,
                "ratio": model.mean / copy.mean, "epochs": epochs, "train_seconds": train_seconds,
                "recorded_baseline": data["recorded_baseline"]}
    return cached(root / "balls" / "pgn", asdict(plan), TRAINING_SOURCES + ("analysis",), compute)


# ---------------------------------------------------------------------------
# Objects
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectsPlan:
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 200
    n_probe: tuple[int, int, int] = (1000, 200, 200)
    size: int = 32
    data_seed: int = 21
    probe_seed: int = 22
    class_seed: int = 23
    epochs: int = 150
    high_epochs: int = 5
    d_epochs: int = 30
    adv_epochs: int = 10
    seed: int = 0


MODEL_FIELDS = ("n_train", "n_val", "n_test", "size", "data_seed", "epochs", "seed")
ADV_FIELDS = MODEL_FIELDS + ("high_epochs", "d_epochs", "adv_epochs")


def _plan_params(plan: ObjectsPlan, *names) -> dict:
    return {k: getattr(plan, k) for k in names}


def objects_data(root: Path, plan: ObjectsPlan = ObjectsPlan()) -> Path:
    """Training, probe and classification sets; returns the data directory."""
    out = Path(root) / "objects" / "data"

    def compute(out):
        for prefix, sizes, seed in (("", (plan.n_train, plan.n_val, plan.n_test), plan.data_seed),
                                    ("probe_", plan.n_probe, plan.probe_seed)):
            for d in DS.gen_object_dataset(*sizes, T=6, seed=seed, size=plan.size):
                DS.write_dataset(out / f"{prefix}{d.split}.pgnv", d)
        DS.write_classification_set(out / "classes.pgnv", DS.gen_classification_set(seed=plan.class_seed,
                                                                                     size=plan.size))
        return {}
    cached(out, _plan_params(plan, "n_train", "n_val", "n_test", "n_probe", "size", "data_seed", "probe_seed",
                             "class_seed"), ("datasets",), compute)
    return out


def _objects_cfg(root: Path, plan: ObjectsPlan, out: Path, **kw) -> TrainConfig:
    ddir = Path(root) / "objects" / "data"
    return TrainConfig.objects(train_data=str(ddir / "train.pgnv"), val_data=str(ddir / "val.pgnv"),
                               out_dir=str(out), seed=plan.seed, **kw)


def objects_model(root: Path, kind: str, plan: ObjectsPlan = ObjectsPlan()) -> dict:
    """MSE training of PGN or one of the autoencoder controls on the object videos."""
    objects_data(root, plan)

    # the dynamic control sees all six frames and reconstructs the last
    lengths = dict(min_len=6, max_len=6, eval_len=6) if kind == "ae_lstm_dynamic" else {}

    def compute(out):
        res = train_mse(_objects_cfg(root, plan, out, model=kind, epochs=plan.epochs, **lengths))
        val = res.metrics.series("val", "mse")
        return {"final": str(res.final), "epochs": val[-1][0], "val_mse": val[-1][1],
                "best_val_mse": min(v for _, v in val),
                "checkpoints": [str(p) for p in res.checkpoints]}
    params = {"kind": kind, **lengths, **_plan_params(plan, *MODEL_FIELDS)}
    return cached(Path(root) / "objects" / kind, params, TRAINING_SOURCES, compute)


def adversarial_pipeline(root: Path = DEFAULT_ROOT, plan: ObjectsPlan = ObjectsPlan()) -> dict:
    """Warm start from PGN(MSE), high-lambda generator, discriminator pretraining, fine-tuning."""
    root = Path(root)
    warm = objects_model(root, "pgn", plan)["final"]

    def compute(out):
        high = train_adversarial(_objects_cfg(root, plan, out / "high", init_checkpoint=warm, lam=LAM_HIGH,
                                              epochs=plan.high_epochs))
        disc = pretrain_discriminator(_objects_cfg(root, plan, out / "disc", init_checkpoint=str(high.final),
                                                   epochs=plan.d_epochs))
        adv = train_adversarial(_objects_cfg(root, plan, out / "adv", init_checkpoint=warm,
                                             disc_checkpoint=str(disc.final), epochs=plan.adv_epochs))
        test = DS.read_dataset(root / "objects" / "data" / "test.pgnv", "test")
        cfg = _objects_cfg(root, plan, out)
        batch = eval_batch(cfg, test)
        d_acc, d_real, d_fake = discriminator_accuracy(high.model, disc.model, batch)
        warm_mse = batch_error(load_trained(warm), batch)
        adv_mse = batch_error(adv.model, batch)
        return {"d_acc_test": d_acc, "d_real_test": d_real, "d_fake_test": d_fake,
                "d_acc_val": disc.metrics.last("val", "d_acc"),
                "d_epochs": disc.metrics.series("val", "d_acc")[-1][0],
                "warm_mse_test": warm_mse, "adv_mse_test": adv_mse, "mse_ratio": adv_mse / warm_mse,
                "nan_events": adv.metrics.last("train", "nan_events"),
                "high_nan_events": high.metrics.last("train", "nan_events"),
                "saturation_events": len(adv.metrics.series("train", "saturation_event")),
                "high_final": str(high.final), "disc_final": str(disc.final), "adv_final": str(adv.final)}
    return cached(root / "objects" / "adversarial", _plan_params(plan, *ADV_FIELDS), TRAINING_SOURCES, compute)


def _probe_sets(root: Path) -> list[DS.VideoDataset]:
    ddir = Path(root) / "objects" / "data"
    return [DS.read_dataset(ddir / f"probe_{s}.pgnv", s) for s in DS.SPLITS]


def decoding_pipeline(root: Path = DEFAULT_ROOT, plan: ObjectsPlan = ObjectsPlan()) -> dict:
    """r^2 of every latent across PGN(MSE) checkpoints plus the AE-LSTM-dynamic control."""
    root = Path(root)
    pgn = objects_model(root, "pgn", plan)
    dyn = objects_model(root, CONTROL_VARIANTS[0], plan)

    def compute(out):
        probes = _probe_sets(root)
        reports, models = [], []
        for path in pgn["checkpoints"]:
            ck = load_checkpoint(path)
            models.append(ck.model("generator"))
            reports.extend(A.decode_latents(models[-1], probes, state, ck.epoch) for state in ("h", "c"))
        A.write_decoding_csv(out / "decoding.csv", reports)
        first, last = reports[0], reports[-2]
        spreads = []
        for model, rep in ((models[0], first), (models[-1], last)):
            proj = A.project_features(A.probe_features(model, probes[2]), rep, orthonormalize=True)
            A.write_projection_csv(out / f"projection_{rep.epoch:03d}.csv", proj)
            spreads.append(proj.spread)
        dyn_rep = A.decode_latents(load_trained(dyn["final"]), probes, "h")
        series: dict[str, dict[int, dict]] = {}
        for rep in reports:
            series.setdefault(rep.state, {})[rep.epoch] = rep.r2
        return {"series": series, "epoch0": first.r2, "final": last.r2, "final_epoch": last.epoch,
                "dynamic": dyn_rep.r2, "spread": spreads}
    params = {"plan": _plan_params(plan, *MODEL_FIELDS, "n_probe", "probe_seed"), "pgn": pgn, "dyn": dyn}
    return cached(root / "objects" / "decoding", params, ANALYSIS_SOURCES, compute)


CLASS_MODELS = ("pgn", "pgn_al") + AE_CONTROLS


def classification_pipeline(root: Path = DEFAULT_ROOT, plan: ObjectsPlan = ObjectsPlan()) -> dict:
    """Angle-disjoint identity classification for PGN(MSE), PGN(AL/MSE) and the four controls."""
    root = Path(root)
    paths = {kind: objects_model(root, kind, plan)["final"] for kind in ("pgn",) + AE_CONTROLS}
    paths["pgn_al"] = adversarial_pipeline(root, plan)["adv_final"]

    def compute(out):
        cs = DS.read_classification_set(root / "objects" / "data" / "classes.pgnv")
        models = {name: load_trained(paths[name]) for name in CLASS_MODELS}
        reports = A.classify_transfer(models, cs, CLASS_KS, seed=plan.seed)
        A.write_classification_csv(out / "classification.csv", reports)
        acc: dict[str, dict[int, float]] = {}
        for r in reports:
            acc.setdefault(r.model, {})[r.k] = r.accuracy
        return {"accuracy": acc}
    return cached(root / "objects" / "classification", {"plan": _plan_params(plan, *ADV_FIELDS, "class_seed"),
                                                        "paths": paths},
                  ANALYSIS_SOURCES, compute)


# ---------------------------------------------------------------------------
# Reproducibility
# ---------------------------------------------------------------------------

def cli_round(workdir: Path, seed: int = 5, epochs: int = 3) -> dict[str, bytes]:
    """gen -> train -> eval through the command line; returns the bytes of every output."""
    from .cli import run
    w = Path(workdir)
    w.mkdir(parents=True, exist_ok=True)
    steps = [["gen-balls", "--n", "24", "--split", "0", "--seed", str(seed), "-o", str(w / "train.pgnv")],
             ["gen-balls", "--n", "8", "--split", "1", "--seed", str(seed), "-o", str(w / "val.pgnv")],
             ["gen-balls", "--n", "8", "--split", "2", "--seed", str(seed), "-o", str(w / "test.pgnv")],
             ["train", "--train", str(w / "train.pgnv"), "--val", str(w / "val.pgnv"), "--epochs", str(epochs),
              "--batch-size", "8", "--seed", str(seed), "-o", str(w / "run")],
             ["eval", "--checkpoint", str(w / "run" / "final.pgnc"), "--data", str(w / "test.pgnv"),
              "-o", str(w / "eval.csv")]]
    sink = io.StringIO()
    for argv in steps:
        with contextlib.redirect_stdout(sink), contextlib.redirect_stderr(sink):
            code = run(argv)
        if code != 0:
            raise RuntimeError(f"pgn {' '.join(argv)} exited {code}:\n{sink.getvalue()}")
    return {p.relative_to(w).as_posix(): p.read_bytes() for p in sorted(w.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

STAGES = {
    "balls": lambda root: balls_pipeline(root),
    "objects-models": lambda root: {k: objects_model(root, k) for k in ("pgn",) + AE_CONTROLS},
    "adversarial": lambda root: adversarial_pipeline(root),
    "decoding": lambda root: decoding_pipeline(root),
    "classification": lambda root: classification_pipeline(root),
}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python3 -m pgn.experiments")
    p.add_argument("stages", nargs="+", choices=sorted(STAGES) + ["all"])
    p.add_argument("--root", default=str(DEFAULT_ROOT))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    names = list(STAGES) if "all" in args.stages else args.stages
    for name in names:
        result = STAGES[name](Path(args.root))
        print(name, json.dumps(result, indent=1, sort_keys=True, default=str), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
