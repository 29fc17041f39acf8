"""Training loops: one-step MSE training, discriminator pretraining and the
alternating adversarial fine-tune.  All randomness flows from ``config.seed``."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers as L
from . import tensor as T
from .checkpoint import Checkpoint, MetricsLog, load_checkpoint, save_checkpoint, snapshot
from .datasets import VideoDataset, read_dataset
from .losses import (adversarial_losses_from_scores, combined_generator_loss, generator_adversarial_loss,
                     mse_loss)
from .models import (CONTROL_VARIANTS, ControlModel, DiscriminatorModel, GeneratorModel,
                     control_forward, discriminator_score, generator_predict)
from .optim import OptimizerState, optimizer_step, rmsprop, sgd_momentum, zero_grads
from .tensor import Graph, Tensor, frozen

log = logging.getLogger(__name__)

MODEL_KINDS = ("pgn",) + CONTROL_VARIANTS
SATURATION = 1e-6


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: Path | None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    model: str = "pgn"
    arch: str = "balls"
    train_data: str = ""
    val_data: str = ""
    out_dir: str = "run"
    batch_size: int = 16
    epochs: int = 50
    lam: float = 0.0002
    min_len: int = 5
    max_len: int = 15
    eval_len: int = 10
    lr: float = 0.001
    rho: float = 0.9
    eps: float = 1e-8
    d_lr: float = 0.01
    d_momentum: float = 0.5
    d_threshold: float = 0.6
    patience: int = 5
    checkpoint_every: int = 5
    max_train: int = 0          # 0 keeps every training sequence
    init_checkpoint: str = ""   # generator warm start
    disc_checkpoint: str = ""   # pretrained discriminator
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"input length range [{self.min_len}, {self.max_len}] is invalid")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        for name in ("batch_size", "eval_len", "patience", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.max_train < 0:
            raise ValueError("epochs and max_train must be non-negative")
        if not 0 < self.d_threshold <= 1:
            raise ValueError("d_threshold must lie in (0, 1]")
        return self

    @classmethod
    def objects(cls, **kw) -> "TrainConfig":
        base = dict(arch="objects", min_len=5, max_len=5, eval_len=5, epochs=150)
        base.update(kw)
        return cls(**base)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw).validate()

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def parse(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return (base or cls()).replace(**parse_pairs(text, cls))

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.parse(Path(path).read_text())


def parse_pairs(text: str, cls=TrainConfig) -> dict:
    """``key=value`` lines (``#`` starts a comment) typed against ``cls``'s fields."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(types[key], value, key)
    return out


def _coerce(kind, value: str, key: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError as exc:
        raise ValueError(f"{key}: cannot parse {value!r} as {kind}") from exc
    return value


# ---------------------------------------------------------------------------
# Models and batches
# ---------------------------------------------------------------------------

def arch_spec(cfg: TrainConfig, data: VideoDataset) -> L.LayerSpec:
    if cfg.arch == "objects":
        return L.objects_spec(size=data.frames.shape[-1])
    return L.preset(cfg.arch)


def new_model(cfg: TrainConfig, spec: L.LayerSpec):
    if cfg.model == "pgn":
        return GeneratorModel.create(spec, cfg.seed)
    return ControlModel.create(cfg.model, spec, cfg.seed)


def forward(model, inputs: np.ndarray) -> Tensor:
    if isinstance(model, GeneratorModel):
        return generator_predict(model, Tensor(inputs))
    return control_forward(model, Tensor(inputs))


@dataclass
class Batch:
    inputs: np.ndarray    # (B, L, C, H, W) sequences, or (B, C, H, W) frames for FC controls
    targets: np.ndarray   # (B, C, H, W)


def make_batch(kind: str, frames: np.ndarray, starts: np.ndarray, length: int,
               picks: np.ndarray | None = None) -> Batch:
    """Inputs and targets for one model family.

    ``frames`` is ``(B, T, C, H, W)``; ``starts`` gives each window's first
    frame.  ``picks`` selects the single frame used by static and FC controls.
    """
    rows = np.arange(frames.shape[0])
    win = starts[:, None] + np.arange(length)[None, :]
    if kind == "pgn":
        return Batch(frames[rows[:, None], win], frames[rows, starts + length])
    if kind == "ae_lstm_dynamic":
        return Batch(frames[rows[:, None], win], frames[rows, starts + length - 1])
    still = frames[rows, picks]
    if kind == "ae_lstm_static":
        return Batch(np.repeat(still[:, None], length, axis=1), still)
    return Batch(still, still)


def epoch_plan(rng: np.random.Generator, cfg: TrainConfig, n: int, T_len: int):
    """Input length, visiting order, window starts and still-frame picks for one epoch."""
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    span = T_len - length - (1 if cfg.model == "pgn" else 0)
    if span < 0:
        raise ValueError(f"videos of {T_len} frames cannot supply windows of {length}")
    order = rng.permutation(n)
    starts = rng.integers(0, span + 1, size=n)
    picks = rng.integers(0, T_len, size=n)
    return length, order, starts, picks


def eval_batch(cfg: TrainConfig, data: VideoDataset) -> Batch:
    n = len(data)
    # only next-frame prediction needs a frame beyond the window
    length = min(cfg.eval_len, data.T - (1 if cfg.model == "pgn" else 0))
    return make_batch(cfg.model, data.frames, np.zeros(n, dtype=np.int64), length,
                      np.full(n, length - 1, dtype=np.int64))


def batch_error(model, batch: Batch, chunk: int = 64) -> float:
    """Mean per-frame pixel-sum squared error, no graph."""
    total = 0.0
    for i in range(0, len(batch.targets), chunk):
        pred = forward(model, batch.inputs[i:i + chunk]).data.astype(np.float64)
        total += float(np.sum((pred - batch.targets[i:i + chunk]) ** 2))
    return total / len(batch.targets)


def _load_data(cfg: TrainConfig) -> tuple[VideoDataset, VideoDataset]:
    if not cfg.train_data or not cfg.val_data:
        raise FileNotFoundError("train_data and val_data must both be set")
    train = read_dataset(cfg.train_data, "train")
    val = read_dataset(cfg.val_data, "val")
    if cfg.max_train:
        train = train.subset(np.arange(min(cfg.max_train, len(train))))
    return train, val


def load_trained(path: str | Path):
    """The generator or control model stored in a checkpoint."""
    ck = load_checkpoint(path)
    for name in ("generator", "control"):
        if name in ck.models:
            return ck.model(name)
    raise ValueError(f"{path} holds no generator or control model")


def _ckpt_path(cfg: TrainConfig, epoch: int | str) -> Path:
    name = f"epoch_{epoch:03d}.pgnc" if isinstance(epoch, int) else f"{epoch}.pgnc"
    return Path(cfg.out_dir) / name


def _finite(model) -> bool:
    return all(np.isfinite(p.data).all() for p in model.params.values())


def _copy_params(model) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.params.items()}


def _restore(model, saved: dict[str, np.ndarray]) -> None:
    for k, p in model.params.items():
        p.data[...] = saved[k]


@dataclass
class TrainResult:
    model: object
    checkpoints: list[Path]
    metrics: MetricsLog
    final: Path


def _start(cfg: TrainConfig) -> MetricsLog:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    return MetricsLog(out / "metrics.csv")


# ---------------------------------------------------------------------------
# MSE training
# ---------------------------------------------------------------------------

def train_mse(cfg: TrainConfig) -> TrainResult:
    """Next-frame (or reconstruction) training with RMSprop and early stopping."""
    cfg.validate()
    train, val = _load_data(cfg)
    spec = arch_spec(cfg, train)
    if cfg.init_checkpoint:
        model = load_checkpoint(cfg.init_checkpoint).model("generator")
    else:
        model = new_model(cfg, spec)
    opt = rmsprop(cfg.lr, cfg.rho, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 1])
    metrics = _start(cfg)
    val_batch = eval_batch(cfg, val)
    name = "generator" if isinstance(model, GeneratorModel) else "control"
    saved: list[Path] = []

    def checkpoint(epoch, tag=None):
        path = _ckpt_path(cfg, tag or epoch)
        save_checkpoint(path, snapshot({name: model}, {name: opt}, rng, epoch, cfg.digest()))
        if tag is None:
            saved.append(path)
        return path

    best = batch_error(model, val_batch)
    metrics.log(0, "val", "mse", best)
    checkpoint(0)
    good, good_epoch, stale = _copy_params(model), 0, 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        length, order, starts, picks = epoch_plan(rng, cfg, len(train), train.T)
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            b = make_batch(cfg.model, train.frames[idx], starts[idx], length, picks[idx])
            with Graph() as g:
                loss = mse_loss(forward(model, b.inputs), b.targets)
            g.backward(loss)
            losses.append(loss.item())
            optimizer_step(model.params, opt)
            zero_grads(model.params)
        val_err = batch_error(model, val_batch) if _finite(model) else float("nan")
        metrics.log(epoch, "train", "input_len", length)
        metrics.log(epoch, "train", "mse", float(np.mean(losses)))
        metrics.log(epoch, "val", "mse", val_err)
        log.info("%s epoch %d len %d train %.4f val %.4f", cfg.model, epoch, length, np.mean(losses), val_err)
        if not np.isfinite(val_err):
            _restore(model, good)
            metrics.log(epoch, "val", "diverged", 1.0)
            path = checkpoint(good_epoch, "final")
            raise TrainingDiverged(f"validation loss is {val_err} at epoch {epoch}; "
                                   f"kept epoch {good_epoch} as {path}", path)
        good, good_epoch = _copy_params(model), epoch
        if epoch % cfg.checkpoint_every == 0:
            checkpoint(epoch)
        if val_err < best:
            best, stale = val_err, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best val %.4f)", epoch, best)
                break
    if not saved or saved[-1] != _ckpt_path(cfg, epoch):
        checkpoint(epoch)
    final = checkpoint(epoch, "final")
    return TrainResult(model, saved, metrics, final)


# ---------------------------------------------------------------------------
# Adversarial training
# ---------------------------------------------------------------------------

def discriminator_accuracy(gen: GeneratorModel, disc: DiscriminatorModel, batch: Batch,
                           chunk: int = 64) -> tuple[float, float, float]:
    """Held-out accuracy on real vs generated frames plus mean D(real), D(fake)."""
    real, fake = [], []
    for i in range(0, len(batch.targets), chunk):
        x = batch.inputs[i:i + chunk]
        g = generator_predict(gen, Tensor(x)).data
        real.append(discriminator_score(disc, Tensor(x), Tensor(batch.targets[i:i + chunk])).data)
        fake.append(discriminator_score(disc, Tensor(x), Tensor(g)).data)
    real, fake = np.concatenate(real), np.concatenate(fake)
    acc = 0.5 * (float(np.mean(real > 0.5)) + float(np.mean(fake < 0.5)))
    return acc, float(real.mean()), float(fake.mean())


def _d_step(gen, disc, d_opt, x: np.ndarray, target: np.ndarray):
    fake = generator_predict(gen, Tensor(x)).data
    with Graph() as g:
        d_real = discriminator_score(disc, Tensor(x), Tensor(target))
        d_fake = discriminator_score(disc, Tensor(x), Tensor(fake))
        losses = adversarial_losses_from_scores(d_real, d_fake)
    g.backward(losses.discriminator)
    finite = np.isfinite(losses.discriminator.item())
    if finite:
        optimizer_step(disc.params, d_opt)
    zero_grads(disc.params)
    return losses, d_real.data, d_fake.data, finite


def _gen_models(cfg: TrainConfig, train: VideoDataset) -> tuple[GeneratorModel, DiscriminatorModel]:
    if not cfg.init_checkpoint:
        raise FileNotFoundError("a generator checkpoint (init_checkpoint) is required")
    gen = load_checkpoint(cfg.init_checkpoint).model("generator")
    if cfg.disc_checkpoint:
        disc = load_checkpoint(cfg.disc_checkpoint).model("discriminator")
    else:
        disc = DiscriminatorModel.create(gen.spec, cfg.seed + 1)
    return gen, disc


def pretrain_discriminator(cfg: TrainConfig) -> TrainResult:
    """SGD-momentum training of D against a fixed generator.

    Stops once held-out accuracy reaches ``d_threshold`` or after ``epochs``;
    missing the threshold is recorded as a warning metric.
    """
    cfg = cfg.replace(model="pgn").validate()
    train, val = _load_data(cfg)
    gen, disc = _gen_models(cfg, train)
    d_opt = sgd_momentum(cfg.d_lr, cfg.d_momentum)
    rng = np.random.default_rng([cfg.seed, 2])
    metrics = _start(cfg)
    val_batch = eval_batch(cfg, val)
    acc, _, _ = discriminator_accuracy(gen, disc, val_batch)
    metrics.log(0, "val", "d_acc", acc)
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        if acc >= cfg.d_threshold:
            break
        length, order, starts, picks = epoch_plan(rng, cfg, len(train), train.T)
        l_d = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            b = make_batch("pgn", train.frames[idx], starts[idx], length)
            losses, _, _, _ = _d_step(gen, disc, d_opt, b.inputs, b.targets)
            l_d.append(losses.discriminator.item())
        acc, d_real, d_fake = discriminator_accuracy(gen, disc, val_batch)
        metrics.log(epoch, "train", "l_d", float(np.mean(l_d)))
        metrics.log(epoch, "val", "d_acc", acc)
        log.info("discriminator epoch %d l_d %.4f held-out acc %.3f", epoch, np.mean(l_d), acc)
        metrics.log(epoch, "val", "d_real", d_real)
        metrics.log(epoch, "val", "d_fake", d_fake)
    else:
        epoch = cfg.epochs
    if acc < cfg.d_threshold:
        log.warning("discriminator reached %.3f held-out accuracy, below %.2f", acc, cfg.d_threshold)
        metrics.log(epoch, "val", "d_threshold_missed", 1.0)
    path = _ckpt_path(cfg, "final")
    save_checkpoint(path, snapshot({"discriminator": disc}, {"discriminator": d_opt}, rng, epoch, cfg.digest(),
                                   {"d_acc": acc}))
    return TrainResult(disc, [path], metrics, path)


def train_adversarial(cfg: TrainConfig) -> TrainResult:
    """Alternate one D step (SGD momentum on L_D) and one G step (RMSprop on
    MSE + lam * L_G) per batch, starting from the given checkpoints."""
    cfg = cfg.replace(model="pgn").validate()
    train, val = _load_data(cfg)
    gen, disc = _gen_models(cfg, train)
    g_opt = rmsprop(cfg.lr, cfg.rho, cfg.eps)
    d_opt = sgd_momentum(cfg.d_lr, cfg.d_momentum)
    rng = np.random.default_rng([cfg.seed, 1])
    metrics = _start(cfg)
    val_batch = eval_batch(cfg, val)
    saved: list[Path] = []

    def checkpoint(epoch, tag=None):
        path = _ckpt_path(cfg, tag or epoch)
        save_checkpoint(path, snapshot({"generator": gen, "discriminator": disc},
                                       {"generator": g_opt, "discriminator": d_opt}, rng, epoch, cfg.digest()))
        if tag is None:
            saved.append(path)
        return path

    metrics.log(0, "val", "mse", batch_error(gen, val_batch))
    checkpoint(0)
    nan_events = 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        length, order, starts, picks = epoch_plan(rng, cfg, len(train), train.T)
        l_d, l_g, mse, fake_means = [], [], [], []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            b = make_batch("pgn", train.frames[idx], starts[idx], length)
            d_losses, _, d_fake, ok = _d_step(gen, disc, d_opt, b.inputs, b.targets)
            nan_events += not ok
            l_d.append(d_losses.discriminator.item())
            fake_means.append(float(d_fake.mean()))
            with frozen(disc.params.values()):
                with Graph() as g:
                    pred = generator_predict(gen, Tensor(b.inputs))
                    err = mse_loss(pred, b.targets)
                    if cfg.lam > 0:
                        al = generator_adversarial_loss(discriminator_score(disc, Tensor(b.inputs), pred))
                    else:
                        al = Tensor(np.zeros((), dtype=pred.dtype))
                    total = combined_generator_loss(err, al, cfg.lam)
                g.backward(total)
            zero_grads(disc.params)
            if np.isfinite(total.item()):
                optimizer_step(gen.params, g_opt)
            else:
                nan_events += 1
            zero_grads(gen.params)
            l_g.append(al.item())
            mse.append(err.item())
        val_err = batch_error(gen, val_batch) if _finite(gen) else float("nan")
        nan_events += not np.isfinite(val_err)
        metrics.log(epoch, "train", "l_d", float(np.mean(l_d)))
        metrics.log(epoch, "train", "l_g_al", float(np.mean(l_g)))
        metrics.log(epoch, "train", "mse", float(np.mean(mse)))
        metrics.log(epoch, "train", "d_fake", float(np.mean(fake_means)))
        metrics.log(epoch, "val", "mse", val_err)
        metrics.log(epoch, "train", "nan_events", nan_events)
        log.info("adversarial epoch %d l_d %.4f l_g %.4f mse %.4f val %.4f", epoch, np.mean(l_d), np.mean(l_g),
                 np.mean(mse), val_err)
        if float(np.mean(fake_means)) < SATURATION:
            metrics.log(epoch, "train", "saturation_event", 1.0)
        if epoch % cfg.checkpoint_every == 0:
            checkpoint(epoch)
    if not saved or saved[-1] != _ckpt_path(cfg, epoch):
        checkpoint(epoch)
    final = checkpoint(epoch, "final")
    return TrainResult(gen, saved, metrics, final)
