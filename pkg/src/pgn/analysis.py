"""Evaluations of trained models: prediction error, latent decoding, feature
projections, component extrapolation, identity classification and image dumps."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .datasets import LATENT_NAMES, COMPONENT_SIGMA, ClassificationSet, LatentRecord, VideoDataset, render_object
from .models import FEATURE_STEP, AnyModel, ControlModel, GeneratorModel, extract_features, generator_predict
from .probes import RidgeProbe, fit_probe, r2_score, ridge_predict, svm_fit, svm_predict
from .tensor import Tensor

Predictor = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Prediction error
# ---------------------------------------------------------------------------

class CopyLastFrame:
    """Predicts that the next frame repeats the last input frame."""

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return inputs[:, -1]


def model_predictor(model: GeneratorModel, chunk: int = 64) -> Predictor:
    def predict(inputs: np.ndarray) -> np.ndarray:
        out = [generator_predict(model, Tensor(inputs[i:i + chunk])).data for i in range(0, len(inputs), chunk)]
        return np.concatenate(out)
    return predict


@dataclass
class PredictionError:
    mean: float
    std: float
    per_video: np.ndarray


def eval_prediction_error(predict: Predictor, frames: np.ndarray, context: int = 10) -> PredictionError:
    """Slide a ``context``-frame window over each video and score the prediction
    of the following frame by its pixel-sum squared error.

    The per-video error is the mean over its windows; mean and std are then
    taken across videos.
    """
    frames = np.asarray(frames)
    if frames.ndim != 5:
        raise ValueError(f"frames must be (n,T,C,H,W), got {frames.shape}")
    n, T_len = frames.shape[:2]
    if T_len <= context:
        raise ValueError(f"videos have {T_len} frames; a {context}-frame context needs at least {context + 1}")
    errs = np.zeros((n, T_len - context))
    for j, t in enumerate(range(context, T_len)):
        pred = np.asarray(predict(frames[:, t - context:t]), dtype=np.float64)
        diff = pred - frames[:, t].astype(np.float64)
        errs[:, j] = (diff ** 2).reshape(n, -1).sum(axis=1)
    per_video = errs.mean(axis=1)
    return PredictionError(float(per_video.mean()), float(per_video.std()), per_video)


# ---------------------------------------------------------------------------
# Latent decoding
# ---------------------------------------------------------------------------

@dataclass
class DecodingReport:
    epoch: int
    state: str
    r2: dict[str, float]
    probes: dict[str, RidgeProbe] = field(default_factory=dict, repr=False)


def probe_features(model: AnyModel, data: VideoDataset, state: str = "h", chunk: int = 128) -> np.ndarray:
    """Feature vectors after ``FEATURE_STEP`` frames, one row per sequence."""
    x = data.frames
    if x.shape[1] < FEATURE_STEP:
        raise ValueError(f"probe videos need at least {FEATURE_STEP} frames")
    parts = [extract_features(model, x[i:i + chunk], state) for i in range(0, len(x), chunk)]
    return np.concatenate(parts).astype(np.float64)


def _targets(data: VideoDataset) -> np.ndarray:
    if data.latents is None:
        raise ValueError(f"dataset {data.split!r} has no latent sidecar")
    return data.latent_matrix()


def decode_from_features(feats: Sequence[np.ndarray], targets: Sequence[np.ndarray], epoch: int = 0,
                         state: str = "h", names: Sequence[str] = LATENT_NAMES) -> DecodingReport:
    """Per-latent ridge probes: fit on split 0, pick alpha on split 1, score on split 2."""
    (Xtr, Xva, Xte), (Ytr, Yva, Yte) = feats, targets
    r2, probes = {}, {}
    for j, name in enumerate(names):
        probe = fit_probe(Xtr, Ytr[:, j], Xva, Yva[:, j])
        probes[name] = probe
        r2[name] = r2_score(Yte[:, j], ridge_predict(probe.coef, Xte))
    return DecodingReport(epoch, state, r2, probes)


def decode_latents(model: AnyModel, probe_sets: Sequence[VideoDataset], state: str = "h",
                   epoch: int = 0) -> DecodingReport:
    """Decode every latent from the model's features on (train, val, test) probe splits."""
    if len(probe_sets) != 3:
        raise ValueError("probe_sets must be (train, val, test)")
    targets = [_targets(d) for d in probe_sets]
    feats = [probe_features(model, d, state) for d in probe_sets]
    return decode_from_features(feats, targets, epoch, state)


# ---------------------------------------------------------------------------
# Coefficient-axis projection and extrapolation
# ---------------------------------------------------------------------------

def coefficient_axis(probe: RidgeProbe) -> np.ndarray:
    w = np.asarray(probe.coef[1:], dtype=np.float64)
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise ValueError("regression coefficients have zero norm; no direction to project on")
    return w / norm


@dataclass
class Projection:
    coords: np.ndarray    # (n, 2)
    axes: np.ndarray      # (2, d) unit directions
    latents: tuple[str, str]

    @property
    def spread(self) -> float:
        """Total variance of the projected points."""
        return float(self.coords.var(axis=0).sum())


def project_features(features: np.ndarray, report: DecodingReport, latents: tuple[str, str] = ("z1", "speed"),
                     orthonormalize: bool = False) -> Projection:
    """Coordinates of ``features`` along the unit coefficient directions of two latents."""
    axes = np.stack([coefficient_axis(report.probes[name]) for name in latents])
    if orthonormalize:
        q, _ = np.linalg.qr(axes.T)
        axes = q.T * np.sign(np.sum(q.T * axes, axis=1, keepdims=True))
    return Projection(np.asarray(features, dtype=np.float64) @ axes.T, axes, tuple(latents))


def write_projection_csv(path: str | Path, proj: Projection, labels: np.ndarray | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq", proj.latents[0], proj.latents[1]] + ([] if labels is None else ["label"]))
        for i, (a, b) in enumerate(proj.coords):
            w.writerow([i, repr(float(a)), repr(float(b))] + ([] if labels is None else [repr(float(labels[i]))]))


@dataclass
class Extrapolation:
    deltas: np.ndarray
    images: np.ndarray        # (len(deltas), C, H, W) decoded from perturbed states
    truth: np.ndarray | None  # ground-truth renders at the shifted component, if a latent record was given


def extrapolate_component(model: GeneratorModel, seed_sequence: np.ndarray, report: DecodingReport,
                          component_index: int, deltas: Sequence[float],
                          record: LatentRecord | None = None) -> Extrapolation:
    """Decode ``h_5`` moved along the decoding direction of component ``z_k``.

    ``deltas`` are in units of the component's prior std: the step along the
    unit coefficient axis is scaled so the probe's prediction of ``z_k`` moves
    by ``delta * sigma_k``.  With ``record`` the ground truth is rendered at
    the next frame's angle with ``z_k`` shifted by the same amount.
    """
    K = len(COMPONENT_SIGMA)
    if not 1 <= component_index <= K:
        raise IndexError(f"component index must lie in [1, {K}], got {component_index}")
    probe = report.probes[f"z{component_index}"]
    w = np.asarray(probe.coef[1:], dtype=np.float64)
    axis = coefficient_axis(probe)
    sigma = COMPONENT_SIGMA[component_index - 1]
    seq = np.asarray(seed_sequence)[:FEATURE_STEP]
    run = model.run([Tensor(f) for f in seq])
    h = run.final.h
    images = []
    for d in deltas:
        if d == 0:
            hd = h
        else:
            step = float(d) * sigma / float(np.linalg.norm(w))
            hd = Tensor((h.data + step * axis).astype(h.dtype))
        images.append(model.decode(hd).data[0])
    truth = None
    if record is not None:
        H, W = seq.shape[-2:]
        truth = []
        for d in deltas:
            z = record.z.copy()
            z[component_index - 1] += float(d) * sigma
            truth.append(render_object(LatentRecord(record.theta0, record.omega, z), FEATURE_STEP, H, W))
        truth = np.stack(truth)
    return Extrapolation(np.asarray(deltas, dtype=np.float64), np.stack(images), truth)


# ---------------------------------------------------------------------------
# Identity classification across viewpoints
# ---------------------------------------------------------------------------

@dataclass
class ClassificationReport:
    model: str
    k: int
    accuracy: float


def training_angles(k: int, n_angles: int = 12) -> tuple[np.ndarray, np.ndarray]:
    """Indices of ``k`` evenly spread training angles and the remaining test angles."""
    if not 1 <= k <= n_angles - 1:
        raise ValueError(f"k must lie in [1, {n_angles - 1}], got {k}")
    train = np.floor(np.linspace(0, n_angles - 1, k) + 0.5).astype(int) if k > 1 else np.array([(n_angles - 1) // 2])
    test = np.setdiff1d(np.arange(n_angles), train)
    assert len(np.unique(train)) == k and not np.intersect1d(train, test).size
    return train, test


def class_features(model: AnyModel, cs: ClassificationSet, chunk: int = 120) -> np.ndarray:
    """``(n_ids, n_angles, d)`` features of every static image."""
    flat = cs.images.reshape((-1,) + cs.images.shape[2:])
    parts = [extract_features(model, flat[i:i + chunk]) for i in range(0, len(flat), chunk)]
    return np.concatenate(parts).reshape(cs.n_ids, cs.n_angles, -1).astype(np.float64)


def classify_from_features(feats: np.ndarray, k: int, seed: int = 0, name: str = "") -> ClassificationReport:
    n_ids, n_angles, d = feats.shape
    train, test = training_angles(k, n_angles)
    ids = np.arange(n_ids)
    Xtr = feats[:, train].reshape(-1, d)
    ytr = np.repeat(ids, len(train))
    Xte = feats[:, test].reshape(-1, d)
    yte = np.repeat(ids, len(test))
    svm = svm_fit(Xtr, ytr, seed=seed)
    return ClassificationReport(name, k, float(np.mean(svm_predict(svm, Xte) == yte)))


def classify_transfer(models: Mapping[str, AnyModel], cs: ClassificationSet, ks: Sequence[int] = (2, 4, 6, 8, 10),
                      seed: int = 0) -> list[ClassificationReport]:
    out = []
    for name, model in models.items():
        feats = class_features(model, cs)
        out.extend(classify_from_features(feats, k, seed, name) for k in ks)
    return out


# ---------------------------------------------------------------------------
# Reports and images
# ---------------------------------------------------------------------------

def write_decoding_csv(path: str | Path, reports: Sequence[DecodingReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "state", "latent", "r2"])
        for rep in reports:
            for name, v in rep.r2.items():
                w.writerow([rep.epoch, rep.state, name, repr(float(v))])


def write_classification_csv(path: str | Path, reports: Sequence[ClassificationReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "k", "accuracy"])
        for rep in reports:
            w.writerow([rep.model, rep.k, repr(float(rep.accuracy))])


def quantize(frame: np.ndarray) -> np.ndarray:
    """Pixels in [0, 1] to bytes, rounding half up."""
    f = np.asarray(frame, dtype=np.float64)
    if f.size and (f.min() < 0 or f.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    return np.floor(f * 255 + 0.5).astype(np.uint8)


def write_pgm(path: str | Path, frame: np.ndarray) -> None:
    img = quantize(np.asarray(frame).reshape(np.asarray(frame).shape[-2:]))
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap")
    W, H, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit graymaps are supported")
    data = raw[len(raw) - W * H:]
    return np.frombuffer(data, dtype=np.uint8).reshape(H, W).copy()


def dump_frames(frames: np.ndarray, prefix: str | Path) -> list[Path]:
    """One P5 file per frame: ``<prefix>_000.pgm``, ``<prefix>_001.pgm``, ..."""
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim == 4:
        frames = frames[:, 0]
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = prefix.with_name(f"{prefix.name}_{i:03d}.pgm")
        write_pgm(p, f)
        paths.append(p)
    return paths
