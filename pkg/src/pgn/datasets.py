"""Procedural video: bouncing balls and rotating blob objects with known latents.

Dataset files are little-endian::

    b"PGNV" | u32 version=1 | u32 n_seq | u32 T | u32 H | u32 W | u32 channels
    | u32 dtype (0 = f32) | 64-byte generator-constants block | f32 frames

Frames are stored as ``[n_seq, T, channels, H, W]``.  Object datasets carry a
CSV sidecar ``<stem>.latents.csv`` with header ``seq,theta0,omega,z1,z2,z3,z4``.
"""
from __future__ import annotations

import csv
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

MAGIC = b"PGNV"
VERSION = 1
CONST_BLOCK = 64
_HEADER = struct.Struct("<4s7I")
N_COMPONENTS = 4


class DatasetFormatError(ValueError):
    pass


def worker_count() -> int:
    """Data-generation workers, capped by ``PGN_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("PGN_THREADS", "1")))
    except ValueError:
        return 1


def _ordered_map(fn: Callable, items: Sequence) -> list:
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map() yields in submission order regardless of completion order
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _child_seeds(seed: int, split: int, n: int) -> list[int]:
    ss = np.random.SeedSequence([seed, split])
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(n)]


# ---------------------------------------------------------------------------
# Bouncing balls
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BallConfig:
    n_balls: int = 3
    box: float = 10.0
    radius: float = 1.2
    speed: float = 0.5      # box units per frame
    substeps: int = 10
    size: int = 30

    def constants(self) -> str:
        return (f"balls n={self.n_balls} L={self.box:g} r={self.radius:g} "
                f"v={self.speed:g} sub={self.substeps} res={self.size}")


@dataclass
class BallState:
    positions: np.ndarray   # (n, 2) as (x, y)
    velocities: np.ndarray  # (n, 2), box units per frame
    radius: float
    box: float

    def energy(self) -> float:
        return float(np.sum(self.velocities ** 2))


def _initial_balls(rng: np.random.Generator, cfg: BallConfig) -> tuple[np.ndarray, np.ndarray]:
    r, L = cfg.radius, cfg.box
    pos = np.zeros((cfg.n_balls, 2))
    for k in range(cfg.n_balls):
        while True:
            cand = rng.uniform(r, L - r, size=2)
            if all(np.linalg.norm(cand - pos[j]) > 2 * r for j in range(k)):
                pos[k] = cand
                break
    angles = rng.uniform(0, 2 * np.pi, size=cfg.n_balls)
    vel = cfg.speed * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return pos, vel


def step_balls(pos: np.ndarray, vel: np.ndarray, cfg: BallConfig) -> None:
    """Advance one frame in place with ``cfg.substeps`` Euler substeps."""
    r, L = cfg.radius, cfg.box
    dt = 1.0 / cfg.substeps
    n = len(pos)
    for _ in range(cfg.substeps):
        pos += vel * dt
        for i in range(n):
            for j in range(i + 1, n):
                d = pos[j] - pos[i]
                dist = math.hypot(d[0], d[1])
                if dist >= 2 * r or dist == 0.0:
                    continue
                nrm = d / dist
                rel = float(np.dot(vel[j] - vel[i], nrm))
                if rel < 0:
                    # equal masses: swap the normal velocity components
                    vi, vj = float(np.dot(vel[i], nrm)), float(np.dot(vel[j], nrm))
                    vel[i] += (vj - vi) * nrm
                    vel[j] += (vi - vj) * nrm
                push = 0.5 * (2 * r - dist) * nrm
                pos[i] -= push
                pos[j] += push
        for axis in range(2):
            lo = pos[:, axis] < r
            pos[lo, axis] = 2 * r - pos[lo, axis]
            vel[lo, axis] = np.abs(vel[lo, axis])
            hi = pos[:, axis] > L - r
            pos[hi, axis] = 2 * (L - r) - pos[hi, axis]
            vel[hi, axis] = -np.abs(vel[hi, axis])
        np.clip(pos, r, L - r, out=pos)


def simulate_balls(seed: int, T: int, cfg: BallConfig = BallConfig(),
                   init: tuple[np.ndarray, np.ndarray] | None = None) -> list[BallState]:
    """Trajectory of ``T`` states; ``init`` overrides the seeded (positions, velocities)."""
    if T < 2:
        raise ValueError("simulate_balls needs T >= 2")
    if init is None:
        pos, vel = _initial_balls(np.random.default_rng(seed), cfg)
    else:
        pos, vel = (np.array(a, dtype=np.float64) for a in init)
    out = [BallState(pos.copy(), vel.copy(), cfg.radius, cfg.box)]
    for _ in range(T - 1):
        step_balls(pos, vel, cfg)
        out.append(BallState(pos.copy(), vel.copy(), cfg.radius, cfg.box))
    return out


def render_balls(state: BallState, H: int = 30, W: int = 30) -> np.ndarray:
    """Frame ``(1, H, W)``: clip01 of the sum of ``max(0, 1 - (d/r)^4)`` per ball."""
    L = state.box
    ys = (np.arange(H) + 0.5) * L / H
    xs = (np.arange(W) + 0.5) * L / W
    img = np.zeros((H, W))
    for (bx, by) in state.positions:
        d2 = (xs[None, :] - bx) ** 2 + (ys[:, None] - by) ** 2
        img += np.maximum(0.0, 1.0 - (d2 / state.radius ** 2) ** 2)
    return np.clip(img, 0.0, 1.0)[None].astype(np.float32)


def _ball_video(args) -> np.ndarray:
    seed, T, cfg = args
    return np.stack([render_balls(s, cfg.size, cfg.size) for s in simulate_balls(seed, T, cfg)])


# ---------------------------------------------------------------------------
# Rotating blob objects
# ---------------------------------------------------------------------------

@dataclass
class LatentRecord:
    theta0: float
    omega: float
    z: np.ndarray = field(default_factory=lambda: np.zeros(N_COMPONENTS))

    def as_row(self) -> list[float]:
        return [self.theta0, self.omega, *map(float, self.z)]


COMPONENT_SIGMA = np.array([1.0 / k for k in range(1, N_COMPONENTS + 1)])


def sample_object_latents(seed: int | np.random.Generator) -> LatentRecord:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta0 = rng.uniform(-np.pi / 2, np.pi / 2)
    omega = rng.uniform(0.0, np.pi / 6)
    z = rng.normal(0.0, COMPONENT_SIGMA)
    return LatentRecord(float(theta0), float(omega), z)


# mean object: (x, y, z) center, (sx, sy, sz) extent, amplitude
_BASE_BLOBS = np.array([
    # head, not subject to facing attenuation
    [0.00, 0.00, 0.00, 0.55, 0.72, 0.50, 0.55],
    [-0.22, 0.20, 0.45, 0.09, 0.06, 0.09, -0.45],   # eyes
    [0.22, 0.20, 0.45, 0.09, 0.06, 0.09, -0.45],
    [0.00, -0.02, 0.55, 0.07, 0.14, 0.07, 0.50],    # nose
    [0.00, -0.33, 0.42, 0.18, 0.05, 0.06, -0.35],   # mouth
    [-0.58, 0.05, 0.12, 0.08, 0.17, 0.10, 0.55],    # ears
    [0.58, 0.05, 0.12, 0.08, 0.17, 0.10, 0.55],
    [-0.30, -0.15, 0.38, 0.12, 0.10, 0.10, 0.25],   # cheeks
    [0.30, -0.15, 0.38, 0.12, 0.10, 0.10, 0.25],
    [0.00, 0.55, 0.18, 0.45, 0.18, 0.40, 0.35],     # brow / hair line
])
N_BLOBS = len(_BASE_BLOBS)
VIEW_EXTENT = 1.2
_MIXING_SEED = 20151119


def _mixing() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed linear maps from z to center offsets, extent factors and amplitude offsets."""
    rng = np.random.default_rng(_MIXING_SEED)
    col = 1.0 / np.sqrt(np.arange(1, N_COMPONENTS + 1))
    centers = rng.normal(0, 0.06, size=(N_BLOBS, 3, N_COMPONENTS)) * col
    extents = rng.normal(0, 0.15, size=(N_BLOBS, 3, N_COMPONENTS)) * col
    amps = rng.normal(0, 0.12, size=(N_BLOBS, N_COMPONENTS)) * col
    return centers, extents, amps


_MIX = _mixing()
_NORMALS = np.zeros((N_BLOBS, 3))
_NORMALS[1:] = _BASE_BLOBS[1:, :3] / np.linalg.norm(_BASE_BLOBS[1:, :3], axis=1, keepdims=True)


def object_blobs(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centers (M,3), extents (M,3), amplitudes (M,) for component coefficients ``z``."""
    z = np.asarray(z, dtype=np.float64)
    mc, me, ma = _MIX
    centers = _BASE_BLOBS[:, :3] + mc @ z
    extents = _BASE_BLOBS[:, 3:6] * np.maximum(0.3, 1.0 + me @ z)
    amps = _BASE_BLOBS[:, 6] + ma @ z
    return centers, extents, amps


def render_object_at(z: np.ndarray, theta: float, H: int = 32, W: int = 32) -> np.ndarray:
    """Orthographic view after rotating by ``theta`` about the vertical axis."""
    centers, ext, amps = object_blobs(z)
    c, s = math.cos(theta), math.sin(theta)
    x = centers[:, 0] * c + centers[:, 2] * s
    y = centers[:, 1]
    facing = -_NORMALS[:, 0] * s + _NORMALS[:, 2] * c
    atten = np.where(np.arange(N_BLOBS) == 0, 1.0, np.maximum(0.0, facing))
    var_x = (ext[:, 0] * c) ** 2 + (ext[:, 2] * s) ** 2
    var_y = ext[:, 1] ** 2
    px = -VIEW_EXTENT + (np.arange(W) + 0.5) * 2 * VIEW_EXTENT / W
    py = VIEW_EXTENT - (np.arange(H) + 0.5) * 2 * VIEW_EXTENT / H
    gx = np.exp(-0.5 * (px[None, :] - x[:, None]) ** 2 / var_x[:, None])   # (M, W)
    gy = np.exp(-0.5 * (py[None, :] - y[:, None]) ** 2 / var_y[:, None])   # (M, H)
    img = np.einsum("m,mh,mw->hw", amps * atten, gy, gx)
    return np.clip(img, 0.0, 1.0)[None].astype(np.float32)


def render_object(rec: LatentRecord, t: int, H: int = 32, W: int = 32) -> np.ndarray:
    if t < 0:
        raise ValueError("t must be >= 0")
    return render_object_at(rec.z, rec.theta0 + rec.omega * t, H, W)


def _object_video(args) -> tuple[np.ndarray, LatentRecord]:
    seed, T, size = args
    rec = sample_object_latents(seed)
    return np.stack([render_object(rec, t, size, size) for t in range(T)]), rec


# ---------------------------------------------------------------------------
# Dataset container, IO, baselines
# ---------------------------------------------------------------------------

@dataclass
class VideoDataset:
    frames: np.ndarray                        # (n, T, C, H, W) float32 in [0, 1]
    latents: list[LatentRecord] | None = None
    split: str = ""
    constants: str = ""

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 5:
            raise ValueError(f"frames must be (n,T,C,H,W), got {self.frames.shape}")
        if self.latents is not None and len(self.latents) != len(self):
            raise ValueError("latent count differs from sequence count")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def T(self) -> int:
        return self.frames.shape[1]

    def subset(self, idx) -> "VideoDataset":
        idx = np.asarray(idx)
        lat = None if self.latents is None else [self.latents[i] for i in idx]
        return VideoDataset(self.frames[idx], lat, self.split, self.constants)

    def latent_matrix(self) -> np.ndarray:
        """``(n, 6)``: theta0, omega, z1..z4."""
        if self.latents is None:
            raise ValueError("dataset has no latent sidecar")
        return np.array([r.as_row() for r in self.latents])


LATENT_NAMES = ("angle", "speed") + tuple(f"z{k}" for k in range(1, N_COMPONENTS + 1))


def sidecar_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".latents.csv")


def write_dataset(path: str | Path, ds: VideoDataset) -> None:
    n, T, C, H, W = ds.frames.shape
    block = ds.constants.encode("ascii")[:CONST_BLOCK].ljust(CONST_BLOCK, b"\0")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, T, H, W, C, 0))
        fh.write(block)
        fh.write(ds.frames.astype("<f4").tobytes())
    if ds.latents is not None:
        with open(sidecar_path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seq", "theta0", "omega"] + [f"z{k}" for k in range(1, N_COMPONENTS + 1)])
            for i, rec in enumerate(ds.latents):
                w.writerow([i] + [repr(float(v)) for v in rec.as_row()])


def read_dataset(path: str | Path, split: str = "") -> VideoDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size + CONST_BLOCK:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, n, T, H, W, C, dtype = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION or dtype != 0:
        raise DatasetFormatError(f"{path}: unsupported version {version} / dtype {dtype}")
    off = _HEADER.size
    constants = raw[off:off + CONST_BLOCK].rstrip(b"\0").decode("ascii")
    off += CONST_BLOCK
    count = n * T * C * H * W
    if len(raw) != off + 4 * count:
        raise DatasetFormatError(f"{path}: expected {off + 4 * count} bytes, found {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(n, T, C, H, W)
    latents = None
    side = sidecar_path(path)
    if side.exists():
        with open(side, newline="") as fh:
            rows = list(csv.DictReader(fh))
        latents = [LatentRecord(float(r["theta0"]), float(r["omega"]),
                                np.array([float(r[f"z{k}"]) for k in range(1, N_COMPONENTS + 1)]))
                   for r in rows]
    return VideoDataset(frames.astype(np.float32), latents, split or path.stem, constants)


def copy_baseline(frames: np.ndarray, context: int = 10) -> tuple[float, float]:
    """Mean and std across videos of the per-frame error of repeating frame t-1.

    Targets are frames ``context .. T-1`` of each video; error is the pixel sum
    of squared differences.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[1] <= context:
        raise ValueError(f"videos have {frames.shape[1]} frames, need more than {context}")
    diff = frames[:, context:] - frames[:, context - 1:-1]
    per_video = (diff ** 2).reshape(diff.shape[0], diff.shape[1], -1).sum(axis=2).mean(axis=1)
    return float(per_video.mean()), float(per_video.std())


def baseline_from_constants(constants: str) -> float | None:
    for tok in constants.split():
        if tok.startswith("copy="):
            return float(tok[5:])
    return None


SPLITS = ("train", "val", "test")


def gen_balls_split(n: int, T: int, seed: int, split: int = 0, cfg: BallConfig = BallConfig(),
                    name: str = "") -> VideoDataset:
    seeds = _child_seeds(seed, split, n)
    frames = np.stack(_ordered_map(_ball_video, [(s, T, cfg) for s in seeds])) if n else \
        np.zeros((0, T, 1, cfg.size, cfg.size), np.float32)
    consts = cfg.constants()
    if n and T > 10:
        consts += f" copy={copy_baseline(frames)[0]:.6f}"
    return VideoDataset(frames, None, name, consts)


def gen_balls_dataset(n_train: int = 4000, n_val: int = 200, n_test: int = 200, T: int = 20,
                      seed: int = 0, cfg: BallConfig = BallConfig()) -> tuple[VideoDataset, ...]:
    return tuple(gen_balls_split(n, T, seed, k, cfg, name)
                 for k, (n, name) in enumerate(zip((n_train, n_val, n_test), SPLITS)))


def gen_object_split(n: int, T: int, seed: int, split: int = 0, size: int = 32, name: str = "") -> VideoDataset:
    seeds = _child_seeds(seed, split, n)
    results = _ordered_map(_object_video, [(s, T, size) for s in seeds])
    frames = np.stack([r[0] for r in results]) if n else np.zeros((0, T, 1, size, size), np.float32)
    consts = f"objects M={N_BLOBS} K={N_COMPONENTS} res={size} mix={_MIXING_SEED}"
    return VideoDataset(frames, [r[1] for r in results], name, consts)


def gen_object_dataset(n_train: int = 4000, n_val: int = 200, n_test: int = 200, T: int = 6,
                       seed: int = 0, size: int = 32) -> tuple[VideoDataset, ...]:
    return tuple(gen_object_split(n, T, seed, k, size, name)
                 for k, (n, name) in enumerate(zip((n_train, n_val, n_test), SPLITS)))


@dataclass
class ClassificationSet:
    images: np.ndarray      # (n_ids, n_angles, C, H, W)
    identities: np.ndarray  # (n_ids, K) component coefficients per identity
    angles: np.ndarray      # (n_angles,)

    @property
    def n_ids(self) -> int:
        return self.images.shape[0]

    @property
    def n_angles(self) -> int:
        return self.images.shape[1]


def gen_classification_set(n_ids: int = 50, n_angles: int = 12, seed: int = 0, size: int = 32) -> ClassificationSet:
    """Static views of ``n_ids`` random identities on an inclusive angle grid over [-pi/2, pi/2]."""
    angles = np.linspace(-np.pi / 2, np.pi / 2, n_angles)
    rngs = [np.random.default_rng(s) for s in _child_seeds(seed, 7, n_ids)]
    ids = np.stack([sample_object_latents(r).z for r in rngs])
    images = np.stack([[render_object_at(z, a, size, size) for a in angles] for z in ids])
    return ClassificationSet(images, ids, angles)


def write_classification_set(path: str | Path, cs: ClassificationSet) -> None:
    """Stored as a dataset whose sequences are identities and frames are angles."""
    n, A = cs.images.shape[:2]
    lat = [LatentRecord(float(cs.angles[0]), float(cs.angles[1] - cs.angles[0]), cs.identities[i]) for i in range(n)]
    write_dataset(path, VideoDataset(cs.images, lat, "classes", f"classes ids={n} angles={A}"))


def read_classification_set(path: str | Path) -> ClassificationSet:
    ds = read_dataset(path)
    if ds.latents is None:
        raise DatasetFormatError(f"{path}: classification set needs its latent sidecar")
    A = ds.T
    r0 = ds.latents[0]
    angles = r0.theta0 + r0.omega * np.arange(A)
    return ClassificationSet(ds.frames, np.stack([r.z for r in ds.latents]), angles)
