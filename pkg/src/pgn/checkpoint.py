"""Binary checkpoints (magic ``PGNC``) and the append-only metrics log.

Layout: ``b"PGNC" | u32 version | u64 header length | JSON header | payload``.
The header is canonical JSON (sorted keys) listing every array with dtype,
shape and byte offset, plus a SHA-256 of the payload, so saving a loaded
checkpoint reproduces the file byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .models import ControlModel, DiscriminatorModel, GeneratorModel
from .optim import OptimizerState
from .tensor import Tensor

MAGIC = b"PGNC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    # model name -> {"type": ..., "spec": LayerSpec dict, ...}
    models: dict[str, dict]
    params: dict[str, dict[str, np.ndarray]]
    optimizers: dict[str, OptimizerState] = field(default_factory=dict)
    rng_state: dict | None = None
    epoch: int = 0
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def model(self, name: str):
        info = self.models[name]
        spec = L.LayerSpec.from_dict(info["spec"])
        params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params[name].items()}
        kind = info["type"]
        if kind == "generator":
            return GeneratorModel(spec, params)
        if kind == "discriminator":
            return DiscriminatorModel(spec, params)
        if kind == "control":
            return ControlModel(info["variant"], spec, params, info["width"])
        raise CheckpointError(f"unknown model type {kind!r}")


def describe(model) -> dict:
    if isinstance(model, GeneratorModel):
        return {"type": "generator", "spec": model.spec.to_dict()}
    if isinstance(model, DiscriminatorModel):
        return {"type": "discriminator", "spec": model.spec.to_dict()}
    if isinstance(model, ControlModel):
        return {"type": "control", "spec": model.spec.to_dict(), "variant": model.variant, "width": model.width}
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def snapshot(models: dict[str, object], optimizers: dict[str, OptimizerState] | None = None,
             rng: np.random.Generator | None = None, epoch: int = 0, config_hash: str = "",
             meta: dict | None = None) -> Checkpoint:
    return Checkpoint(
        models={k: describe(m) for k, m in models.items()},
        params={k: {n: p.data.copy() for n, p in m.params.items()} for k, m in models.items()},
        optimizers={k: OptimizerState.from_hyper(o.hyper(), {n: a.copy() for n, a in o.slots.items()})
                    for k, o in (optimizers or {}).items()},
        rng_state=None if rng is None else _jsonable(rng.bit_generator.state),
        epoch=epoch, config_hash=config_hash, meta=dict(meta or {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def _arrays(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = []
    for m in sorted(ck.params):
        for n in sorted(ck.params[m]):
            out.append((f"param/{m}/{n}", ck.params[m][n]))
    for o in sorted(ck.optimizers):
        for n in sorted(ck.optimizers[o].slots):
            out.append((f"opt/{o}/{n}", ck.optimizers[o].slots[n]))
    return out


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    payload = io.BytesIO()
    index = []
    for name, arr in _arrays(ck):
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        data = arr.astype(dt, copy=False).tobytes()
        index.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                      "offset": payload.tell(), "nbytes": len(data)})
        payload.write(data)
    body = payload.getvalue()
    header = {
        "arrays": index,
        "models": ck.models,
        "optimizers": {k: o.hyper() for k, o in ck.optimizers.items()},
        "rng_state": ck.rng_state,
        "epoch": ck.epoch,
        "config_hash": ck.config_hash,
        "meta": ck.meta,
        "payload_sha256": hashlib.sha256(body).hexdigest(),
        "payload_bytes": len(body),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(body)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    body = raw[start:]
    if len(body) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: truncated payload ({len(body)} of {header['payload_bytes']} bytes)")
    if hashlib.sha256(body).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    params: dict[str, dict[str, np.ndarray]] = {}
    slots: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["arrays"]:
        arr = np.frombuffer(body, dtype=np.dtype(entry["dtype"]), offset=entry["offset"],
                            count=int(np.prod(entry["shape"], dtype=np.int64))).reshape(entry["shape"]).copy()
        kind, group, name = entry["name"].split("/", 2)
        (params if kind == "param" else slots).setdefault(group, {})[name] = arr
    optimizers = {k: OptimizerState.from_hyper(h, slots.get(k, {})) for k, h in header["optimizers"].items()}
    return Checkpoint(header["models"], params, optimizers, header["rng_state"], header["epoch"],
                      header["config_hash"], header["meta"])


class MetricsLog:
    """Rows of (epoch, split, metric, value), written as CSV."""

    HEADER = ("epoch", "split", "metric", "value")

    def __init__(self, path: str | Path | None = None):
        self.rows: list[tuple[int, str, str, float]] = []
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.HEADER)

    def log(self, epoch: int, split: str, metric: str, value: float) -> None:
        row = (int(epoch), split, metric, float(value))
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([row[0], row[1], row[2], repr(row[3])])

    def series(self, split: str, metric: str) -> list[tuple[int, float]]:
        return [(e, v) for e, s, m, v in self.rows if s == split and m == metric]

    def last(self, split: str, metric: str) -> float:
        vals = self.series(split, metric)
        if not vals:
            raise KeyError(f"no {split}/{metric} entries")
        return vals[-1][1]

    @classmethod
    def read(cls, path: str | Path) -> "MetricsLog":
        log = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                log.rows.append((int(r["epoch"]), r["split"], r["metric"], float(r["value"])))
        log.path = Path(path)
        return log
