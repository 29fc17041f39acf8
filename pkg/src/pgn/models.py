"""Generator (PGN), conditional discriminator and autoencoder controls."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from . import layers as L
from . import tensor as T
from .layers import LayerSpec, LSTMParams, Params
from .tensor import DimensionError, Tensor

CONTROL_VARIANTS = ("ae_lstm_dynamic", "ae_lstm_static", "ae_fc_weights", "ae_fc_units")
FEATURE_STEP = 5


def _seq(frames, spec: LayerSpec) -> tuple[Tensor, bool]:
    """Normalize input to a (B, T, C, H, W) tensor; lists are one unbatched sequence."""
    single = False
    if isinstance(frames, (list, tuple)):
        if not frames:
            raise ValueError("empty frame sequence")
        frames = T.stack([T.as_tensor(f) for f in frames], axis=0)
        frames = T.reshape(frames, (1,) + frames.shape)
        single = True
    frames = T.as_tensor(frames)
    if frames.ndim != 5:
        raise DimensionError(f"expected frames (B,T,C,H,W), got {frames.shape}")
    if frames.shape[1] < 1:
        raise ValueError("empty frame sequence")
    if tuple(frames.shape[2:]) != tuple(spec.frame_shape):
        raise DimensionError(f"frame axes {frames.shape[2:]} differ from configured {spec.frame_shape}")
    return frames, single


def encode_sequence(frames: Tensor, spec: LayerSpec, params: Params, enc: str = "enc.",
                    lstm: str = "lstm.") -> L.LSTMRun:
    B, Tn = frames.shape[:2]
    flat = T.reshape(frames, (B * Tn,) + tuple(spec.frame_shape))
    feats = L.encoder_forward(flat, spec, params, prefix=enc)
    feats = T.reshape(feats, (B, Tn, feats.shape[-1]))
    return L.lstm_run(feats, LSTMParams.from_params(params, lstm))


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

@dataclass
class GeneratorModel:
    spec: LayerSpec
    params: Params

    @classmethod
    def create(cls, spec: LayerSpec, seed: int, dtype=np.float32) -> "GeneratorModel":
        return cls(spec, L.init_params(spec, seed, dtype))

    def run(self, frames) -> L.LSTMRun:
        seq, _ = _seq(frames, self.spec)
        return encode_sequence(seq, self.spec, self.params)

    def decode(self, h: Tensor) -> Tensor:
        return L.decoder_forward(h, self.spec, self.params)

    def lstm_param_count(self) -> int:
        return L.count_params(self.params, "lstm.")


def generator_predict(model: GeneratorModel, frames) -> Tensor:
    """Predicted next frame G(x_1:t); ``(B, C, H, W)`` or ``(C, H, W)`` for a list input."""
    seq, single = _seq(frames, model.spec)
    run = encode_sequence(seq, model.spec, model.params)
    out = model.decode(run.final.h)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Discriminator
# ---------------------------------------------------------------------------

def discriminator_shapes(spec: LayerSpec) -> list[L.ParamShape]:
    return (L.encoder_shapes(spec, "seq.enc.")
            + L.lstm_shapes(spec.features, spec.hidden, "seq.lstm.")
            + L.encoder_shapes(spec, "prop.enc.", fc_out=0)
            + L.dense_shapes("prop.fc.", spec.conv_features, spec.hidden)
            + L.mlp_shapes(2 * spec.hidden, spec.mlp_hidden))


@dataclass
class DiscriminatorModel:
    """Sequence encoder+LSTM, proposal CNN+FC, and an MLP over their concatenation.

    The proposal encoder reuses the generator's conv topology with its own
    weights; its FC output has the LSTM's width.
    """

    spec: LayerSpec
    params: Params

    @classmethod
    def create(cls, spec: LayerSpec, seed: int, dtype=np.float32) -> "DiscriminatorModel":
        return cls(spec, L.materialize(discriminator_shapes(spec), seed, dtype))


def discriminator_score(model: DiscriminatorModel, frames, proposal) -> Tensor:
    """D(proposal, x_1:t) in (0, 1), one value per sequence."""
    seq, single = _seq(frames, model.spec)
    proposal = T.as_tensor(proposal)
    if proposal.ndim == 3:
        proposal = T.reshape(proposal, (1,) + proposal.shape)
    if proposal.shape[0] != seq.shape[0]:
        raise DimensionError(f"proposal batch axis {proposal.shape[0]} != sequence batch axis {seq.shape[0]}")
    h = encode_sequence(seq, model.spec, model.params, "seq.enc.", "seq.lstm.").final.h
    p = L.encoder_forward(proposal, model.spec, model.params, prefix="prop.enc.", fc=False)
    p = T.tanh(T.affine(p, model.params["prop.fc.W"], model.params["prop.fc.b"]))
    score = L.mlp_head(T.concat([h, p], axis=1), model.params)
    return score[0] if single else score


# ---------------------------------------------------------------------------
# Autoencoder controls
# ---------------------------------------------------------------------------

def lstm_weight_count(inputs: int, hidden: int) -> int:
    return 4 * (inputs * hidden + hidden * hidden + hidden)


def fc_width_matching_weights(inputs: int, hidden: int) -> int:
    """Width of a single ``inputs -> width`` FC layer whose parameter count
    (weights + biases) matches the LSTM's."""
    return int(round(lstm_weight_count(inputs, hidden) / (inputs + 1)))


@dataclass
class ControlModel:
    variant: str
    spec: LayerSpec
    params: Params
    width: int

    @property
    def is_lstm(self) -> bool:
        return self.variant in ("ae_lstm_dynamic", "ae_lstm_static")

    @classmethod
    def create(cls, variant: str, spec: LayerSpec, seed: int, dtype=np.float32) -> "ControlModel":
        if variant not in CONTROL_VARIANTS:
            raise ValueError(f"unknown control variant {variant!r}")
        if variant.startswith("ae_lstm"):
            return cls(variant, spec, L.init_params(spec, seed, dtype), spec.hidden)
        if not spec.decoder_fc:
            raise ValueError("FC controls need an architecture with a decoder FC layer")
        width = spec.hidden if variant == "ae_fc_units" else fc_width_matching_weights(spec.features, spec.hidden)
        shapes = (L.encoder_shapes(spec) + L.dense_shapes("bottleneck.", spec.features, width)
                  + L.decoder_shapes(spec, n_in=width))
        return cls(variant, spec, L.materialize(shapes, seed, dtype), width)

    def bottleneck_param_count(self) -> int:
        return L.count_params(self.params, "bottleneck.") if not self.is_lstm else L.count_params(self.params, "lstm.")

    def as_generator(self) -> GeneratorModel:
        if not self.is_lstm:
            raise TypeError(f"{self.variant} has no recurrent core")
        return GeneratorModel(self.spec, self.params)


def _fc_code(model: ControlModel, frames: Tensor) -> Tensor:
    feats = L.encoder_forward(frames, model.spec, model.params)
    return T.tanh(T.affine(feats, model.params["bottleneck.W"], model.params["bottleneck.b"]))


def control_forward(model: ControlModel, inputs) -> Tensor:
    """Reconstruction of the last input frame (LSTM variants) or of each frame (FC variants)."""
    x = T.as_tensor(inputs) if not isinstance(inputs, (list, tuple)) else inputs
    if model.is_lstm:
        if isinstance(x, Tensor) and x.ndim != 5:
            raise ValueError(f"{model.variant} takes frame sequences (B,T,C,H,W), got {x.shape}")
        return generator_predict(model.as_generator(), x)
    if not isinstance(x, Tensor) or x.ndim != 4:
        raise ValueError(f"{model.variant} takes single frames (B,C,H,W)")
    code = _fc_code(model, x)
    return L.decoder_forward(code, model.spec, model.params)


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

AnyModel = Union[GeneratorModel, ControlModel]


def extract_features(model: AnyModel, inputs, state: str = "h", step: int = FEATURE_STEP) -> np.ndarray:
    """Internal representation used by the probes.

    Recurrent models: the LSTM ``h`` (or ``c``) after ``step`` frames.  Static
    frames ``(B, C, H, W)`` are shown as a ``step``-frame still video.  FC
    controls: the bottleneck activation of single frames.
    """
    x = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs)
    if isinstance(model, ControlModel) and not model.is_lstm:
        if x.ndim == 5:
            x = x[:, step - 1]
        if x.ndim != 4:
            raise ValueError(f"expected frames (B,C,H,W), got {x.shape}")
        return _fc_code(model, Tensor(x)).data
    gen = model.as_generator() if isinstance(model, ControlModel) else model
    if x.ndim == 4:
        x = np.repeat(x[:, None], step, axis=1)
    if x.ndim != 5:
        raise ValueError(f"expected frames (B,T,C,H,W) or (B,C,H,W), got {x.shape}")
    if x.shape[1] < step:
        raise ValueError(f"sequence has {x.shape[1]} frames, features need {step}")
    run = gen.run(Tensor(x[:, :step]))
    if state not in ("h", "c"):
        raise ValueError(f"state must be 'h' or 'c', got {state!r}")
    return (run.hs if state == "h" else run.cs).data[:, step - 1]


def in_chunks(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Apply ``fn`` over the leading axis in fixed-size chunks (no graph recorded)."""
    if T.active_graph() is not None:
        raise RuntimeError("in_chunks is for evaluation; call it outside a Graph")
    parts = [fn(x[i:i + chunk]) for i in range(0, len(x), chunk)]
    return np.concatenate(parts, axis=0)
