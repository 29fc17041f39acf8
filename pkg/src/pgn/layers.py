"""Encoder blocks, the LSTM cell, decoder blocks and the MLP head.

Parameters live in flat ``dict[str, Tensor]`` maps with dotted names
(``enc.conv0.W``, ``lstm.W_xi`` ...).  Forward functions take the map plus a
name prefix so the generator, discriminator and control models can share code
while keeping separate weights.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

Params = dict[str, Tensor]

GATES = ("i", "f", "c", "o")


@dataclass(frozen=True)
class ConvBlock:
    """One conv stage.

    In the encoder ``scale`` is the max-pool window applied after conv+relu;
    in the decoder it is the nearest-neighbour upsampling factor applied
    before the conv.
    """

    channels: int
    kernel: int
    pad: int
    scale: int = 2
    stride: int = 1


@dataclass(frozen=True)
class LayerSpec:
    frame_shape: tuple[int, int, int]
    encoder: tuple[ConvBlock, ...]
    encoder_fc: int | None
    hidden: int
    decoder_fc: bool
    decoder_map: tuple[int, int, int]
    decoder: tuple[ConvBlock, ...]
    mlp_hidden: tuple[int, int] = (512, 256)
    out_pad: int = 0     # symmetric zero border added after the last decoder conv

    def encoder_map_shape(self) -> tuple[int, int, int]:
        c, h, w = self.frame_shape
        for blk in self.encoder:
            h = T.conv_output_size(h, blk.kernel, blk.stride, blk.pad)
            w = T.conv_output_size(w, blk.kernel, blk.stride, blk.pad)
            c = blk.channels
            if blk.scale > h or blk.scale > w:
                raise DimensionError(f"pool window {blk.scale} exceeds map ({h},{w})")
            h, w = h // blk.scale, w // blk.scale
        return c, h, w

    @property
    def conv_features(self) -> int:
        return int(np.prod(self.encoder_map_shape()))

    @property
    def features(self) -> int:
        """Length of the vector handed to the recurrent layer."""
        return self.encoder_fc if self.encoder_fc else self.conv_features

    def decoder_output_shape(self) -> tuple[int, int, int]:
        c, h, w = self.decoder_map
        for blk in self.decoder:
            h, w = h * blk.scale, w * blk.scale
            h = T.conv_output_size(h, blk.kernel, blk.stride, blk.pad)
            w = T.conv_output_size(w, blk.kernel, blk.stride, blk.pad)
            c = blk.channels
        return c, h + 2 * self.out_pad, w + 2 * self.out_pad

    def validate(self) -> "LayerSpec":
        self.encoder_map_shape()
        if not self.decoder_fc and int(np.prod(self.decoder_map)) != self.hidden:
            raise DimensionError(f"without a decoder FC the hidden size {self.hidden} must equal "
                                 f"the decoder map size {int(np.prod(self.decoder_map))}")
        out = self.decoder_output_shape()
        if out != tuple(self.frame_shape):
            raise DimensionError(f"decoder produces {out}, frames are {tuple(self.frame_shape)}")
        return self

    def with_hidden(self, hidden: int) -> "LayerSpec":
        return replace(self, hidden=hidden)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            frame_shape=tuple(d["frame_shape"]),
            encoder=tuple(ConvBlock(**b) for b in d["encoder"]),
            encoder_fc=d["encoder_fc"],
            hidden=d["hidden"],
            decoder_fc=d["decoder_fc"],
            decoder_map=tuple(d["decoder_map"]),
            decoder=tuple(ConvBlock(**b) for b in d["decoder"]),
            mlp_hidden=tuple(d["mlp_hidden"]),
            out_pad=d.get("out_pad", 0),
        )


def balls_spec() -> LayerSpec:
    """30x30 frames; the 32x7x7 conv map feeds 1568 LSTM units with no FC layers."""
    return LayerSpec(
        frame_shape=(1, 30, 30),
        encoder=(ConvBlock(16, 5, 2), ConvBlock(32, 5, 2)),
        encoder_fc=None,
        hidden=1568,
        decoder_fc=False,
        decoder_map=(32, 7, 7),
        # 7 -> 14 -> 28, then a one-pixel zero border gives 30
        decoder=(ConvBlock(16, 5, 2), ConvBlock(1, 5, 2)),
        out_pad=1,
    ).validate()


def objects_spec(size: int = 32, hidden: int = 1024) -> LayerSpec:
    if size % 4:
        raise ValueError("object frames must be a multiple of 4 pixels")
    q = size // 4
    return LayerSpec(
        frame_shape=(1, size, size),
        encoder=(ConvBlock(16, 5, 2), ConvBlock(32, 5, 2)),
        encoder_fc=hidden,
        hidden=hidden,
        decoder_fc=True,
        decoder_map=(32, q, q),
        decoder=(ConvBlock(16, 5, 2), ConvBlock(1, 5, 2)),
    ).validate()


def preset(name: str) -> LayerSpec:
    if name == "balls":
        return balls_spec()
    if name == "objects":
        return objects_spec()
    raise ValueError(f"unknown architecture preset {name!r}")


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

@dataclass
class LSTMParams:
    W_xi: Tensor
    W_hi: Tensor
    W_xf: Tensor
    W_hf: Tensor
    W_xc: Tensor
    W_hc: Tensor
    W_xo: Tensor
    W_ho: Tensor
    b_i: Tensor
    b_f: Tensor
    b_c: Tensor
    b_o: Tensor

    @property
    def hidden(self) -> int:
        return self.W_hi.shape[0]

    @property
    def inputs(self) -> int:
        return self.W_xi.shape[1]

    @classmethod
    def from_params(cls, params: Params, prefix: str = "lstm.") -> "LSTMParams":
        return cls(**{f.name: params[prefix + f.name] for f in cls.__dataclass_fields__.values()})

    def validate(self) -> None:
        H, In = self.hidden, self.inputs
        for g in GATES:
            wx, wh, b = getattr(self, f"W_x{g}"), getattr(self, f"W_h{g}"), getattr(self, f"b_{g}")
            if wx.shape != (H, In):
                raise DimensionError(f"W_x{g} is {wx.shape}, expected ({H}, {In})")
            if wh.shape != (H, H):
                raise DimensionError(f"W_h{g} is {wh.shape}, expected ({H}, {H})")
            if b.shape != (H,):
                raise DimensionError(f"b_{g} is {b.shape}, expected ({H},)")

    def stacked(self) -> tuple[Tensor, Tensor, Tensor]:
        """Gate blocks concatenated in i, f, c, o order for the fused kernel."""
        Wx = T.concat([getattr(self, f"W_x{g}") for g in GATES], axis=0)
        Wh = T.concat([getattr(self, f"W_h{g}") for g in GATES], axis=0)
        b = T.concat([getattr(self, f"b_{g}") for g in GATES], axis=0)
        return Wx, Wh, b


@dataclass
class LSTMState:
    h: Tensor
    c: Tensor


def zero_state(hidden: int, batch: int | None = None, dtype=np.float32) -> LSTMState:
    shape = (hidden,) if batch is None else (batch, hidden)
    return LSTMState(Tensor(np.zeros(shape, dtype)), Tensor(np.zeros(shape, dtype)))


def lstm_step(x_t: Tensor, prev: LSTMState, p: LSTMParams) -> LSTMState:
    """One update of the peephole-free LSTM, built from primitive ops."""
    if x_t.shape[-1] != p.inputs:
        raise DimensionError(f"lstm_step: input axis -1 has {x_t.shape[-1]}, cell expects {p.inputs}")
    if prev.h.shape[-1] != p.hidden:
        raise DimensionError(f"lstm_step: state axis -1 has {prev.h.shape[-1]}, cell has {p.hidden}")

    def pre(g):
        return T.add(T.affine(x_t, getattr(p, f"W_x{g}"), getattr(p, f"b_{g}")),
                     T.linear(prev.h, getattr(p, f"W_h{g}")))

    i = T.logistic(pre("i"))
    f = T.logistic(pre("f"))
    o = T.logistic(pre("o"))
    c = T.add(T.mul(f, prev.c), T.mul(i, T.tanh(pre("c"))))
    h = T.mul(o, T.tanh(c))
    return LSTMState(h, c)


@dataclass
class LSTMRun:
    final: LSTMState
    states: list[LSTMState]
    hs: Tensor  # (B, T, H)
    cs: Tensor


def lstm_run(xs: Sequence[Tensor] | Tensor, p: LSTMParams, init: LSTMState | None = None) -> LSTMRun:
    """Fold :func:`lstm_step` over a sequence.

    ``xs`` is either a list of per-step inputs (each ``(In,)`` or ``(B, In)``)
    or a tensor ``(B, T, In)``.  ``states[t]`` is the state after consuming
    ``t + 1`` inputs.
    """
    unbatched = False
    if isinstance(xs, Tensor):
        seq = xs
    else:
        xs = list(xs)
        if not xs:
            raise ValueError("lstm_run: empty input sequence")
        unbatched = xs[0].ndim == 1
        seq = T.stack(xs, axis=1 if not unbatched else 0)
        if unbatched:
            seq = T.reshape(seq, (1,) + seq.shape)
    if seq.ndim != 3 or seq.shape[1] == 0:
        raise ValueError(f"lstm_run: expected a non-empty (B,T,In) sequence, got {seq.shape}")
    if seq.shape[2] != p.inputs:
        raise DimensionError(f"lstm_run: input axis 2 has {seq.shape[2]}, cell expects {p.inputs}")
    Wx, Wh, b = p.stacked()
    h0 = c0 = None
    if init is not None:
        h0, c0 = init.h, init.c
        if h0.ndim == 1:
            h0, c0 = T.reshape(h0, (1, -1)), T.reshape(c0, (1, -1))
    hs, cs = T.lstm_sequence(seq, Wx, Wh, b, h0, c0)
    states = []
    for t in range(seq.shape[1]):
        h, c = hs[:, t], cs[:, t]
        if unbatched:
            h, c = h[0], c[0]
        states.append(LSTMState(h, c))
    return LSTMRun(states[-1], states, hs, cs)


# ---------------------------------------------------------------------------
# Conv encoder / decoder, MLP head
# ---------------------------------------------------------------------------

def _batched(frame: Tensor, shape: tuple[int, int, int], op: str) -> tuple[Tensor, bool]:
    if frame.ndim == 3:
        frame, single = T.reshape(frame, (1,) + frame.shape), True
    elif frame.ndim == 4:
        single = False
    else:
        raise DimensionError(f"{op}: expected (C,H,W) or (N,C,H,W), got {frame.shape}")
    if tuple(frame.shape[1:]) != tuple(shape):
        raise DimensionError(f"{op}: frame axes {frame.shape[1:]} differ from configured {tuple(shape)}")
    return frame, single


def encoder_forward(frame: Tensor, spec: LayerSpec, params: Params, prefix: str = "enc.",
                    fc: bool = True) -> Tensor:
    """conv -> relu -> pool per block, flatten, then the optional FC+relu."""
    x, single = _batched(frame, spec.frame_shape, "encoder_forward")
    for k, blk in enumerate(spec.encoder):
        x = T.conv2d(x, params[f"{prefix}conv{k}.W"], params[f"{prefix}conv{k}.b"], blk.stride, blk.pad)
        x = T.relu(x)
        x = T.maxpool2d(x, blk.scale)
    x = T.reshape(x, (x.shape[0], -1))
    if fc and spec.encoder_fc:
        x = T.relu(T.affine(x, params[f"{prefix}fc.W"], params[f"{prefix}fc.b"]))
    return x[0] if single else x


def decoder_forward(h: Tensor, spec: LayerSpec, params: Params, include_fc: bool | None = None,
                    prefix: str = "dec.") -> Tensor:
    """Map a hidden vector ``(H,)`` or ``(B, H)`` to frames ``(B, C, H, W)``.

    The last block's rectification is subsumed by the final clip to [0, 1].
    """
    include_fc = spec.decoder_fc if include_fc is None else include_fc
    x = h if h.ndim == 2 else T.reshape(h, (1, -1))
    if include_fc:
        x = T.affine(x, params[f"{prefix}fc.W"], params[f"{prefix}fc.b"])
    if x.shape[1] != int(np.prod(spec.decoder_map)):
        raise DimensionError(f"decoder_forward: vector axis 1 has {x.shape[1]}, map "
                             f"{spec.decoder_map} needs {int(np.prod(spec.decoder_map))}")
    x = T.reshape(x, (x.shape[0],) + tuple(spec.decoder_map))
    last = len(spec.decoder) - 1
    for k, blk in enumerate(spec.decoder):
        x = T.upsample_nearest(x, blk.scale)
        x = T.conv2d(x, params[f"{prefix}conv{k}.W"], params[f"{prefix}conv{k}.b"], blk.stride, blk.pad)
        x = T.clip01(T.pad2d(x, spec.out_pad)) if k == last else T.relu(x)
    return x


def mlp_head(features: Tensor, params: Params, prefix: str = "mlp.") -> Tensor:
    """affine->relu twice, then affine->logistic; returns one probability per row."""
    x = features if features.ndim == 2 else T.reshape(features, (1, -1))
    x = T.relu(T.affine(x, params[f"{prefix}fc0.W"], params[f"{prefix}fc0.b"]))
    x = T.relu(T.affine(x, params[f"{prefix}fc1.W"], params[f"{prefix}fc1.b"]))
    x = T.logistic(T.affine(x, params[f"{prefix}fc2.W"], params[f"{prefix}fc2.b"]))
    x = T.reshape(x, (x.shape[0],))
    return x if features.ndim == 2 else x[0]


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamShape:
    name: str
    shape: tuple[int, ...]
    fan_in: int = 0
    fan_out: int = 0
    fill: float | None = None  # constant init (biases)


def encoder_shapes(spec: LayerSpec, prefix: str = "enc.", fc_out: int | None = None) -> list[ParamShape]:
    out = []
    c = spec.frame_shape[0]
    for k, blk in enumerate(spec.encoder):
        kk = blk.kernel * blk.kernel
        out.append(ParamShape(f"{prefix}conv{k}.W", (blk.channels, c, blk.kernel, blk.kernel),
                              c * kk, blk.channels * kk))
        out.append(ParamShape(f"{prefix}conv{k}.b", (blk.channels,), fill=0.0))
        c = blk.channels
    fc_out = spec.encoder_fc if fc_out is None else fc_out
    if fc_out:
        n = spec.conv_features
        out.append(ParamShape(f"{prefix}fc.W", (fc_out, n), n, fc_out))
        out.append(ParamShape(f"{prefix}fc.b", (fc_out,), fill=0.0))
    return out


def lstm_shapes(inputs: int, hidden: int, prefix: str = "lstm.", forget_bias: float = 1.0) -> list[ParamShape]:
    out = []
    for g in GATES:
        out.append(ParamShape(f"{prefix}W_x{g}", (hidden, inputs), inputs, hidden))
        out.append(ParamShape(f"{prefix}W_h{g}", (hidden, hidden), hidden, hidden))
    for g in GATES:
        out.append(ParamShape(f"{prefix}b_{g}", (hidden,), fill=forget_bias if g == "f" else 0.0))
    return out


def dense_shapes(prefix: str, n_in: int, n_out: int) -> list[ParamShape]:
    return [ParamShape(f"{prefix}W", (n_out, n_in), n_in, n_out), ParamShape(f"{prefix}b", (n_out,), fill=0.0)]


def decoder_shapes(spec: LayerSpec, prefix: str = "dec.", n_in: int | None = None) -> list[ParamShape]:
    out = []
    if spec.decoder_fc:
        out += dense_shapes(f"{prefix}fc.", spec.hidden if n_in is None else n_in, int(np.prod(spec.decoder_map)))
    c = spec.decoder_map[0]
    for k, blk in enumerate(spec.decoder):
        kk = blk.kernel * blk.kernel
        out.append(ParamShape(f"{prefix}conv{k}.W", (blk.channels, c, blk.kernel, blk.kernel),
                              c * kk, blk.channels * kk))
        out.append(ParamShape(f"{prefix}conv{k}.b", (blk.channels,), fill=0.0))
        c = blk.channels
    return out


def mlp_shapes(n_in: int, widths: tuple[int, int], prefix: str = "mlp.") -> list[ParamShape]:
    a, b = widths
    return dense_shapes(f"{prefix}fc0.", n_in, a) + dense_shapes(f"{prefix}fc1.", a, b) + \
        dense_shapes(f"{prefix}fc2.", b, 1)


def generator_shapes(spec: LayerSpec) -> list[ParamShape]:
    return encoder_shapes(spec) + lstm_shapes(spec.features, spec.hidden) + decoder_shapes(spec)


def materialize(shapes: Sequence[ParamShape], seed: int, dtype=np.float32) -> Params:
    """Glorot-uniform weights, constant biases; draws happen in list order."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for ps in shapes:
        if ps.fill is not None:
            arr = np.full(ps.shape, ps.fill, dtype=np.float64)
        else:
            a = np.sqrt(6.0 / (ps.fan_in + ps.fan_out))
            arr = rng.uniform(-a, a, size=ps.shape)
        params[ps.name] = Tensor(arr.astype(dtype), requires_grad=True, name=ps.name)
    return params


def init_params(spec: LayerSpec, seed: int, dtype=np.float32) -> Params:
    """Generator parameters: encoder, LSTM (forget bias 1), decoder."""
    return materialize(generator_shapes(spec), seed, dtype)


def glorot_bound(ps: ParamShape) -> float:
    return float(np.sqrt(6.0 / (ps.fan_in + ps.fan_out)))


def count_params(params: Params, prefix: str = "") -> int:
    return int(sum(p.size for k, p in params.items() if k.startswith(prefix)))


def cast_params(params: Params, dtype) -> Params:
    return {k: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, name=k) for k, p in params.items()}
