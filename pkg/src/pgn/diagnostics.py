"""Finite-difference gradient checks over every op family and both full networks."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import layers as L
from . import tensor as T
from .layers import ConvBlock, LayerSpec
from .losses import adversarial_losses_from_scores, mse_loss
from .models import DiscriminatorModel, GeneratorModel, discriminator_score, generator_predict
from .tensor import GradCheckResult, Tensor, check_gradients

GRAD_TOLERANCE = 1e-4
JITTER = 0.1


def tiny_spec() -> LayerSpec:
    """8x8 frames, one conv stage each way, encoder and decoder FC layers, a zero border on output."""
    return LayerSpec(
        frame_shape=(1, 8, 8),
        encoder=(ConvBlock(2, 3, 1),),
        encoder_fc=6,
        hidden=5,
        decoder_fc=True,
        decoder_map=(2, 4, 4),
        decoder=(ConvBlock(1, 3, 0),),
        mlp_hidden=(4, 3),
        out_pad=1,
    ).validate()


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _probe(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    """Reduce an output to a scalar with fixed random weights so no gradient is trivially uniform."""
    w = rng.normal(size=out.shape)
    return lambda y: T.tsum(T.mul(y, w))


def _case(build: Callable[[], Tensor], params: dict[str, Tensor], rng, max_coords) -> GradCheckResult:
    reduce = _probe(build(), rng)
    return check_gradients(lambda: reduce(build()), params, max_coords=max_coords, seed=int(rng.integers(1 << 31)))


def _jitter(params: dict[str, Tensor], rng, scale: float = JITTER) -> None:
    """Move off the zero-bias point, where relu units can sit exactly on their kink."""
    for p in params.values():
        p.data += rng.normal(0.0, scale, p.shape)


def gradient_suite(seed: int = 0, max_coords: int | None = 24) -> dict[str, GradCheckResult]:
    """Gradient check of each op family and the full generator and discriminator graphs (float64)."""
    rng = np.random.default_rng(seed)
    out: dict[str, GradCheckResult] = {}

    x, W, b = _leaf(rng, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5)
    out["affine"] = _case(lambda: T.affine(x, W, b), {"x": x, "W": W, "b": b}, rng, max_coords)

    for kind in ("relu", "tanh", "logistic"):
        a = _leaf(rng, 4, 6)
        out[kind] = _case(lambda a=a, kind=kind: T.activation(a, kind), {"a": a}, rng, max_coords)
    c = Tensor(rng.uniform(-0.5, 1.5, (4, 6)), requires_grad=True)
    out["clip01"] = _case(lambda: T.clip01(c), {"a": c}, rng, max_coords)

    img, K, kb = _leaf(rng, 2, 2, 7, 7), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
    out["conv2d"] = _case(lambda: T.conv2d(img, K, kb, stride=1, pad=1), {"x": img, "K": K, "b": kb}, rng, max_coords)
    out["conv2d_stride2"] = _case(lambda: T.conv2d(img, K, kb, stride=2, pad=2),
                                  {"x": img, "K": K, "b": kb}, rng, max_coords)
    m = _leaf(rng, 2, 3, 6, 6)
    out["maxpool2d"] = _case(lambda: T.maxpool2d(m, 2), {"x": m}, rng, max_coords)
    u = _leaf(rng, 2, 2, 3, 3)
    out["upsample"] = _case(lambda: T.upsample_nearest(u, 2), {"x": u}, rng, max_coords)

    lp = L.materialize(L.lstm_shapes(4, 3), int(rng.integers(1 << 31)), np.float64)
    for p in lp.values():
        p.data += rng.normal(0, 0.1, p.shape)
    xs = _leaf(rng, 2, 4, 4)
    h0, c0 = _leaf(rng, 2, 3, scale=0.5), _leaf(rng, 2, 3, scale=0.5)

    def step():
        s = L.lstm_step(xs[:, 0], L.LSTMState(h0, c0), L.LSTMParams.from_params(lp))
        return T.concat([s.h, s.c], axis=1)
    out["lstm_step"] = _case(step, {**lp, "x": xs, "h0": h0, "c0": c0}, rng, max_coords)

    def fused():
        Wx, Wh, bb = L.LSTMParams.from_params(lp).stacked()
        hs, cs = T.lstm_sequence(xs, Wx, Wh, bb, h0, c0)
        return T.concat([hs, cs], axis=2)
    out["lstm_sequence"] = _case(fused, {**lp, "x": xs, "h0": h0, "c0": c0}, rng, max_coords)

    pred, target = _leaf(rng, 3, 1, 4, 4), rng.normal(size=(3, 1, 4, 4))
    out["mse_loss"] = check_gradients(lambda: mse_loss(pred, target), {"pred": pred})
    d_real = Tensor(rng.uniform(0.05, 0.95, 5), requires_grad=True)
    d_fake = Tensor(rng.uniform(0.05, 0.95, 5), requires_grad=True)
    ps = {"d_real": d_real, "d_fake": d_fake}
    out["loss_d"] = check_gradients(lambda: adversarial_losses_from_scores(d_real, d_fake).discriminator, ps)
    out["loss_g"] = check_gradients(lambda: adversarial_losses_from_scores(d_real, d_fake).generator, ps)

    spec = tiny_spec()
    frames = rng.uniform(0, 1, (2, 3) + spec.frame_shape)
    nxt = rng.uniform(0, 1, (2,) + spec.frame_shape)
    gen = GeneratorModel.create(spec, int(rng.integers(1 << 31)), np.float64)
    _jitter(gen.params, rng)
    # lift decoder biases so the clip sits in its linear range
    gen.params["dec.conv0.b"].data += 0.5
    out["generator"] = check_gradients(lambda: mse_loss(generator_predict(gen, Tensor(frames)), nxt),
                                       gen.params, max_coords=max_coords, seed=seed)
    disc = DiscriminatorModel.create(spec, int(rng.integers(1 << 31)), np.float64)
    _jitter(disc.params, rng)
    # With one shared context the real and fake terms nearly cancel in the
    # context-path gradient, leaving it at round-off level; use two contexts.
    other = rng.uniform(0, 1, frames.shape)
    out["discriminator"] = check_gradients(
        lambda: adversarial_losses_from_scores(discriminator_score(disc, Tensor(frames), Tensor(nxt)),
                                               discriminator_score(disc, Tensor(other), Tensor(1 - nxt))).discriminator,
        disc.params, max_coords=max_coords, seed=seed)
    out["pad2d"] = _case(lambda: T.pad2d(u, 1), {"x": u}, rng, max_coords)
    return out


def worst(results: dict[str, GradCheckResult]) -> tuple[str, float]:
    name = max(results, key=lambda k: results[k].max_rel_error)
    return name, results[name].max_rel_error
