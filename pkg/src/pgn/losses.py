"""Pixel-sum MSE, the adversarial pair of losses and their weighted combination."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

PROB_EPS = 1e-7
DEFAULT_LAMBDA = 0.0002


def mse_loss(pred: Tensor, target) -> Tensor:
    """Squared error summed over the pixels of a frame, averaged over the batch.

    A rank-3 input is a single ``(C, H, W)`` frame; rank 4 is a batch.
    """
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    if target.dtype != pred.dtype:
        target = Tensor(target.data.astype(pred.dtype))
    sq = T.square(T.sub(pred, target))
    if pred.ndim == 3:
        return T.tsum(sq)
    return T.mul(T.tsum(sq), 1.0 / pred.shape[0])


@dataclass
class AdversarialBatch:
    sequences: np.ndarray   # (n, t, C, H, W)
    targets: np.ndarray     # (n, C, H, W) true next frames
    generated: Tensor       # (n, C, H, W) G(x_1:t)

    def __post_init__(self):
        n = self.sequences.shape[0]
        if self.targets.shape[0] != n or self.generated.shape[0] != n:
            raise DimensionError("adversarial batch collections differ in length")
        if self.targets.shape[1:] != self.generated.shape[1:] or self.targets.shape[1:] != self.sequences.shape[2:]:
            raise DimensionError("adversarial batch frames differ in shape")

    @property
    def n(self) -> int:
        return self.sequences.shape[0]


@dataclass
class AdversarialLosses:
    discriminator: Tensor   # L_D
    generator: Tensor       # non-saturating L_G = -mean log D(G)
    saturated: bool         # some D output hit the probability clamp


def adversarial_losses_from_scores(d_real: Tensor, d_fake: Tensor, eps: float = PROB_EPS) -> AdversarialLosses:
    """L_D = -(1/2n) sum[log D(real) + log(1 - D(fake))]; L_G = -(1/n) sum log D(fake)."""
    if d_real.shape != d_fake.shape or d_real.ndim != 1:
        raise DimensionError(f"score vectors must be (n,), got {d_real.shape} and {d_fake.shape}")
    n = d_real.shape[0]
    log_real = T.log_clamped(d_real, eps)
    log_not_fake = T.log_clamped(T.sub(1.0, d_fake), eps)
    l_d = T.mul(T.add(T.tsum(log_real), T.tsum(log_not_fake)), -1.0 / (2 * n))
    l_g = T.mul(T.tsum(T.log_clamped(d_fake, eps)), -1.0 / n)
    sat = bool(np.any((d_real.data <= eps) | (d_real.data >= 1 - eps)
                      | (d_fake.data <= eps) | (d_fake.data >= 1 - eps)))
    return AdversarialLosses(l_d, l_g, sat)


def adversarial_losses(batch: AdversarialBatch, disc, eps: float = PROB_EPS) -> AdversarialLosses:
    from .models import discriminator_score

    d_real = discriminator_score(disc, batch.sequences, batch.targets)
    d_fake = discriminator_score(disc, batch.sequences, batch.generated)
    return adversarial_losses_from_scores(d_real, d_fake, eps)


def combined_generator_loss(mse: Tensor, al_g: Tensor, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """L_G(tot) = L_G(MSE) + lambda * L_G(AL)."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if lam == 0:
        return mse
    return T.add(mse, T.mul(al_g, float(lam)))


def generator_adversarial_loss(d_fake: Tensor, eps: float = PROB_EPS) -> Tensor:
    """Non-saturating L_G = -(1/n) sum log D(G(x))."""
    if d_fake.ndim != 1:
        raise DimensionError(f"score vector must be (n,), got {d_fake.shape}")
    return T.mul(T.tsum(T.log_clamped(d_fake, eps)), -1.0 / d_fake.shape[0])
