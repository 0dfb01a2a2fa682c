"""Scalar training objectives: hinge adversarial losses, the latent
information-conservation penalty, and its weight schedule.

All losses are written in minimized form and average over the batch when
given batched scores, so learning rates and the conservation weight are
batch-size independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

LAMBDA_Z_NUMERATOR = 5.0
LAMBDA_Z_NUMERATOR_LFW = 15.0


def lambda_z_value(n: int, d: int, preset: str = "default") -> float:
    """Information-conservation weight: 5/(n*d), or 15/(n*d) for the lfw preset."""
    if n < 1 or d < 1:
        raise ValueError(f"n and d must be >= 1, got n={n}, d={d}")
    if preset == "default":
        return LAMBDA_Z_NUMERATOR / (n * d)
    if preset == "lfw":
        return LAMBDA_Z_NUMERATOR_LFW / (n * d)
    raise ValueError(f"unknown preset {preset!r}")


@dataclass(frozen=True)
class LossWeights:
    lambda_z: float

    def __post_init__(self):
        if self.lambda_z < 0:
            raise ValueError(f"lambda_z must be >= 0, got {self.lambda_z}")

    @classmethod
    def auto(cls, n: int, d: int, preset: str = "default") -> "LossWeights":
        return cls(lambda_z=lambda_z_value(n, d, preset))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else torch.as_tensor(x, dtype=torch.float32)


def discriminator_hinge_loss(score_real, score_fake) -> Tensor:
    """Minimized hinge loss: -[min(0, -1 + real) + min(0, -1 - fake)],
    averaged over the batch."""
    real = _as_tensor(score_real)
    fake = _as_tensor(score_fake)
    return -(torch.clamp(real - 1, max=0).mean() + torch.clamp(-fake - 1, max=0).mean())


def generator_adversarial_loss(score_fake) -> Tensor:
    """Minimized form of maximizing the critic's score on the redrawn image."""
    return -_as_tensor(score_fake).mean()


def information_conservation_loss(z_hat, z) -> Tensor:
    """Squared Euclidean distance between the recovered and injected codes,
    averaged over the batch."""
    z_hat = _as_tensor(z_hat)
    z = _as_tensor(z)
    if z_hat.shape != z.shape:
        raise ValueError(f"latent shapes differ: {tuple(z_hat.shape)} vs {tuple(z.shape)}")
    sq = (z_hat - z).pow(2).sum(dim=-1)
    return sq.mean()


def generator_total_loss(score_fake, z_hat, z, weights: LossWeights) -> Tensor:
    """Adversarial term plus the weighted information-conservation term."""
    return (generator_adversarial_loss(score_fake)
            + weights.lambda_z * information_conservation_loss(z_hat, z))
