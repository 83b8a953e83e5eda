"""The five training losses and their weighted combinations.

Conventions: squared-error losses reduce with the mean over all elements so
the weight defaults stay resolution independent. GAN losses take raw logits
and evaluate -log sigmoid(.) through softplus, never materializing the
sigmoid, so large-magnitude logits stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1e-3  # generator GAN term
    lambda2: float = 1e-1  # background reconstruction term
    lambda3: float = 1e-2  # discriminator GAN term

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0.0:
            raise ValueError("loss weights must be nonnegative")


def _check_same_shape(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def real_diffusion_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between injected and predicted noise."""
    _check_same_shape(eps_true, eps_pred)
    return ((eps_pred - eps_true) ** 2).mean()


def fake_diffusion_loss(eps_fresh: torch.Tensor, eps_pred_assistant: torch.Tensor) -> torch.Tensor:
    """Same form as `real_diffusion_loss`; the target is the fresh noise used
    to re-corrupt the one-step fake."""
    return real_diffusion_loss(eps_fresh, eps_pred_assistant)


def generator_gan_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: mean of -log sigmoid(logit)."""
    return F.softplus(-fake_logits).mean()


def discriminator_gan_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Mean of -log sigmoid(real) plus mean of -log(1 - sigmoid(fake))."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def background_loss(x0: torch.Tensor, x0_hat: torch.Tensor, hole_mask: torch.Tensor) -> torch.Tensor:
    """Squared error restricted to pixels outside the hole (hole_mask == 1
    marks the region to inpaint), reduced by the mean over all elements."""
    _check_same_shape(x0, x0_hat)
    keep = 1.0 - hole_mask.to(x0.dtype)
    return (((x0 - x0_hat) * keep) ** 2).mean()


def combine_generator(l_gan: torch.Tensor, l_bg: torch.Tensor, w: LossWeights) -> torch.Tensor:
    return w.lambda1 * l_gan + w.lambda2 * l_bg


def combine_discriminator(l_fake_diff: torch.Tensor, l_d: torch.Tensor, w: LossWeights) -> torch.Tensor:
    return l_fake_diff + w.lambda3 * l_d
