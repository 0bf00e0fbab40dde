"""Adversarial and cycle-consistency objectives.

The adversarial term for a domain is the minimax value

    E[log D(real)] + E[log(1 - D(fake))]

with expectations taken as means over the batch and all discriminator output
positions. Discriminators produce logits; the sigmoid lives here (as
logsigmoid) for numerical stability. The combined objective is

    total = adv_ori + lambda_adv * adv_photo + lambda_cyc * cyc

where adv_ori judges painting-domain realism of photo->painting fakes,
adv_photo judges photo-domain realism of painting->photo fakes, and cyc is the
two-direction L1 reconstruction error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F

from ..errors import EmptyBatch, ShapeError
from .nets import TranslatorPair

if TYPE_CHECKING:
    from .train import TrainConfig

ADV_MODES = ("log", "lsgan")


@dataclass
class LossTerms:
    """Differentiable loss tensors for one batch."""

    adv_ori: torch.Tensor
    adv_photo: torch.Tensor
    cyc: torch.Tensor
    total: torch.Tensor


@dataclass(frozen=True)
class LossReport:
    """Float snapshot of one step's losses.

    total is recomputed from the reported terms in float64, so
    total == adv_ori + lambda_adv * adv_photo + lambda_cyc * cyc holds exactly
    for every report.
    """

    step: int
    adv_ori: float
    adv_photo: float
    cyc: float
    total: float


def _check_batch(batch: torch.Tensor, name: str) -> None:
    if batch.ndim != 4:
        raise ShapeError(f"{name} must be (B, C, H, W), got {tuple(batch.shape)}")
    if batch.shape[0] == 0:
        raise EmptyBatch(f"{name} has zero images")


def adversarial_loss(
    discriminator: torch.nn.Module,
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
) -> torch.Tensor:
    """Log-form minimax value the discriminator maximizes (scalar tensor)."""
    _check_batch(real_batch, "real_batch")
    _check_batch(fake_batch, "fake_batch")
    real_term = F.logsigmoid(discriminator(real_batch)).mean()
    fake_term = F.logsigmoid(-discriminator(fake_batch)).mean()
    return real_term + fake_term


def least_squares_generator_loss(
    discriminator: torch.nn.Module, fake_batch: torch.Tensor
) -> torch.Tensor:
    """LSGAN generator-side penalty: E[(D(fake) - 1)^2] on raw outputs."""
    _check_batch(fake_batch, "fake_batch")
    return ((discriminator(fake_batch) - 1.0) ** 2).mean()


def least_squares_discriminator_loss(
    discriminator: torch.nn.Module,
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
) -> torch.Tensor:
    """LSGAN discriminator-side penalty: E[(D(real) - 1)^2] + E[D(fake)^2]."""
    _check_batch(real_batch, "real_batch")
    _check_batch(fake_batch, "fake_batch")
    real_term = ((discriminator(real_batch) - 1.0) ** 2).mean()
    fake_term = (discriminator(fake_batch) ** 2).mean()
    return real_term + fake_term


def cycle_consistency_loss(
    pair: TranslatorPair,
    ori_batch: torch.Tensor,
    photo_batch: torch.Tensor,
) -> torch.Tensor:
    """Two-direction L1 reconstruction error (mean over pixels, summed over
    directions). Identity generators give exactly zero."""
    _check_batch(ori_batch, "ori_batch")
    _check_batch(photo_batch, "photo_batch")
    rec_ori = pair.gen_photo_to_ori(pair.gen_ori_to_photo(ori_batch))
    rec_photo = pair.gen_ori_to_photo(pair.gen_photo_to_ori(photo_batch))
    if rec_ori.shape != ori_batch.shape:
        raise ShapeError(
            f"reconstruction shape {tuple(rec_ori.shape)} does not match "
            f"input {tuple(ori_batch.shape)}"
        )
    if rec_photo.shape != photo_batch.shape:
        raise ShapeError(
            f"reconstruction shape {tuple(rec_photo.shape)} does not match "
            f"input {tuple(photo_batch.shape)}"
        )
    return (rec_ori - ori_batch).abs().mean() + (rec_photo - photo_batch).abs().mean()


def compute_losses(
    pair: TranslatorPair,
    ori_batch: torch.Tensor,
    photo_batch: torch.Tensor,
    config: "TrainConfig",
) -> LossTerms:
    """Generator-side loss terms for one unpaired batch.

    In the default "log" mode the adversarial terms are the minimax values
    above (the generators descend them, the discriminators ascend them). In
    "lsgan" mode the adversarial terms are the least-squares generator
    penalties instead; the total composition is identical in both modes.
    """
    _check_batch(ori_batch, "ori_batch")
    _check_batch(photo_batch, "photo_batch")
    fake_ori = pair.gen_photo_to_ori(photo_batch)
    fake_photo = pair.gen_ori_to_photo(ori_batch)

    if config.adv_mode == "log":
        adv_ori = adversarial_loss(pair.disc_ori, ori_batch, fake_ori)
        adv_photo = adversarial_loss(pair.disc_photo, photo_batch, fake_photo)
    elif config.adv_mode == "lsgan":
        adv_ori = least_squares_generator_loss(pair.disc_ori, fake_ori)
        adv_photo = least_squares_generator_loss(pair.disc_photo, fake_photo)
    else:
        raise ValueError(f"unknown adv_mode {config.adv_mode!r}")

    cyc = cycle_consistency_loss(pair, ori_batch, photo_batch)
    total = adv_ori + config.lambda_adv * adv_photo + config.lambda_cyc * cyc
    return LossTerms(adv_ori=adv_ori, adv_photo=adv_photo, cyc=cyc, total=total)


def loss_report(step: int, terms: LossTerms, config: "TrainConfig") -> LossReport:
    """Freeze loss tensors into floats; total recomposed in float64."""
    adv_ori = float(terms.adv_ori.detach())
    adv_photo = float(terms.adv_photo.detach())
    cyc = float(terms.cyc.detach())
    total = adv_ori + config.lambda_adv * adv_photo + config.lambda_cyc * cyc
    return LossReport(step=step, adv_ori=adv_ori, adv_photo=adv_photo,
                      cyc=cyc, total=total)
