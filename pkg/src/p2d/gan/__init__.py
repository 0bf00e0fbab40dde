"""Unpaired painting/photo translation: networks, losses, training loop."""

from .nets import Discriminator, Generator, TranslatorPair
from .losses import LossReport, LossTerms, adversarial_loss, compute_losses, cycle_consistency_loss, loss_report
# The training entry point stays at p2d.gan.train.train so the submodule
# name is not shadowed by a function re-export.
from .train import (
    TrainConfig,
    TrainResult,
    build_translator_pair,
    load_checkpoint,
    save_checkpoint,
    translate_to_pseudo_real,
)

__all__ = [
    "Discriminator",
    "Generator",
    "TranslatorPair",
    "LossReport",
    "LossTerms",
    "adversarial_loss",
    "compute_losses",
    "cycle_consistency_loss",
    "loss_report",
    "TrainConfig",
    "TrainResult",
    "build_translator_pair",
    "load_checkpoint",
    "save_checkpoint",
    "translate_to_pseudo_real",
]
