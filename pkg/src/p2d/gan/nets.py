"""Residual generators and patch discriminators for unpaired translation.

Generators are residual: output = clamp(input + body(input), 0, 1), so a
zero-initialized final layer gives an exact identity map, and images stay in
the unit range by construction. Discriminators emit raw logit maps; the loss
functions apply the sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ..errors import ShapeError

ACTIVATIONS = ("relu", "leaky", "tanh")


def _activation(name: str) -> nn.Module:
    if name == "relu":
        return nn.ReLU(inplace=False)
    if name == "leaky":
        return nn.LeakyReLU(0.2, inplace=False)
    if name == "tanh":
        return nn.Tanh()
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def _init_conv(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, activation: str, use_norm: bool):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(channels, channels, 3, padding=1)]
        if use_norm:
            layers.append(nn.InstanceNorm2d(channels))
        layers.append(_activation(activation))
        layers.append(nn.Conv2d(channels, channels, 3, padding=1))
        if use_norm:
            layers.append(nn.InstanceNorm2d(channels))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class Generator(nn.Module):
    """Image-to-image residual generator; preserves spatial size and range."""

    def __init__(
        self,
        in_channels: int = 3,
        base_channels: int = 32,
        n_res_blocks: int = 2,
        activation: str = "relu",
        downsample: bool = True,
        use_norm: bool = True,
        zero_init_last: bool = False,
        clamp_output: bool = True,
    ):
        super().__init__()
        self.clamp_output = clamp_output
        act = lambda: _activation(activation)  # noqa: E731

        layers: list[nn.Module] = [
            nn.Conv2d(in_channels, base_channels, 3, padding=1)]
        if use_norm:
            layers.append(nn.InstanceNorm2d(base_channels))
        layers.append(act())

        width = base_channels
        if downsample:
            width = base_channels * 2
            layers.append(nn.Conv2d(base_channels, width, 3, stride=2, padding=1))
            if use_norm:
                layers.append(nn.InstanceNorm2d(width))
            layers.append(act())

        for _ in range(n_res_blocks):
            layers.append(ResidualBlock(width, activation, use_norm))

        if downsample:
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers.append(nn.Conv2d(width, base_channels, 3, padding=1))
            if use_norm:
                layers.append(nn.InstanceNorm2d(base_channels))
            layers.append(act())

        final = nn.Conv2d(base_channels, in_channels, 3, padding=1)
        layers.append(final)
        self.body = nn.Sequential(*layers)

        _init_conv(self.body)
        if zero_init_last:
            nn.init.zeros_(final.weight)
            nn.init.zeros_(final.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ShapeError(f"generator expects (B, C, H, W), got {tuple(x.shape)}")
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ShapeError(
                f"generator needs even spatial dims, got {tuple(x.shape[-2:])}"
            )
        out = x + self.body(x)
        if self.clamp_output:
            out = out.clamp(0.0, 1.0)
        return out


class Discriminator(nn.Module):
    """Patch discriminator over logits; output is a (B, 1, h, w) score map."""

    def __init__(
        self,
        in_channels: int = 3,
        base_channels: int = 32,
        n_layers: int = 2,
        activation: str = "leaky",
        use_norm: bool = True,
    ):
        super().__init__()
        act = lambda: _activation(activation)  # noqa: E731
        layers: list[nn.Module] = [
            nn.Conv2d(in_channels, base_channels, 3, stride=2, padding=1), act()]
        width = base_channels
        for _ in range(n_layers - 1):
            layers.append(nn.Conv2d(width, width * 2, 3, stride=2, padding=1))
            if use_norm:
                layers.append(nn.InstanceNorm2d(width * 2))
            layers.append(act())
            width *= 2
        layers.append(nn.Conv2d(width, 1, 3, padding=1))
        self.body = nn.Sequential(*layers)
        _init_conv(self.body)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ShapeError(f"discriminator expects (B, C, H, W), got {tuple(x.shape)}")
        return self.body(x)


@dataclass
class TranslatorPair:
    """Both translation directions plus their domain discriminators.

    "ori" is the painting domain, "photo" the real-photo domain. The pipeline's
    painting -> pseudo-real step uses gen_ori_to_photo.
    """

    gen_ori_to_photo: Generator
    gen_photo_to_ori: Generator
    disc_ori: Discriminator
    disc_photo: Discriminator
    step: int = 0

    def generators(self) -> list[nn.Parameter]:
        return list(self.gen_ori_to_photo.parameters()) + \
            list(self.gen_photo_to_ori.parameters())

    def discriminators(self) -> list[nn.Parameter]:
        return list(self.disc_ori.parameters()) + list(self.disc_photo.parameters())

    def parameter_count(self) -> int:
        nets = (self.gen_ori_to_photo, self.gen_photo_to_ori,
                self.disc_ori, self.disc_photo)
        return sum(p.numel() for net in nets for p in net.parameters())

    def train_mode(self) -> None:
        for net in (self.gen_ori_to_photo, self.gen_photo_to_ori,
                    self.disc_ori, self.disc_photo):
            net.train()

    def eval_mode(self) -> None:
        for net in (self.gen_ori_to_photo, self.gen_photo_to_ori,
                    self.disc_ori, self.disc_photo):
            net.eval()

    def to_double(self) -> "TranslatorPair":
        for net in (self.gen_ori_to_photo, self.gen_photo_to_ori,
                    self.disc_ori, self.disc_photo):
            net.double()
        return self
