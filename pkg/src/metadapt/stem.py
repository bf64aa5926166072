"""Convolutional stem in front of the adaptive block, and its pretraining."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metadapt.autodiff import Tensor, leaky_relu, max_pool_downsample
from metadapt.errors import DimensionError, PreconditionError
from metadapt.nn import BatchNorm2d, Conv2d, Module, ModuleList


@dataclass(frozen=True)
class StemConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (8, 8)
    image_size: int = 16
    downsample: int = 2
    frozen: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise PreconditionError("stem needs at least one stage with positive width")
        if self.grid < 2:
            raise PreconditionError(f"stem output grid {self.grid} is below 2x2")

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def grid(self) -> int:
        return self.image_size // self.downsample ** len(self.channels)


class ResidualUnit(Module):
    """Two conv3-BN-LeakyReLU layers plus a skip, then max-pool downsampling."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, downsample: int = 2):
        super().__init__()
        self.downsample = downsample
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.bn2 = BatchNorm2d(cout)
        if cin != cout:
            self.proj = Conv2d(cin, cout, 1, rng)

    def forward(self, x):
        y = leaky_relu(self.bn1(self.conv1(x)))
        y = leaky_relu(self.bn2(self.conv2(y)))
        skip = self.proj(x) if "proj" in self._modules else x
        out = y + skip
        return max_pool_downsample(out, self.downsample) if self.downsample > 1 else out


class Stem(Module):
    def __init__(self, cfg: StemConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        cins = (cfg.in_channels,) + cfg.channels[:-1]
        self.units = ModuleList(ResidualUnit(a, b, rng, cfg.downsample) for a, b in zip(cins, cfg.channels))

    def forward(self, x):
        return stem_forward(x, self)


def stem_forward(images: Tensor, stem: Stem) -> Tensor:
    cfg = stem.cfg
    if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"stem expects (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {images.shape}"
        )
    x = images
    for unit in stem.units:
        x = unit(x)
    return x


class PlainBlock(Module):
    """x + BN(conv3(LeakyReLU(BN(conv3(x))))): the residual block the DAG replaces."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.conv_a = Conv2d(channels, channels, 3, rng)
        self.bn_a = BatchNorm2d(channels)
        self.conv_b = Conv2d(channels, channels, 3, rng)
        self.bn_b = BatchNorm2d(channels)

    def forward(self, x):
        y = leaky_relu(self.bn_a(self.conv_a(x)))
        return x + self.bn_b(self.conv_b(y))
