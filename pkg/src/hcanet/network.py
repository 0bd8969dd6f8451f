"""HCA-Net: convolutional stem, N stacked hourglass + M-LKA blocks with
per-block prediction heads, and a per-disc fusion of all block outputs.

The stem downsamples by 4, so heatmaps live at input_size / 4. The fusion is a
grouped 1x1 convolution (one group per disc): each fused channel only sees the
matching disc channel of every block, which keeps channel semantics intact and
lets visibility masking cut a disc out of the gradient entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InputError
from .heatmap_codec import HeatmapStack
from .mlka import MlkaConfig, MultiScaleLka, default_scales

DOWNSAMPLE = 4


@dataclass
class ModelConfig:
    stacks: int = 2
    channels: int = 64
    hourglass_depth: int = 3
    num_discs: int = 11
    input_size: tuple[int, int] = (256, 256)
    mlka: Optional[MlkaConfig] = None
    seed: int = 0

    def __post_init__(self):
        if self.stacks < 1:
            raise ConfigurationError(f"stacks must be >= 1, got {self.stacks}")
        if self.num_discs < 1:
            raise ConfigurationError(f"num_discs must be >= 1, got {self.num_discs}")
        if self.channels < 2:
            raise ConfigurationError(f"channels must be >= 2, got {self.channels}")
        if self.hourglass_depth < 1:
            raise ConfigurationError(f"hourglass_depth must be >= 1, got {self.hourglass_depth}")
        self.input_size = (int(self.input_size[0]), int(self.input_size[1]))
        h, w = self.input_size
        # heatmaps at input/4 must still be divisible through every hourglass level
        factor = DOWNSAMPLE * 2**self.hourglass_depth
        if h % factor or w % factor:
            raise ConfigurationError(
                f"input_size {h}x{w} not divisible by {factor} "
                f"(stem x{DOWNSAMPLE} and {self.hourglass_depth} hourglass levels)"
            )
        if self.mlka is None:
            self.mlka = MlkaConfig(channels=self.channels, scales=default_scales())
        if self.mlka.channels != self.channels:
            raise ConfigurationError(
                f"mlka.channels ({self.mlka.channels}) != channels ({self.channels})"
            )

    @property
    def heatmap_size(self) -> tuple[int, int]:
        return self.input_size[0] // DOWNSAMPLE, self.input_size[1] // DOWNSAMPLE


@dataclass
class NetworkOutput:
    """Fused prediction plus the per-block outputs it was fused from."""

    fused: HeatmapStack
    intermediates: list[HeatmapStack]


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return self.relu(y + self.skip(x))


class Hourglass(nn.Module):
    """Symmetric encoder-decoder with a skip connection at every resolution."""

    def __init__(self, channels: int, depth: int):
        super().__init__()
        self.skip = ResidualBlock(channels, channels)
        self.pool = nn.MaxPool2d(2)
        self.down = ResidualBlock(channels, channels)
        if depth > 1:
            self.inner: nn.Module = Hourglass(channels, depth - 1)
        else:
            self.inner = ResidualBlock(channels, channels)
        self.up = ResidualBlock(channels, channels)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        low = self.up(self.inner(self.down(self.pool(x))))
        return self.skip(x) + self.upsample(low)


class HCANet(nn.Module):
    """Stacked hierarchical context attention network.

    forward() takes a (B, 1, H, W) batch in [0, 1] and returns the fused
    (B, V, H/4, W/4) map plus the list of per-block outputs.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.channels
        v = config.num_discs
        n = config.stacks
        self.stem = nn.Sequential(
            nn.Conv2d(1, c // 2, 7, stride=2, padding=3),
            nn.BatchNorm2d(c // 2),
            nn.ReLU(inplace=True),
            ResidualBlock(c // 2, c),
            nn.MaxPool2d(2),
        )
        self.hourglasses = nn.ModuleList(
            Hourglass(c, config.hourglass_depth) for _ in range(n)
        )
        self.post = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU(inplace=True))
            for _ in range(n)
        )
        self.mlka = nn.ModuleList(MultiScaleLka(config.mlka) for _ in range(n))
        self.heads = nn.ModuleList(nn.Conv2d(c, v, 1) for _ in range(n))
        self.feat_proj = nn.ModuleList(nn.Conv2d(c, c, 1) for _ in range(n - 1))
        # one group per disc: fused channel v mixes out_1[v] .. out_N[v] only
        self.fuse = nn.Conv2d(v * n, v, 1, groups=v)

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if x.ndim != 4 or x.shape[1] != 1:
            raise InputError(f"expected (B, 1, H, W) input, got shape {tuple(x.shape)}")
        if tuple(x.shape[2:]) != self.config.input_size:
            raise InputError(
                f"input spatial size {tuple(x.shape[2:])} != configured {self.config.input_size}"
            )
        feat = self.stem(x)
        outs: list[torch.Tensor] = []
        for j in range(self.config.stacks):
            block = self.post[j](self.hourglasses[j](feat))
            block = self.mlka[j](block)
            outs.append(self.heads[j](block))
            if j < self.config.stacks - 1:
                feat = feat + self.feat_proj[j](block)
        b, v, h, w = outs[0].shape
        stacked = torch.stack(outs, dim=2).reshape(b, v * len(outs), h, w)
        return self.fuse(stacked), outs


def _seed_parameters(model: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels // module.groups * module.kernel_size[0] * module.kernel_size[1]
                module.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()


def build_model(config: ModelConfig) -> HCANet:
    """Construct an HCANet with weights drawn deterministically from config.seed."""
    model = HCANet(config)
    _seed_parameters(model, config.seed)
    return model


def infer_sample(model: HCANet, image) -> NetworkOutput:
    """Run one image (H, W) or (1, H, W) through the model.

    Returns per-sample heatmap stacks; call inside torch.no_grad() for plain
    inference.
    """
    t = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.ndim != 3 or t.shape[0] != 1:
        raise InputError(f"expected (H, W) or (1, H, W) image, got shape {tuple(t.shape)}")
    fused, outs = model(t.unsqueeze(0))
    return NetworkOutput(
        fused=HeatmapStack(fused[0]),
        intermediates=[HeatmapStack(o[0]) for o in outs],
    )
