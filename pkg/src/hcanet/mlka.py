"""Multi-scale large kernel attention (M-LKA).

A K x K depth-wise convolution is decomposed per scale into a (2d-1) x (2d-1)
depth-wise convolution followed by a ceil(K/d) x ceil(K/d) depth-wise
convolution with dilation d. Branch outputs are concatenated over channels and
mixed by a single 1x1 convolution into the attention map, which gates the
input elementwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigurationError


@dataclass(frozen=True)
class LkaScaleSpec:
    """One attention scale: effective kernel size and dilation of its decomposition."""

    kernel: int
    dilation: int

    def __post_init__(self):
        if self.kernel < 3:
            raise ConfigurationError(f"kernel must be >= 3, got {self.kernel}")
        if self.dilation < 2:
            raise ConfigurationError(f"dilation must be >= 2, got {self.dilation}")
        q = self.dilated_kernel
        if q < 3 or q % 2 == 0:
            raise ConfigurationError(
                f"ceil(kernel/dilation) must be odd and >= 3, got {q} "
                f"for kernel={self.kernel}, dilation={self.dilation}"
            )

    @property
    def local_kernel(self) -> int:
        return 2 * self.dilation - 1

    @property
    def dilated_kernel(self) -> int:
        return math.ceil(self.kernel / self.dilation)


def default_scales() -> tuple[LkaScaleSpec, ...]:
    """Local-to-global default scale set: effective kernels 9, 15, 21 at dilation 3."""
    return (LkaScaleSpec(9, 3), LkaScaleSpec(15, 3), LkaScaleSpec(21, 3))


@dataclass(frozen=True)
class MlkaConfig:
    channels: int
    scales: tuple[LkaScaleSpec, ...] = field(default_factory=default_scales)

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigurationError(f"channels must be >= 1, got {self.channels}")
        object.__setattr__(self, "scales", tuple(self.scales))
        if len(self.scales) == 0:
            raise ConfigurationError("scale set must be nonempty")
        kernels = [s.kernel for s in self.scales]
        if len(set(kernels)) != len(kernels):
            raise ConfigurationError(f"scale kernels must be distinct, got {kernels}")


class LkaBranch(nn.Module):
    """Decomposed large-kernel depth-wise convolution for one scale."""

    def __init__(self, channels: int, spec: LkaScaleSpec):
        super().__init__()
        self.spec = spec
        kl = spec.local_kernel
        kd = spec.dilated_kernel
        self.local = nn.Conv2d(channels, channels, kl, padding=(kl - 1) // 2, groups=channels)
        self.spread = nn.Conv2d(
            channels,
            channels,
            kd,
            padding=(kd - 1) // 2 * spec.dilation,
            dilation=spec.dilation,
            groups=channels,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.spread(self.local(x))


class MultiScaleLka(nn.Module):
    """Gate features with an attention map built from all scale branches."""

    def __init__(self, config: MlkaConfig):
        super().__init__()
        self.config = config
        self.branches = nn.ModuleList(
            LkaBranch(config.channels, spec) for spec in config.scales
        )
        self.merge = nn.Conv2d(len(config.scales) * config.channels, config.channels, 1)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.config.channels:
            raise ConfigurationError(
                f"expected {self.config.channels} channels, got {x.shape[-3]}"
            )
        return self.merge(torch.cat([branch(x) for branch in self.branches], dim=-3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.attention(x) * x
