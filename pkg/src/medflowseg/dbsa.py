"""Dual-branch spatial gating of the shallow flow feature.

The condition stream's full-resolution decoder feature is projected to the
flow width, passed through a structural 3x3 convolution, then split into a
low-frequency branch (learnable Gaussian blur, kernel size 3) and a
high-frequency branch (residual against a size-5 learnable Gaussian blur).
A 1x1 convolution over the concatenated branches produces a sigmoid gate g,
and the first flow encoder feature is rescaled to (1 + g) * feature, so the
injection can at most double a value and never flips its sign.

The Gaussians keep a fixed kernel size and learn only sigma (positive via a
softplus reparameterization); their weights are renormalized on every
forward pass, so normalization survives any optimizer update.  Blurs use
reflect padding; plain convolutions use zero same-padding.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError, ShapeError


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class GaussianBlur(nn.Module):
    """Depthwise Gaussian filter with learnable sigma and fixed odd size."""

    def __init__(self, size: int, init_sigma: float = 1.0):
        super().__init__()
        if size < 1 or size % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd and positive, got {size}")
        if init_sigma <= 0:
            raise ConfigurationError(f"init_sigma must be positive, got {init_sigma}")
        self.size = size
        self.rho = nn.Parameter(torch.tensor(_softplus_inverse(init_sigma)))

    @property
    def sigma(self) -> Tensor:
        return F.softplus(self.rho)

    def kernel(self) -> Tensor:
        coords = torch.arange(self.size, dtype=self.rho.dtype, device=self.rho.device)
        coords = coords - (self.size - 1) / 2.0
        line = torch.exp(-(coords**2) / (2.0 * self.sigma**2))
        k = torch.outer(line, line)
        return k / k.sum()

    def forward(self, x: Tensor) -> Tensor:
        channels = x.shape[1]
        pad = self.size // 2
        weight = self.kernel().to(x.dtype).expand(channels, 1, self.size, self.size)
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
        return F.conv2d(x, weight, groups=channels)


def inject(f_flow0: Tensor, g: Tensor) -> Tensor:
    """Gate the shallow flow feature: f + g * f = (1 + g) * f."""
    if f_flow0.shape != g.shape:
        raise ShapeError(
            f"gate shape {tuple(g.shape)} does not match feature {tuple(f_flow0.shape)}"
        )
    return f_flow0 + g * f_flow0


class DualBranchSpatialAttention(nn.Module):
    def __init__(self, cond_channels: int, flow_channels: int):
        super().__init__()
        self.align = nn.Conv2d(cond_channels, flow_channels, 1)
        self.structure = nn.Conv2d(flow_channels, flow_channels, 3, padding=1)
        self.gauss_low = GaussianBlur(3)
        self.conv_low = nn.Conv2d(flow_channels, flow_channels, 3, padding=1)
        self.gauss_high = GaussianBlur(5)
        self.conv_high = nn.Conv2d(flow_channels, flow_channels, 3, padding=1)
        self.gate_conv = nn.Conv2d(2 * flow_channels, flow_channels, 1)

    def structural_feature(self, aligned: Tensor) -> Tensor:
        return self.structure(aligned)

    def decompose(self, f_str: Tensor) -> tuple[Tensor, Tensor]:
        f_low = self.conv_low(self.gauss_low(f_str))
        f_high = self.conv_high(f_str - self.gauss_high(f_str))
        return f_low, f_high

    def gate(self, f_high: Tensor, f_low: Tensor) -> Tensor:
        if f_high.shape != f_low.shape:
            raise ShapeError(
                f"branch shapes differ: high {tuple(f_high.shape)} vs low {tuple(f_low.shape)}"
            )
        return torch.sigmoid(self.gate_conv(torch.cat([f_high, f_low], dim=1)))

    def forward(self, f_flow0: Tensor, f_cond_final: Tensor) -> Tensor:
        if f_flow0.shape[-2:] != f_cond_final.shape[-2:]:
            raise ShapeError(
                f"flow feature {tuple(f_flow0.shape)} and condition feature "
                f"{tuple(f_cond_final.shape)} must share spatial size"
            )
        f_str = self.structural_feature(self.align(f_cond_final))
        f_low, f_high = self.decompose(f_str)
        return inject(f_flow0, self.gate(f_high, f_low))
