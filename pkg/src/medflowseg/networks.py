"""Two-stream backbone: a plain condition UNet and a time-conditioned flow UNet.

The condition network sees only the image — no time input — so its outputs
can be computed once per image and reused across every ODE step.  It
returns its full-resolution final decoder feature (consumed by the DB-SA
gate), its bottleneck feature (consumed by FA-Attention), and auxiliary
segmentation logits from a 1x1 head.

The flow network maps the path state x_t to a velocity estimate.  Every
residual block receives an additive per-channel bias projected from the
time embedding; DB-SA gates its first encoder feature and FA-Attention
refines its bottleneck.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .dbsa import DualBranchSpatialAttention
from .errors import ConfigurationError, ShapeError
from .fa_attention import FAConfig, FrequencyAwareAttention
from .flow import FlowState

TIME_SCALE = 1000.0


@dataclass(frozen=True)
class BackboneConfig:
    """Shared architecture settings for both streams."""

    stages: int = 3
    widths: tuple[int, ...] = (32, 64, 128)
    num_classes: int = 3
    flow_channels: int = 3
    in_channels: int = 1
    time_dim: int = 128
    use_dbsa: bool = True
    use_fa_attention: bool = True

    def __post_init__(self) -> None:
        if len(self.widths) != self.stages:
            raise ConfigurationError(
                f"widths {self.widths} must have one entry per stage ({self.stages})"
            )
        if any(w < 1 for w in self.widths):
            raise ConfigurationError(f"all widths must be >= 1, got {self.widths}")
        if self.num_classes < 1 or self.flow_channels < 1:
            raise ConfigurationError("num_classes and flow_channels must be >= 1")

    @property
    def downsample_factor(self) -> int:
        return 2**self.stages

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass(frozen=True)
class ConditionBundle:
    """Everything the condition network hands to the flow network."""

    final_decoder_feature: Tensor
    bottleneck_feature: Tensor
    aux_logits: Tensor


def sinusoidal_features(t: Tensor, dim: int) -> Tensor:
    """Standard sinusoidal features of t scaled into the embedding period.

    Layout is [sin | cos], so t=0 yields zeros in the first half and ones in
    the second.
    """
    if dim < 2 or dim % 2 != 0:
        raise ConfigurationError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=t.dtype, device=t.device)
        * (-math.log(10000.0) / max(half - 1, 1))
    )
    args = t[:, None] * TIME_SCALE * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimeEmbedding(nn.Module):
    """Sinusoidal features followed by a two-layer perceptron."""

    def __init__(self, dim: int):
        super().__init__()
        if dim < 2 or dim % 2 != 0:
            raise ConfigurationError(f"embedding dim must be even and >= 2, got {dim}")
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: Tensor) -> Tensor:
        return self.mlp(sinusoidal_features(t, self.dim))


def _group_count(channels: int) -> int:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return groups
    return 1


class ResidualBlock(nn.Module):
    """GroupNorm/SiLU/conv block with an optional additive time bias."""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_group_count(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels) if time_dim else None
        self.norm2 = nn.GroupNorm(_group_count(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1)
            if in_channels != out_channels
            else nn.Identity()
        )

    def forward(self, x: Tensor, t_emb: Tensor | None = None) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_proj is not None:
            if t_emb is None:
                raise ShapeError("time-conditioned block called without a time embedding")
            h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


def _check_divisible(h: int, w: int, factor: int) -> None:
    if h % factor != 0 or w % factor != 0:
        raise ConfigurationError(
            f"spatial size {h}x{w} must be divisible by {factor} for this depth"
        )


class _UNetCore(nn.Module):
    """Encoder/decoder shared by both streams; time conditioning optional."""

    def __init__(self, cfg: BackboneConfig, in_channels: int, time_dim: int | None):
        super().__init__()
        widths = cfg.widths
        self.cfg = cfg
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        self.encoder = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = widths[0]
        for width in widths:
            self.encoder.append(ResidualBlock(prev, width, time_dim))
            self.downs.append(Downsample(width))
            prev = width
        self.bottleneck_in = ResidualBlock(prev, prev, time_dim)
        self.bottleneck_out = ResidualBlock(prev, prev, time_dim)
        self.ups = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for width in reversed(widths):
            self.ups.append(Upsample(prev))
            out = width
            self.decoder.append(ResidualBlock(prev + width, out, time_dim))
            prev = out

    def encode(self, x: Tensor, t_emb: Tensor | None) -> tuple[list[Tensor], Tensor]:
        h = self.stem(x)
        skips = []
        for block, down in zip(self.encoder, self.downs):
            h = block(h, t_emb)
            skips.append(h)
            h = down(h)
        return skips, self.bottleneck_in(h, t_emb)

    def decode(self, h: Tensor, skips: list[Tensor], t_emb: Tensor | None) -> Tensor:
        h = self.bottleneck_out(h, t_emb)
        for up, block, skip in zip(self.ups, self.decoder, reversed(skips)):
            h = up(h)
            h = block(torch.cat([h, skip], dim=1), t_emb)
        return h


class ConditionNetwork(nn.Module):
    """Standard UNet over the raw image; no time input anywhere."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.core = _UNetCore(cfg, cfg.in_channels, time_dim=None)
        self.aux_head = nn.Conv2d(cfg.widths[0], cfg.num_classes, 1)

    def forward(self, image: Tensor) -> ConditionBundle:
        _check_divisible(image.shape[-2], image.shape[-1], self.cfg.downsample_factor)
        skips, bottleneck = self.core.encode(image, None)
        final = self.core.decode(bottleneck, skips, None)
        return ConditionBundle(
            final_decoder_feature=final,
            bottleneck_feature=bottleneck,
            aux_logits=self.aux_head(final),
        )


class FlowNetwork(nn.Module):
    """Time-conditioned UNet predicting the transport velocity of x_t."""

    def __init__(self, cfg: BackboneConfig, fa_cfg: FAConfig | None = None):
        super().__init__()
        self.cfg = cfg
        self.core = _UNetCore(cfg, cfg.flow_channels, time_dim=cfg.time_dim)
        self.dbsa = (
            DualBranchSpatialAttention(cfg.widths[0], cfg.widths[0])
            if cfg.use_dbsa
            else None
        )
        self.fa = (
            FrequencyAwareAttention(cfg.widths[-1], fa_cfg or FAConfig(), cfg.time_dim)
            if cfg.use_fa_attention
            else None
        )
        head_norm = nn.GroupNorm(_group_count(cfg.widths[0]), cfg.widths[0])
        head_conv = nn.Conv2d(cfg.widths[0], cfg.flow_channels, 3, padding=1)
        nn.init.zeros_(head_conv.weight)
        nn.init.zeros_(head_conv.bias)
        self.head = nn.Sequential(head_norm, nn.SiLU(), head_conv)

    def forward(self, x_t: Tensor, t_emb: Tensor, cond: ConditionBundle) -> Tensor:
        if x_t.shape[-2:] != cond.final_decoder_feature.shape[-2:]:
            raise ShapeError(
                f"state {tuple(x_t.shape)} and condition feature "
                f"{tuple(cond.final_decoder_feature.shape)} must share spatial size"
            )
        core = self.core
        h = core.stem(x_t)
        skips = []
        for i, (block, down) in enumerate(zip(core.encoder, core.downs)):
            h = block(h, t_emb)
            if i == 0 and self.dbsa is not None:
                h = self.dbsa(h, cond.final_decoder_feature)
            skips.append(h)
            h = down(h)
        h = core.bottleneck_in(h, t_emb)
        if self.fa is not None:
            if h.shape != cond.bottleneck_feature.shape:
                raise ShapeError(
                    f"flow bottleneck {tuple(h.shape)} and condition bottleneck "
                    f"{tuple(cond.bottleneck_feature.shape)} must match"
                )
            h = h + self.fa(h, cond.bottleneck_feature, t_emb)
        return self.head(core.decode(h, skips, t_emb))


class MedFlowSeg(nn.Module):
    """The full two-stream model, with a cached-condition path for sampling."""

    def __init__(self, cfg: BackboneConfig, fa_cfg: FAConfig | None = None):
        super().__init__()
        self.cfg = cfg
        self.fa_cfg = fa_cfg or FAConfig()
        self.time_embedding = TimeEmbedding(cfg.time_dim)
        self.condition = ConditionNetwork(cfg)
        self.flow = FlowNetwork(cfg, self.fa_cfg)

    def forward(self, x_t: Tensor, t: Tensor, image: Tensor) -> tuple[Tensor, ConditionBundle]:
        bundle = self.condition(image)
        velocity = self.flow(x_t, self.time_embedding(t), bundle)
        return velocity, bundle

    def velocity(self, x_t: Tensor, t: Tensor, cond: ConditionBundle) -> Tensor:
        return self.flow(x_t, self.time_embedding(t), cond)

    def velocity_at_state(self, state: FlowState, cond: ConditionBundle) -> Tensor:
        return self.velocity(state.x_t, state.t, cond)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
