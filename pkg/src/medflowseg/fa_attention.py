"""Frequency-aware bottleneck attention fusing flow and condition features.

Each block runs two parallel branches over the bottleneck maps ``f`` (flow)
and ``c`` (condition):

* frequency branch — 2-D FFT (stored as channel-doubled real/imag), FiLM
  conditioning on the time embedding, patch embedding with fixed 2-D
  sinusoidal positions, then cross-attention with the condition tokens as
  queries and the flow tokens as key/value pairs;
* spatial branch — FiLM and patch embedding on the raw maps, then a token
  discrepancy extractor that builds agreement/difference/residual cues,
  fuses them into an evidence token, and recalibrates both streams.

A time-conditioned modulator turns the three token streams into a (0, 1)
mask that gates the frequency tokens; the gated tokens are mapped back
through the inverse patch embedding and inverse FFT to give the refined
condition feature.  The whole block stacks `depth` times, refining only the
condition input while the flow input is reused unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError, NumericError, ShapeError


@dataclass(frozen=True)
class FAConfig:
    """Bottleneck attention hyperparameters."""

    patch: int = 4
    depth: int = 4
    modulator_depth: int = 2
    heads: int = 4
    dim: int = 128
    use_modulator: bool = True

    def __post_init__(self) -> None:
        if self.depth < 1 or self.modulator_depth < 1:
            raise ConfigurationError("depth and modulator_depth must be >= 1")
        if self.patch < 1:
            raise ConfigurationError(f"patch must be >= 1, got {self.patch}")
        if self.dim % self.heads != 0:
            raise ConfigurationError(
                f"dim {self.dim} must be divisible by heads {self.heads}"
            )
        if self.dim % 4 != 0:
            raise ConfigurationError(f"dim must be divisible by 4, got {self.dim}")

    @classmethod
    def from_dict(cls, d: dict) -> "FAConfig":
        return cls(**d)


def to_frequency(f: Tensor) -> Tensor:
    """Per-channel 2-D DFT; real and imaginary parts concatenated along channels."""
    spectrum = torch.fft.fft2(f)
    return torch.cat([spectrum.real, spectrum.imag], dim=1)


def from_frequency(s: Tensor, assert_real: bool = False) -> Tensor:
    """Inverse 2-D DFT of a channel-doubled spectrum; imaginary residue is dropped.

    With `assert_real` the residue must stay below 1e-4 (true for any
    spectrum produced by `to_frequency` and not modified since).
    """
    if s.shape[1] % 2 != 0:
        raise ShapeError(f"spectral tensor needs an even channel count, got {s.shape[1]}")
    half = s.shape[1] // 2
    spectrum = torch.complex(s[:, :half], s[:, half:])
    out = torch.fft.ifft2(spectrum)
    if assert_real:
        residue = out.imag.abs().max().item()
        if residue >= 1e-4:
            raise NumericError(f"imaginary residue {residue:.3e} exceeds 1e-4")
    return out.real


@dataclass(frozen=True)
class TokenSequence:
    """Patch tokens plus the grid they came from."""

    tokens: Tensor
    grid: tuple[int, int]
    patch: int

    def __post_init__(self) -> None:
        rows, cols = self.grid
        if rows * cols != self.tokens.shape[1]:
            raise ShapeError(
                f"grid {self.grid} does not match token count {self.tokens.shape[1]}"
            )

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens=tokens, grid=self.grid, patch=self.patch)


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection with a transpose-tied inverse."""

    def __init__(self, channels: int, patch: int, dim: int):
        super().__init__()
        self.channels = channels
        self.patch = patch
        self.proj = nn.Linear(channels * patch * patch, dim, bias=False)

    def forward(self, f: Tensor) -> TokenSequence:
        b, ch, h, w = f.shape
        p = self.patch
        if ch != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {ch}")
        if h % p != 0 or w % p != 0:
            raise ConfigurationError(f"spatial size {h}x{w} not divisible by patch {p}")
        rows, cols = h // p, w // p
        patches = (
            f.view(b, ch, rows, p, cols, p)
            .permute(0, 2, 4, 1, 3, 5)
            .reshape(b, rows * cols, ch * p * p)
        )
        return TokenSequence(tokens=self.proj(patches), grid=(rows, cols), patch=p)

    def inverse(self, seq: TokenSequence) -> Tensor:
        rows, cols = seq.grid
        p = self.patch
        patches = F.linear(seq.tokens, self.proj.weight.t())
        b = patches.shape[0]
        return (
            patches.view(b, rows, cols, self.channels, p, p)
            .permute(0, 3, 1, 4, 2, 5)
            .reshape(b, self.channels, rows * p, cols * p)
        )


def positional_encoding(
    grid: tuple[int, int], dim: int, dtype: torch.dtype = torch.float32
) -> Tensor:
    """Fixed 2-D sinusoidal positions over a patch grid, shape [rows*cols, dim]."""
    if dim % 4 != 0:
        raise ConfigurationError(f"positional dim must be divisible by 4, got {dim}")
    rows, cols = grid
    quarter = dim // 4
    freqs = torch.exp(
        torch.arange(quarter, dtype=dtype) * (-math.log(10000.0) / max(quarter - 1, 1))
    )
    ys = torch.arange(rows, dtype=dtype)[:, None] * freqs[None, :]
    xs = torch.arange(cols, dtype=dtype)[:, None] * freqs[None, :]
    row_enc = torch.cat([torch.sin(ys), torch.cos(ys)], dim=-1)
    col_enc = torch.cat([torch.sin(xs), torch.cos(xs)], dim=-1)
    full = torch.cat(
        [
            row_enc[:, None, :].expand(rows, cols, dim // 2),
            col_enc[None, :, :].expand(rows, cols, dim // 2),
        ],
        dim=-1,
    )
    return full.reshape(rows * cols, dim)


class FiLM(nn.Module):
    """Feature-wise affine conditioning on the time embedding.

    Initialized to the identity: the scale head outputs 1 and the shift head
    outputs 0 until trained.
    """

    def __init__(self, time_dim: int, channels: int):
        super().__init__()
        self.channels = channels
        self.head = nn.Linear(time_dim, 2 * channels)
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias.copy_(
                torch.cat([torch.ones(channels), torch.zeros(channels)])
            )

    def forward(self, f: Tensor, t_emb: Tensor) -> Tensor:
        gamma, beta = self.head(t_emb).chunk(2, dim=-1)
        if f.dim() == 4:
            gamma = gamma[:, :, None, None]
            beta = beta[:, :, None, None]
        else:
            gamma = gamma[:, None, :]
            beta = beta[:, None, :]
        return gamma * f + beta


class CrossAttention(nn.Module):
    """Multi-head scaled dot-product attention with residual and feed-forward sublayers."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def attend(self, q_tokens: Tensor, kv_tokens: Tensor) -> tuple[Tensor, Tensor]:
        """Raw attention (no norms, no residual); returns output and weights."""
        q = self._split(self.q_proj(q_tokens))
        k = self._split(self.k_proj(kv_tokens))
        v = self._split(self.v_proj(kv_tokens))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = scores.softmax(dim=-1)
        out = weights @ v
        b, _, n, _ = out.shape
        out = out.transpose(1, 2).reshape(b, n, self.heads * self.head_dim)
        return self.out_proj(out), weights

    def forward_tokens(self, x: Tensor, kv: Tensor) -> Tensor:
        attn_out, _ = self.attend(self.norm_q(x), self.norm_kv(kv))
        x = x + attn_out
        return x + self.ff(self.norm_ff(x))

    def forward(self, t_q: TokenSequence, t_kv: TokenSequence) -> TokenSequence:
        if t_q.tokens.shape[-1] != t_kv.tokens.shape[-1]:
            raise ShapeError(
                f"token dims differ: {t_q.tokens.shape[-1]} vs {t_kv.tokens.shape[-1]}"
            )
        return t_q.with_tokens(self.forward_tokens(t_q.tokens, t_kv.tokens))


def tdx_cues(t_f: Tensor, t_c: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Agreement, difference, and residual cues between two token streams."""
    if t_f.shape != t_c.shape:
        raise ShapeError(f"token shapes differ: {tuple(t_f.shape)} vs {tuple(t_c.shape)}")
    agreement = t_f * t_c
    residual = t_f - t_c
    difference = residual.abs()
    return agreement, difference, residual


class TokenDiscrepancyExtractor(nn.Module):
    """Encode the three cues into evidence and recalibrate both streams."""

    def __init__(self, dim: int):
        super().__init__()

        def encoder():
            return nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

        self.encode_agreement = encoder()
        self.encode_difference = encoder()
        self.encode_residual = encoder()
        self.head_flow = nn.Linear(dim, dim)
        self.head_cond = nn.Linear(dim, dim)

    def evidence(self, t_f: Tensor, t_c: Tensor) -> Tensor:
        agreement, difference, residual = tdx_cues(t_f, t_c)
        return (
            self.encode_agreement(agreement)
            + self.encode_difference(difference)
            + self.encode_residual(residual)
        )

    def forward(
        self, t_f: TokenSequence, t_c: TokenSequence
    ) -> tuple[TokenSequence, TokenSequence]:
        z = self.evidence(t_f.tokens, t_c.tokens)
        f_out = t_f.tokens + torch.sigmoid(self.head_flow(z)) * t_f.tokens
        c_out = t_c.tokens + torch.sigmoid(self.head_cond(z)) * t_c.tokens
        return t_f.with_tokens(f_out), t_c.with_tokens(c_out)


@dataclass(frozen=True)
class ModulationMask:
    """Sigmoid-squashed gating mask over tokens; every element lies in (0, 1)."""

    m0: Tensor


class _ModulatorBlock(nn.Module):
    def __init__(self, dim: int, heads: int, time_dim: int):
        super().__init__()
        self.film = FiLM(time_dim, dim)
        self.attn = CrossAttention(dim, heads)

    def forward(self, x: Tensor, t_emb: Tensor) -> Tensor:
        x = self.film(x, t_emb)
        return self.attn.forward_tokens(x, x)


class NeuralModulator(nn.Module):
    """Stack of R time-conditioned blocks emitting a (0, 1) modulation mask."""

    def __init__(self, dim: int, heads: int, depth: int, time_dim: int):
        super().__init__()
        if depth < 1:
            raise ConfigurationError(f"modulator depth must be >= 1, got {depth}")
        self.in_proj = nn.Linear(3 * dim, dim)
        self.blocks = nn.ModuleList(
            _ModulatorBlock(dim, heads, time_dim) for _ in range(depth)
        )
        self.mask_head = nn.Linear(dim, dim)

    def forward(
        self,
        t_freq: TokenSequence,
        t_flow: TokenSequence,
        t_cond: TokenSequence,
        t_emb: Tensor,
    ) -> ModulationMask:
        x = self.in_proj(
            torch.cat([t_freq.tokens, t_flow.tokens, t_cond.tokens], dim=-1)
        )
        for block in self.blocks:
            x = block(x, t_emb)
        return ModulationMask(m0=torch.sigmoid(self.mask_head(x)))


class FABlock(nn.Module):
    """One frequency + spatial fusion block over matching bottleneck maps."""

    def __init__(self, channels: int, cfg: FAConfig, time_dim: int):
        super().__init__()
        self.cfg = cfg
        dim, patch, heads = cfg.dim, cfg.patch, cfg.heads
        self.film_freq_flow = FiLM(time_dim, 2 * channels)
        self.film_freq_cond = FiLM(time_dim, 2 * channels)
        self.embed_freq_flow = PatchEmbed(2 * channels, patch, dim)
        self.embed_freq_cond = PatchEmbed(2 * channels, patch, dim)
        self.cross = CrossAttention(dim, heads)
        self.film_sp_flow = FiLM(time_dim, channels)
        self.film_sp_cond = FiLM(time_dim, channels)
        self.embed_sp_flow = PatchEmbed(channels, patch, dim)
        self.embed_sp_cond = PatchEmbed(channels, patch, dim)
        self.tdx = TokenDiscrepancyExtractor(dim)
        self.modulator = (
            NeuralModulator(dim, heads, cfg.modulator_depth, time_dim)
            if cfg.use_modulator
            else None
        )

    def forward(self, f: Tensor, c: Tensor, t_emb: Tensor) -> Tensor:
        if f.shape != c.shape:
            raise ShapeError(
                f"flow {tuple(f.shape)} and condition {tuple(c.shape)} bottlenecks differ"
            )
        # Frequency branch: cross-attention between spectra, condition as query.
        spec_f = self.film_freq_flow(to_frequency(f), t_emb)
        spec_c = self.film_freq_cond(to_frequency(c), t_emb)
        tok_f = self.embed_freq_flow(spec_f)
        tok_c = self.embed_freq_cond(spec_c)
        pos = positional_encoding(tok_f.grid, self.cfg.dim, dtype=tok_f.tokens.dtype)
        tok_f = tok_f.with_tokens(tok_f.tokens + pos)
        tok_c = tok_c.with_tokens(tok_c.tokens + pos)
        fused = self.cross(tok_c, tok_f)

        # Spatial branch: discrepancy-aware recalibration of both streams.
        sp_f = self.embed_sp_flow(self.film_sp_flow(f, t_emb))
        sp_c = self.embed_sp_cond(self.film_sp_cond(c, t_emb))
        recal_f, recal_c = self.tdx(sp_f, sp_c)

        if self.modulator is not None:
            mask = self.modulator(fused, recal_f, recal_c, t_emb)
            out_tokens = fused.with_tokens(mask.m0 * fused.tokens)
        else:
            out_tokens = fused
        return from_frequency(self.embed_freq_cond.inverse(out_tokens))


class FrequencyAwareAttention(nn.Module):
    """N stacked fusion blocks; only the condition feature is refined across them."""

    def __init__(self, channels: int, cfg: FAConfig, time_dim: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            FABlock(channels, cfg, time_dim) for _ in range(cfg.depth)
        )

    def forward(self, f: Tensor, c: Tensor, t_emb: Tensor) -> Tensor:
        for block in self.blocks:
            c = block(f, c, t_emb)
        return c
