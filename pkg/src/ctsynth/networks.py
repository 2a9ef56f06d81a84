"""The two denoising UNets.

The low-resolution denoiser is a purely convolutional 3D encoder/decoder
whose attention (spatial self-attention followed by text cross-attention)
lives only at the bottleneck, where the token count is small.  The
super-resolution denoiser is lighter still: it sees the noisy volume
concatenated with the upsampled low-resolution result, has no text path,
and keeps a single axial self-attention block at its bottleneck.  Both
predict the clean volume x0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError
from .text import TextEmbedding


@dataclass(frozen=True)
class BottleneckAttention:
    self_attention: bool = True
    cross_attention: bool = False
    heads: int = 4
    axial_axis: Optional[int] = None  # replace full self-attention with one-axis attention


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture description for one denoising UNet."""

    in_channels: int = 4
    out_channels: int = 4
    base_width: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 3)
    bottleneck_attention: BottleneckAttention = BottleneckAttention()
    time_embedding_dim: int = 128
    text_dim: int = 0          # width of cross-attention keys/values; 0 = no text path
    cond_channels: int = 0     # extra input channels carrying the upsampled low-res volume

    @property
    def n_levels(self) -> int:
        return len(self.channel_multipliers)

    def validate(self, input_size: Optional[int] = None) -> None:
        if self.bottleneck_attention.cross_attention and self.text_dim <= 0:
            raise ConfigurationError("cross-attention requires text_dim > 0")
        if self.n_levels < 1:
            raise ConfigurationError("need at least one resolution level")
        if input_size is not None:
            factor = 2 ** (self.n_levels - 1)
            if input_size % factor != 0:
                raise ConfigurationError(
                    f"input size {input_size} not divisible by 2^(n_levels-1)={factor}"
                )
            if input_size // factor < 4:
                raise ConfigurationError(
                    f"bottleneck size {input_size // factor} below the minimum of 4"
                )


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic log-spaced sin/cos features of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimestepEmbedding(nn.Module):
    """Sinusoidal features pushed through a two-layer projection."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.proj = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        base = sinusoidal_embedding(t, self.dim).to(self.proj[0].weight.dtype)
        return self.proj(base)


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class ResBlock3d(nn.Module):
    """GroupNorm/SiLU/conv block with the time embedding added between convs."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SpatialSelfAttention(nn.Module):
    """Pre-norm multi-head self-attention over flattened spatial tokens."""

    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, d, h, w = x.shape
        tokens = x.reshape(b, c, d * h * w).transpose(1, 2)
        q = self.norm(tokens)
        out, _ = self.attn(q, q, q, need_weights=False)
        tokens = tokens + out
        return tokens.transpose(1, 2).reshape(b, c, d, h, w)


class AxialSelfAttention(nn.Module):
    """Self-attention along a single spatial axis (0=D, 1=H, 2=W)."""

    def __init__(self, ch: int, heads: int, axis: int):
        super().__init__()
        if axis not in (0, 1, 2):
            raise ConfigurationError(f"axial attention axis must be 0, 1, or 2, got {axis}")
        self.axis = axis
        self.norm = nn.LayerNorm(ch)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, d, h, w = x.shape
        # move the attended axis last, fold the other two into the batch
        perm_axes = [0, 1] + [i + 2 for i in range(3) if i != self.axis] + [self.axis + 2]
        xp = x.permute(perm_axes)
        lead = xp.shape[:4]
        seq = xp.shape[4]
        tokens = xp.reshape(b, c, -1, seq).permute(0, 2, 3, 1).reshape(-1, seq, c)
        q = self.norm(tokens)
        out, _ = self.attn(q, q, q, need_weights=False)
        tokens = tokens + out
        xp = tokens.reshape(b, -1, seq, c).permute(0, 3, 1, 2).reshape(lead + (seq,))
        return xp.permute(tuple(np.argsort(perm_axes)))


class TextCrossAttention(nn.Module):
    """Queries from spatial tokens, keys/values from report token features."""

    def __init__(self, ch: int, text_dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.attn = nn.MultiheadAttention(ch, heads, kdim=text_dim, vdim=text_dim, batch_first=True)

    def forward(
        self, x: torch.Tensor, text: torch.Tensor, text_pad_mask: Optional[torch.Tensor]
    ) -> torch.Tensor:
        b, c, d, h, w = x.shape
        tokens = x.reshape(b, c, d * h * w).transpose(1, 2)
        out, _ = self.attn(
            self.norm(tokens), text, text, key_padding_mask=text_pad_mask, need_weights=False
        )
        tokens = tokens + out
        return tokens.transpose(1, 2).reshape(b, c, d, h, w)


class DenoisingUNet3d(nn.Module):
    """x0-predicting 3D UNet with attention confined to the bottleneck."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = [config.base_width * m for m in config.channel_multipliers]
        time_dim = config.time_embedding_dim
        self.time_embedding = TimestepEmbedding(time_dim)
        total_in = config.in_channels + config.cond_channels
        self.in_conv = nn.Conv3d(total_in, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = widths[0]
        for i, w in enumerate(widths):
            self.down_blocks.append(
                nn.ModuleList([ResBlock3d(ch, w, time_dim), ResBlock3d(w, w, time_dim)])
            )
            ch = w
            if i < len(widths) - 1:
                self.downsamples.append(nn.Conv3d(ch, ch, 3, stride=2, padding=1))

        attn = config.bottleneck_attention
        self.mid_block1 = ResBlock3d(ch, ch, time_dim)
        self.self_attn: Optional[nn.Module] = None
        if attn.self_attention:
            if attn.axial_axis is not None:
                self.self_attn = AxialSelfAttention(ch, attn.heads, attn.axial_axis)
            else:
                self.self_attn = SpatialSelfAttention(ch, attn.heads)
        self.cross_attn: Optional[TextCrossAttention] = None
        if attn.cross_attention:
            self.cross_attn = TextCrossAttention(ch, config.text_dim, attn.heads)
        self.mid_block2 = ResBlock3d(ch, ch, time_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i, w in reversed(list(enumerate(widths))):
            if i < len(widths) - 1:
                self.upsamples.append(nn.Conv3d(ch, ch, 3, padding=1))
            self.up_blocks.append(
                nn.ModuleList([ResBlock3d(ch + w, w, time_dim), ResBlock3d(w, w, time_dim)])
            )
            ch = w

        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_conv = nn.Conv3d(ch, config.out_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        text: Optional[torch.Tensor] = None,
        text_pad_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        cfg = self.config
        cfg.validate(input_size=x.shape[-1])
        if x.shape[1] != cfg.in_channels + cfg.cond_channels:
            raise ShapeError(
                f"expected {cfg.in_channels + cfg.cond_channels} input channels, got {x.shape[1]}"
            )
        if self.cross_attn is not None:
            if text is None:
                raise ShapeError("this denoiser conditions on text features")
            if text.shape[-1] != cfg.text_dim:
                raise ShapeError(f"text width {text.shape[-1]} != text_dim {cfg.text_dim}")
        temb = self.time_embedding(t)

        h = self.in_conv(x)
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, temb)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)

        h = self.mid_block1(h, temb)
        if self.self_attn is not None:
            h = self.self_attn(h)
        if self.cross_attn is not None:
            h = self.cross_attn(h, text, text_pad_mask)
        h = self.mid_block2(h, temb)

        for i, blocks in enumerate(self.up_blocks):
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[i - 1](h)
            h = torch.cat([h, skips[-(i + 1)]], dim=1)
            for block in blocks:
                h = block(h, temb)

        return self.out_conv(F.silu(self.out_norm(h)))


def build_lowres_denoiser(
    in_channels: int = 4,
    base_width: int = 32,
    channel_multipliers: tuple[int, ...] = (1, 2, 3),
    heads: int = 4,
    time_embedding_dim: int = 128,
    text_dim: int = 128,
) -> DenoisingUNet3d:
    """Text-conditioned joint denoiser G: self- then cross-attention at the bottleneck."""
    config = DenoiserConfig(
        in_channels=in_channels,
        out_channels=in_channels,
        base_width=base_width,
        channel_multipliers=channel_multipliers,
        bottleneck_attention=BottleneckAttention(
            self_attention=True, cross_attention=True, heads=heads
        ),
        time_embedding_dim=time_embedding_dim,
        text_dim=text_dim,
    )
    return DenoisingUNet3d(config)


def build_superres_denoiser(
    in_channels: int = 4,
    base_width: int = 16,
    channel_multipliers: tuple[int, ...] = (1, 2, 3, 4),
    heads: int = 4,
    time_embedding_dim: int = 128,
    axial_axis: int = 0,
) -> DenoisingUNet3d:
    """Lightweight upscaling denoiser H: one axial attention block, no text."""
    config = DenoiserConfig(
        in_channels=in_channels,
        out_channels=in_channels,
        base_width=base_width,
        channel_multipliers=channel_multipliers,
        bottleneck_attention=BottleneckAttention(
            self_attention=True, cross_attention=False, heads=heads, axial_axis=axial_axis
        ),
        time_embedding_dim=time_embedding_dim,
        cond_channels=in_channels,
    )
    return DenoisingUNet3d(config)


def text_condition_tensors(
    f_text: TextEmbedding | Sequence[TextEmbedding],
    batch: int,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad per-item token features into (B, L, d) plus a padding mask."""
    items = [f_text] * batch if isinstance(f_text, TextEmbedding) else list(f_text)
    if len(items) != batch:
        raise ShapeError(f"{len(items)} text embeddings for a batch of {batch}")
    dim = items[0].token_features.shape[1]
    max_len = max(e.token_features.shape[0] for e in items)
    feats = torch.zeros(batch, max_len, dim, dtype=dtype)
    pad = torch.ones(batch, max_len, dtype=torch.bool)
    for i, e in enumerate(items):
        L = e.token_features.shape[0]
        feats[i, :L] = torch.from_numpy(e.token_features).to(dtype)
        pad[i, :L] = False
    return feats, pad


def lowres_denoise(
    model: DenoisingUNet3d,
    xt: np.ndarray,
    t: int | np.ndarray,
    f_text: TextEmbedding | Sequence[TextEmbedding],
) -> np.ndarray:
    """Inference-mode x0 prediction for a (B, C, n, n, n) array."""
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(xt, dtype=np.float32))
        tt = torch.full((x.shape[0],), int(t), dtype=torch.long) if np.isscalar(t) else torch.from_numpy(np.asarray(t, dtype=np.int64))
        feats, pad = text_condition_tensors(f_text, x.shape[0])
        out = model(x, tt, text=feats, text_pad_mask=pad)
    return out.numpy()


def superres_denoise(
    model: DenoisingUNet3d,
    xt: np.ndarray,
    x0_low_up: np.ndarray,
    t: int | np.ndarray,
) -> np.ndarray:
    """Inference-mode x0 prediction conditioned on the upsampled low-res volume."""
    if xt.shape != x0_low_up.shape:
        raise ShapeError(f"xt shape {xt.shape} != conditioning shape {x0_low_up.shape}")
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(xt, dtype=np.float32))
        c = torch.from_numpy(np.ascontiguousarray(x0_low_up, dtype=np.float32))
        tt = torch.full((x.shape[0],), int(t), dtype=torch.long) if np.isscalar(t) else torch.from_numpy(np.asarray(t, dtype=np.int64))
        out = model(torch.cat([x, c], dim=1), tt)
    return out.numpy()


@dataclass(frozen=True)
class AttentionCostReport:
    tokens_bottleneck: int
    tokens_full_res: int
    flops_bottleneck_attention: float
    flops_hypothetical_fullres_attention: float
    quadratic_ratio: float


def attention_cost_report(config: DenoiserConfig, input_size: int) -> AttentionCostReport:
    """Analytic attention FLOPs at the bottleneck vs at full resolution.

    The quadratic term of multi-head attention over m tokens of width d
    costs 4 m^2 d flops (score matrix plus weighted sum); moving it from
    full resolution to the bottleneck scales it by (m/M)^2.
    """
    config.validate(input_size=input_size)
    factor = 2 ** (config.n_levels - 1)
    m = (input_size // factor) ** 3
    M = input_size ** 3
    d = config.base_width * config.channel_multipliers[-1]
    flops_b = 4.0 * m * m * d + 8.0 * m * d * d
    flops_f = 4.0 * M * M * d + 8.0 * M * d * d
    return AttentionCostReport(
        tokens_bottleneck=m,
        tokens_full_res=M,
        flops_bottleneck_attention=flops_b,
        flops_hypothetical_fullres_attention=flops_f,
        quadratic_ratio=(m / M) ** 2,
    )
