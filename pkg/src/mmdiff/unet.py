"""Noise-predicting U-Net conditioned through cross-attention.

Three resolution levels with residual blocks and, at the two coarser
levels, interleaved self-attention and cross-attention over the condition
sequence. Skip connections are additive (channels are matched by the
upsampling projections), which keeps the parameter count well under the
toy budget without giving up network depth.

The condition is a (B, L, d_cond) hidden-state sequence of any length L;
passing None routes to a learned NULL embedding of length 1, which is how
unconditional branches run during classifier-free guidance. An optional
per-key attention factor vector reweights the condition keys in every
cross-attention layer with the same score + log(theta) rule the embedder
uses, so a prompt's factors act where text and image evidence actually
compete for influence on the image; theta=0 keys receive exactly zero
mass, making a fully suppressed element bit-equivalent to leaving it out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .embedder import reweight_scores, softmax_suppressed
from .numerics import sinusoidal_features


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 3)
    attention_levels: tuple[int, ...] = (1, 2)   # level indices with attention
    cross_attention_dim: int = 128
    time_dim: int = 128
    n_heads: int = 4
    image_size: int = 32

    def __post_init__(self):
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("unet config: channel counts must be positive")
        levels = len(self.channel_mults)
        if any(lv < 0 or lv >= levels for lv in self.attention_levels):
            raise ValueError(f"unet config: attention levels must index into {levels} levels")
        if self.image_size % (2 ** (levels - 1)) != 0:
            raise ValueError(
                f"unet config: image size {self.image_size} not divisible by 2^{levels - 1}"
            )
        for m in self.channel_mults:
            c = self.base_channels * m
            if c % 8 != 0:
                raise ValueError(f"unet config: level width {c} must be divisible by 8 (group norm)")
            if c % self.n_heads != 0:
                raise ValueError(f"unet config: level width {c} not divisible by {self.n_heads} heads")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(torch.nn.functional.silu(t_emb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialAttention(nn.Module):
    """Self-attention over pixels followed by cross-attention to the condition."""

    def __init__(self, channels: int, cond_dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = channels // n_heads
        self.norm_self = nn.GroupNorm(8, channels)
        # no biases on the projections: a key bias shifts every key equally,
        # which softmax cancels exactly, leaving a parameter no gradient can
        # ever reach
        self.qkv = nn.Linear(channels, 3 * channels, bias=False)
        self.self_out = nn.Linear(channels, channels)
        self.norm_cross = nn.GroupNorm(8, channels)
        self.q_cross = nn.Linear(channels, channels, bias=False)
        self.k_cross = nn.Linear(cond_dim, channels, bias=False)
        self.v_cross = nn.Linear(cond_dim, channels, bias=False)
        self.cross_out = nn.Linear(channels, channels)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, self.head_dim).transpose(1, 2)

    def _attend(self, q, k, v, theta: torch.Tensor | None = None) -> torch.Tensor:
        scores = (q / math.sqrt(self.head_dim)) @ k.transpose(-2, -1)
        if theta is None:
            w = torch.softmax(scores, dim=-1)
        else:
            w = softmax_suppressed(reweight_scores(scores, theta))
        out = w @ v
        B, _, L, _ = out.shape
        return out.transpose(1, 2).reshape(B, L, self.n_heads * self.head_dim)

    def forward(
        self, x: torch.Tensor, cond: torch.Tensor, theta: torch.Tensor | None = None
    ) -> torch.Tensor:
        B, C, H, W = x.shape

        h = self.norm_self(x).flatten(2).transpose(1, 2)       # (B, HW, C)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        h = self.self_out(self._attend(self._heads(q), self._heads(k), self._heads(v)))
        x = x + h.transpose(1, 2).view(B, C, H, W)

        h = self.norm_cross(x).flatten(2).transpose(1, 2)
        q = self._heads(self.q_cross(h))
        k = self._heads(self.k_cross(cond))
        v = self._heads(self.v_cross(cond))
        h = self.cross_out(self._attend(q, k, v, theta))
        return x + h.transpose(1, 2).view(B, C, H, W)


class UNet(nn.Module):
    """Epsilon predictor F(x_t, c, t); output shape always equals input shape."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        w = config.widths
        td = config.time_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(64, td), nn.SiLU(), nn.Linear(td, td)
        )
        self.null_condition = nn.Parameter(torch.randn(1, config.cross_attention_dim) * 0.02)

        self.conv_in = nn.Conv2d(config.in_channels, w[0], 3, padding=1)
        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, width in enumerate(w):
            c_in = w[i - 1] if i > 0 else w[0]
            self.down_res.append(ResBlock(c_in, width, td))
            self.down_attn.append(
                SpatialAttention(width, config.cross_attention_dim, config.n_heads)
                if i in config.attention_levels else nn.Identity()
            )
            if i < len(w) - 1:
                self.downsamples.append(nn.Conv2d(width, width, 3, stride=2, padding=1))

        self.mid_res = ResBlock(w[-1], w[-1], td)
        self.mid_attn = SpatialAttention(w[-1], config.cross_attention_dim, config.n_heads)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(w))):
            self.up_res.append(ResBlock(w[i], w[i], td))
            self.up_attn.append(
                SpatialAttention(w[i], config.cross_attention_dim, config.n_heads)
                if i in config.attention_levels else nn.Identity()
            )
            if i > 0:
                self.upsamples.append(nn.Conv2d(w[i], w[i - 1], 1))

        self.norm_out = nn.GroupNorm(8, w[0])
        self.conv_out = nn.Conv2d(w[0], config.in_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(
        self,
        x: torch.Tensor,
        cond: torch.Tensor | None,
        t,
        cond_theta: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """x: (B, C, H, W); cond: (B, L, d_cond) or None for NULL; t: int or (B,);
        cond_theta: optional (L,) per-key attention factors for the condition."""
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        B = x.shape[0]
        if cond is None:
            if cond_theta is not None:
                raise ValueError("attention factors need a condition to act on")
            cond = self.null_condition[None].expand(B, -1, -1)
        if cond.dim() != 3 or cond.shape[0] != B or cond.shape[2] != self.config.cross_attention_dim:
            raise ValueError(
                f"condition must be ({B}, L, {self.config.cross_attention_dim}), got {tuple(cond.shape)}"
            )
        if cond_theta is not None and (cond_theta.dim() != 1 or cond_theta.shape[0] != cond.shape[1]):
            raise ValueError(
                f"attention factors must be ({cond.shape[1]},), got {tuple(cond_theta.shape)}"
            )
        t = torch.as_tensor(t, dtype=torch.float32)
        if t.dim() == 0:
            t = t.expand(B)
        t_emb = self.time_mlp(sinusoidal_features(t, 64))

        skips = []
        h = self.conv_in(x)
        for i in range(len(self.down_res)):
            h = self.down_res[i](h, t_emb)
            if not isinstance(self.down_attn[i], nn.Identity):
                h = self.down_attn[i](h, cond, cond_theta)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)

        h = self.mid_res(h, t_emb)
        h = self.mid_attn(h, cond, cond_theta)

        for j in range(len(self.up_res)):
            h = h + skips[len(skips) - 1 - j]
            h = self.up_res[j](h, t_emb)
            if not isinstance(self.up_attn[j], nn.Identity):
                h = self.up_attn[j](h, cond, cond_theta)
            if j < len(self.upsamples):
                h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[j](h)

        return self.conv_out(torch.nn.functional.silu(self.norm_out(h)))
