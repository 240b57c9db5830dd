"""Text-conditioned U-Net used by both diffusion stages.

Three resolution levels, one residual block each, optional cross-attention to
a small transformer text encoder. The encoder half is a separate module so a
control branch can copy it verbatim.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .synth_dataset import MAX_TOKENS, VOCAB


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    out_channels: int
    widths: tuple = (64, 128, 256)
    attn_levels: tuple = (False, True, True)
    context_dim: int = 128
    time_dim: int = 128
    text_layers: int = 2
    text_heads: int = 4
    vocab_size: int = len(VOCAB)
    max_tokens: int = MAX_TOKENS

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "attn_levels", tuple(bool(a) for a in self.attn_levels))
        if len(self.widths) != 3 or len(self.attn_levels) != 3:
            raise ValueError("three levels expected")

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(16, c), c)


class TimeResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1, self.conv1 = _norm(cin), nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2, self.conv2 = _norm(cout), nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    def __init__(self, channels: int, context_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = _norm(channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(context_dim, channels, bias=False)
        self.v = nn.Linear(context_dim, channels, bias=False)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x, context):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q = self.q(tokens).view(b, h * w, self.heads, -1).transpose(1, 2)
        k = self.k(context).view(b, context.shape[1], self.heads, -1).transpose(1, 2)
        v = self.v(context).view(b, context.shape[1], self.heads, -1).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        out = self.proj(out.transpose(1, 2).reshape(b, h * w, c))
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Level(nn.Module):
    def __init__(self, cin, cout, temb, context_dim, attn):
        super().__init__()
        self.res = TimeResBlock(cin, cout, temb)
        self.attn = CrossAttention(cout, context_dim) if attn else None

    def forward(self, x, temb, ctx):
        x = self.res(x, temb)
        return self.attn(x, ctx) if self.attn is not None else x


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, dim: int, layers: int, heads: int, max_tokens: int):
        super().__init__()
        self.tok = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(max_tokens, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=0.0, batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, ids):
        return self.norm(self.blocks(self.tok(ids) + self.pos[: ids.shape[1]]))


class UNetEncoder(nn.Module):
    def __init__(self, cfg: UNetConfig, temb: int):
        super().__init__()
        w0, w1, w2 = cfg.widths
        a0, a1, a2 = cfg.attn_levels
        d = cfg.context_dim
        self.conv_in = nn.Conv2d(cfg.in_channels, w0, 3, padding=1)
        self.levels = nn.ModuleList([Level(w0, w0, temb, d, a0), Level(w0, w1, temb, d, a1), Level(w1, w2, temb, d, a2)])
        self.downs = nn.ModuleList([nn.Conv2d(w0, w0, 3, stride=2, padding=1), nn.Conv2d(w1, w1, 3, stride=2, padding=1)])
        self.mid1 = TimeResBlock(w2, w2, temb)
        self.mid_attn = CrossAttention(w2, d)
        self.mid2 = TimeResBlock(w2, w2, temb)

    def forward(self, x, temb, ctx, extra=None):
        """Returns (per-level skips, mid); ``extra`` is added after conv_in."""
        h = self.conv_in(x)
        if extra is not None:
            h = h + extra
        skips = []
        for i, level in enumerate(self.levels):
            if i > 0:
                h = self.downs[i - 1](h)
            h = level(h, temb, ctx)
            skips.append(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb), ctx), temb)
        return skips, h


class UNetDecoder(nn.Module):
    def __init__(self, cfg: UNetConfig, temb: int):
        super().__init__()
        w0, w1, w2 = cfg.widths
        a0, a1, a2 = cfg.attn_levels
        d = cfg.context_dim
        self.levels = nn.ModuleDict({
            "2": Level(w2 + w2, w2, temb, d, a2),
            "1": Level(w2 + w1, w1, temb, d, a1),
            "0": Level(w1 + w0, w0, temb, d, a0),
        })
        self.ups = nn.ModuleDict({"1": nn.Conv2d(w2, w2, 3, padding=1), "0": nn.Conv2d(w1, w1, 3, padding=1)})
        self.out_norm = _norm(w0)
        self.out = nn.Conv2d(w0, cfg.out_channels, 3, padding=1)

    def forward(self, skips, mid, temb, ctx):
        h = mid
        for i in (2, 1, 0):
            if i < 2:
                h = self.ups[str(i)](F.interpolate(h, scale_factor=2.0, mode="nearest"))
            h = self.levels[str(i)](torch.cat([h, skips[i]], dim=1), temb, ctx)
        return self.out(F.silu(self.out_norm(h)))


class CondUNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        temb = 4 * cfg.widths[0]
        self.time_embed = nn.Sequential(nn.Linear(cfg.time_dim, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.text = TextEncoder(cfg.vocab_size, cfg.context_dim, cfg.text_layers, cfg.text_heads, cfg.max_tokens)
        self.enc = UNetEncoder(cfg, temb)
        self.dec = UNetDecoder(cfg, temb)

    def embed(self, t, text_ids):
        return self.time_embed(timestep_embedding(t, self.cfg.time_dim)), self.text(text_ids)

    def forward(self, x, t, text_ids, residuals=None):
        """``residuals`` = (per-level skip additions, mid addition) from a control branch."""
        temb, ctx = self.embed(t, text_ids)
        skips, mid = self.enc(x, temb, ctx)
        if residuals is not None:
            extra_skips, extra_mid = residuals
            skips = [s + r for s, r in zip(skips, extra_skips)]
            mid = mid + extra_mid
        return self.dec(skips, mid, temb, ctx)
