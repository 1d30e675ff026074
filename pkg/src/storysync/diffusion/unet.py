"""Toy text-conditioned UNet with story-aware attention blocks."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.config import ModelConfig
from ..core.tokenizer import PAD_ID, vocab_size
from ..synchronizer import CrossAttention, PassContext, SelfAttention


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([args.cos(), args.sin()], dim=-1)


class TextEncoder(nn.Module):
    def __init__(self, dim: int, max_len: int, vocab_version: int = 1, heads: int = 4):
        super().__init__()
        self.tok = nn.Embedding(vocab_size(vocab_version), dim)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.layer = nn.TransformerEncoderLayer(dim, heads, dim * 4, dropout=0.0, batch_first=True,
                                                norm_first=True)
        self.norm = nn.LayerNorm(dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.tok(ids) + self.pos[: ids.shape[1]]
        return self.norm(self.layer(x))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class StoryTransformerBlock(nn.Module):
    """Self-attention (story-aware), text cross-attention, feed-forward."""

    def __init__(self, dim: int, context_dim: int, heads: int):
        super().__init__()
        self.norm_in = nn.GroupNorm(8, dim)
        self.proj_in = nn.Conv2d(dim, dim, 1)
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = CrossAttention(dim, context_dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim))
        self.proj_out = nn.Conv2d(dim, dim, 1)

    def set_layer_index(self, i: int) -> None:
        self.attn1.layer_index = i
        self.attn2.layer_index = i

    def forward(self, x, context, ctx: PassContext):
        bn, c, h, w = x.shape
        hs = self.proj_in(self.norm_in(x)).flatten(2).transpose(1, 2)
        hs = hs + self.attn1(self.norm1(hs), ctx, (h, w))
        hs = hs + self.attn2(self.norm2(hs), context, ctx, (h, w))
        hs = hs + self.ff(self.norm3(hs))
        return x + self.proj_out(hs.transpose(1, 2).reshape(bn, c, h, w))


class StoryUNet(nn.Module):
    """Three-level UNet; transformer blocks at ``config.attention_levels``.

    Input and output are in concatenated layout ``(B*N, C, H, W)``; the
    frame count travels in the pass context so self-attention can group
    frames by story.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        ch = config.unet_channels
        temb = ch[0] * 4
        ctx_dim, heads = config.text_dim, config.num_heads
        self.config = config
        self.time_mlp = nn.Sequential(nn.Linear(ch[0], temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(config.latent_channels, ch[0], 3, padding=1)

        def attn(level, c):
            return StoryTransformerBlock(c, ctx_dim, heads) if level in config.attention_levels else None

        self.down_res, self.down_attn, self.downsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        prev = ch[0]
        for lvl, c in enumerate(ch):
            self.down_res.append(ResBlock(prev, c, temb))
            self.down_attn.append(attn(lvl, c) or nn.Identity())
            self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1) if lvl < len(ch) - 1 else nn.Identity())
            prev = c
        self.mid_res1 = ResBlock(ch[-1], ch[-1], temb)
        self.mid_attn = attn(len(ch) - 1, ch[-1]) or nn.Identity()
        self.mid_res2 = ResBlock(ch[-1], ch[-1], temb)
        self.up_res, self.up_attn, self.upsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        for lvl in reversed(range(len(ch))):
            c = ch[lvl]
            self.up_res.append(ResBlock(2 * c, c, temb))
            self.up_attn.append(attn(lvl, c) or nn.Identity())
            self.upsample.append(nn.Conv2d(c, ch[lvl - 1], 3, padding=1) if lvl > 0 else nn.Identity())
        self.norm_out = nn.GroupNorm(8, ch[0])
        self.conv_out = nn.Conv2d(ch[0], config.latent_channels, 3, padding=1)

        for i, blk in enumerate(self.attention_blocks()):
            blk.set_layer_index(i)
        self.synchronizer = None
        self.self_attention_mode = "frame"

    def attention_blocks(self) -> list[StoryTransformerBlock]:
        """Transformer blocks in forward order."""
        return [m for m in self.modules() if isinstance(m, StoryTransformerBlock)]

    def set_self_attention_mode(self, mode: str) -> None:
        if mode not in ("frame", "full"):
            raise ValueError(f"unknown self-attention mode {mode!r}")
        self.self_attention_mode = mode
        if self.synchronizer is None:
            for m in self.modules():
                if isinstance(m, SelfAttention):
                    m.mode = mode

    def _block(self, blk, x, context, ctx):
        return x if isinstance(blk, nn.Identity) else blk(x, context, ctx)

    def forward(self, z, t, context, *, num_frames: int, spans=None, valid=None, id_tokens=None):
        if z.ndim != 4 or z.shape[1] != self.config.latent_channels:
            raise ValueError(f"expected (B*N, {self.config.latent_channels}, H, W) latents, got {tuple(z.shape)}")
        if z.shape[0] % num_frames:
            raise ValueError(f"leading size {z.shape[0]} not divisible by num_frames={num_frames}")
        if context.shape[0] != z.shape[0]:
            raise ValueError("text context must have one row per frame")
        t = torch.as_tensor(t, device=z.device)
        if t.ndim == 0:
            t = t.expand(z.shape[0])
        stack, amsa = None, None
        if self.synchronizer is not None:
            stack, amsa = self.synchronizer.stack, self.synchronizer.config
            stack.clear()
        ctx = PassContext(num_frames=num_frames, spans=spans if stack is not None else None, valid=valid,
                          stack=stack, amsa=amsa, id_tokens=id_tokens)

        temb = self.time_mlp(timestep_embedding(t, self.config.unet_channels[0]))
        h = self.conv_in(z)
        skips = []
        for res, blk, down in zip(self.down_res, self.down_attn, self.downsample):
            h = self._block(blk, res(h, temb), context, ctx)
            skips.append(h)
            h = down(h)
        h = self.mid_res2(self._block(self.mid_attn, self.mid_res1(h, temb), context, ctx), temb)
        for res, blk, up in zip(self.up_res, self.up_attn, self.upsample):
            h = self._block(blk, res(torch.cat([h, skips.pop()], dim=1), temb), context, ctx)
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def null_token_ids(max_len: int) -> torch.Tensor:
    return torch.full((1, max_len), PAD_ID, dtype=torch.long)
