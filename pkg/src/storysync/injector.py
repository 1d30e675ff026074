"""Reference-identity injection.

Reference crops of one identity are packed into a bucket, shuffled so each
frame conditions on a same-identity image taken from another scene, encoded
by an identity encoder and a patch encoder, resampled into ``T`` condition
tokens per frame and read by gated identity cross-attention next to the text
cross-attention of every transformer block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core.config import ModelConfig
from .synchronizer import CrossAttention


@dataclass(frozen=True)
class IDBucket:
    identity_id: str
    images: torch.Tensor  # (N, 3, r, r) in [-1, 1]
    frame_indices: tuple[int, ...]
    provenance: str = "synthetic"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != len(self.frame_indices):
            raise ValueError("bucket images must be (N, 3, r, r) with one frame index per image")
        if self.provenance not in ("real", "synthetic"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return self.images.shape[0]


def shuffle_bucket(bucket: IDBucket, seed: int) -> IDBucket:
    """Uniform seeded permutation of a bucket; position n now conditions frame n."""
    if len(bucket) < 1:
        raise ValueError("cannot shuffle an empty bucket")
    perm = np.random.default_rng(seed).permutation(len(bucket))
    return replace(bucket, images=bucket.images[torch.from_numpy(perm)],
                   frame_indices=tuple(bucket.frame_indices[i] for i in perm))


def _frozen(module: nn.Module, seed: int) -> nn.Module:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.ndim > 1:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=g) * math.sqrt(2.0 / fan_in))
            else:
                p.zero_()
            p.requires_grad_(False)
    return module.eval()


class ToyIDEncoder(nn.Module):
    """Small fixed convolutional identity encoder producing unit-norm vectors.

    Weights come from a fixed seed and are never trained, mirroring a
    pretrained face-recognition network that stays frozen.
    """

    def __init__(self, image_size: int = 32, dim: int = 64, seed: int = 7):
        super().__init__()
        self.image_size = image_size
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(64, dim // 2, 3, stride=2, padding=1),
        )
        _frozen(self, seed)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} images, got {tuple(images.shape[-2:])}")
        h = self.net(images)
        feat = torch.cat([h.mean((-2, -1)), h.amax((-2, -1))], dim=-1)
        feat = feat - feat.mean(-1, keepdim=True)
        return F.normalize(feat, dim=-1)


class ToyPatchEncoder(nn.Module):
    """Fixed patch encoder returning a token grid, standing in for a CLIP image tower."""

    def __init__(self, image_size: int = 32, patch_size: int = 8, dim: int = 64, seed: int = 11):
        super().__init__()
        self.image_size, self.patch_size = image_size, patch_size
        self.patch = nn.Conv2d(3, dim, patch_size, stride=patch_size)
        self.mix = nn.Linear(dim, dim)
        _frozen(self, seed)

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} images, got {tuple(images.shape[-2:])}")
        x = self.patch(images).flatten(2).transpose(1, 2)
        return self.mix(F.gelu(x))


ID_ENCODERS: dict[str, Callable[..., nn.Module]] = {"toy": ToyIDEncoder}
IMAGE_ENCODERS: dict[str, Callable[..., nn.Module]] = {"toy": ToyPatchEncoder}


def encode_id(encoder: nn.Module, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return encoder(images)


def encode_image(encoder: nn.Module, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return encoder(images)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__(nn.LayerNorm(dim), nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))


class Resampler(nn.Module):
    """Latent-query resampler: T learned queries cross-attend over
    ``[projected id vector, patch tokens]`` for ``depth`` blocks."""

    def __init__(self, dim: int, id_dim: int, feat_dim: int, num_latents: int = 16,
                 depth: int = 2, heads: int = 4):
        super().__init__()
        self.latents = nn.Parameter(torch.randn(1, num_latents, dim) / math.sqrt(dim))
        self.id_proj = nn.Linear(id_dim, dim)
        self.feat_proj = nn.Linear(feat_dim, dim)
        self.blocks = nn.ModuleList()
        for _ in range(depth):
            self.blocks.append(nn.ModuleDict({
                "norm_q": nn.LayerNorm(dim),
                "norm_kv": nn.LayerNorm(dim),
                "attn": nn.MultiheadAttention(dim, heads, batch_first=True),
                "ff": FeedForward(dim),
            }))
        self.norm_out = nn.LayerNorm(dim)

    def forward(self, id_vec: torch.Tensor, patches: torch.Tensor) -> torch.Tensor:
        if id_vec.shape[0] != patches.shape[0]:
            raise ValueError(f"{id_vec.shape[0]} id vectors but {patches.shape[0]} patch grids")
        tokens = torch.cat([self.id_proj(id_vec)[:, None], self.feat_proj(patches)], dim=1)
        x = self.latents.expand(id_vec.shape[0], -1, -1)
        for blk in self.blocks:
            kv = blk["norm_kv"](tokens)
            x = x + blk["attn"](blk["norm_q"](x), kv, kv, need_weights=False)[0]
            x = x + blk["ff"](x)
        return self.norm_out(x)


class IdentityAttention(nn.Module):
    """Identity cross-attention reusing the host layer's queries.

    Its output is scaled by a learned gate that starts at zero, so attaching
    the adapter leaves the host model's outputs unchanged.
    """

    def __init__(self, dim: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.gate = nn.Parameter(torch.zeros(1))

    def forward(self, q: torch.Tensor, id_tokens: torch.Tensor) -> torch.Tensor:
        bn, h, s, dh = q.shape
        if id_tokens.shape[0] != bn:
            raise ValueError(f"identity tokens have leading size {id_tokens.shape[0]}, latents {bn}")
        if id_tokens.shape[-1] != self.to_k.in_features:
            raise ValueError(f"identity token width {id_tokens.shape[-1]} != {self.to_k.in_features}")
        k = self.to_k(id_tokens).view(bn, -1, h, dh).transpose(1, 2)
        v = self.to_v(id_tokens).view(bn, -1, h, dh).transpose(1, 2)
        return self.gate * F.scaled_dot_product_attention(q, k, v)


@dataclass
class FaceCondition:
    embeddings: torch.Tensor  # (B*N, T, h)
    null_flags: torch.Tensor  # (B*N,) bool


class IDInjector(nn.Module):
    def __init__(self, config: ModelConfig, id_encoder: str = "toy", image_encoder: str = "toy"):
        super().__init__()
        c = config
        self.config = c
        self.id_encoder = ID_ENCODERS[id_encoder](image_size=c.ref_size, dim=c.id_dim)
        self.image_encoder = IMAGE_ENCODERS[image_encoder](image_size=c.ref_size, patch_size=c.patch_size,
                                                           dim=c.image_feat_dim)
        self.resampler = Resampler(c.text_dim, c.id_dim, c.image_feat_dim, c.resampler_tokens,
                                   c.resampler_depth, c.num_heads)
        self.null_tokens = nn.Parameter(torch.randn(c.resampler_tokens, c.text_dim) * 0.02)
        self.adapters = nn.ModuleList()

    def build_adapters(self, unet: nn.Module) -> None:
        layers = [m for m in unet.modules() if isinstance(m, CrossAttention)]
        self.adapters = nn.ModuleList(
            IdentityAttention(m.to_q.out_features, m.to_k.in_features, m.heads) for m in layers)

    def encoder_parameters(self):
        return list(self.id_encoder.parameters()) + list(self.image_encoder.parameters())

    def resample(self, id_vec: torch.Tensor, patches: torch.Tensor) -> torch.Tensor:
        return self.resampler(id_vec, patches)

    def face_condition(self, refs: torch.Tensor, null_flags: torch.Tensor | None = None) -> FaceCondition:
        """``refs`` is ``(B*N, 3, r, r)`` in concatenated frame order."""
        emb = self.resample(encode_id(self.id_encoder, refs), encode_image(self.image_encoder, refs))
        if null_flags is None:
            null_flags = torch.zeros(refs.shape[0], dtype=torch.bool, device=refs.device)
        emb = torch.where(null_flags[:, None, None], self.null_tokens.expand_as(emb), emb)
        return FaceCondition(emb, null_flags)

    def null_condition(self, n: int) -> FaceCondition:
        return FaceCondition(self.null_tokens.expand(n, -1, -1),
                             torch.ones(n, dtype=torch.bool, device=self.null_tokens.device))


def attach_injector(unet: nn.Module, injector: IDInjector) -> None:
    layers = [m for m in unet.modules() if isinstance(m, CrossAttention)]
    if any(m.id_adapter is not None for m in layers):
        raise RuntimeError("an identity injector is already attached")
    if len(injector.adapters) != len(layers):
        injector.build_adapters(unet)
    for layer, adapter in zip(layers, injector.adapters):
        # plain attribute: adapter parameters stay owned by the injector
        object.__setattr__(layer, "id_adapter", adapter)


def detach_injector(unet: nn.Module) -> None:
    for m in unet.modules():
        if isinstance(m, CrossAttention):
            object.__setattr__(m, "id_adapter", None)


def drop_conditions(text_emb: torch.Tensor, c_f: FaceCondition | None, null_text: torch.Tensor,
                    null_tokens: torch.Tensor | None, p: float, generator: torch.Generator,
                    num_frames: int = 1):
    """Independently replace each story's text and identity conditions with nulls.

    Draws are per story (``num_frames`` consecutive rows). Returns the new
    text embedding, the new face condition and the two boolean drop masks.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must lie in [0, 1], got {p}")
    b = text_emb.shape[0] // num_frames
    drop_text = (torch.rand(b, generator=generator) < p).repeat_interleave(num_frames)
    drop_id = (torch.rand(b, generator=generator) < p).repeat_interleave(num_frames)
    text = torch.where(drop_text[:, None, None], null_text.expand_as(text_emb), text_emb)
    if c_f is not None and null_tokens is not None:
        emb = torch.where(drop_id[:, None, None], null_tokens.expand_as(c_f.embeddings), c_f.embeddings)
        c_f = FaceCondition(emb, c_f.null_flags | drop_id)
    return text, c_f, drop_text, drop_id
