"""Cross-frame identity synchronisation.

Cross-attention layers record, per frame and per character, how strongly
each latent location attends to the character's description tokens.
Self-attention layers later in the same forward pass turn the accumulated
maps into key masks and attend jointly over all frames of a story, with a
``log(mask)`` bias that restricts cross-frame attention to character regions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class NoPrecedingMapsError(RuntimeError):
    """Raised when masks are requested before any cross-attention layer ran."""


@dataclass(frozen=True)
class AmsaConfig:
    eps: float = 1e-6
    enabled: bool = True
    # Testing hook: every self-attention block sees all-ones masks.
    force_unit_masks: bool = False
    # Fixed policies, kept as fields so reports can print them.
    head_aggregation: str = "mean"
    own_frame: str = "unmasked"
    character_union: str = "max"

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")


@dataclass
class AttentionMaskStack:
    """Maps recorded during one forward pass, in forward order.

    Each record is ``(layer_index, maps)`` with maps shaped
    ``(frames, characters, H_i, W_i)``. Raw maps are softmax probabilities;
    normalisation to [0, 1] happens in :func:`accumulate_maps`.
    """

    records: list[tuple[int, torch.Tensor]] = field(default_factory=list)

    def record(self, layer: int, maps: torch.Tensor) -> None:
        self.records.append((layer, maps))

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def resolutions(self) -> list[tuple[int, int]]:
        return [tuple(m.shape[-2:]) for _, m in self.records]

    def preceding(self, layer: int) -> list[torch.Tensor]:
        return [m for i, m in self.records if i < layer]


def _check_spans(spans: torch.Tensor, valid: torch.Tensor, n_tokens: int) -> None:
    if spans.numel() == 0:
        return
    s, e = spans[..., 0][valid], spans[..., 1][valid]
    if (e < s).any():
        raise ValueError("zero-length character span")
    if (s < 0).any() or (e >= n_tokens).any():
        raise ValueError(f"character span outside the {n_tokens}-token prompt")


def span_weights(spans: torch.Tensor, valid: torch.Tensor, n_tokens: int, dtype=torch.float32):
    """(frames, L, M) matrix averaging token probabilities over each span."""
    _check_spans(spans, valid, n_tokens)
    pos = torch.arange(n_tokens, device=spans.device).view(1, n_tokens, 1)
    inside = (pos >= spans[:, None, :, 0]) & (pos <= spans[:, None, :, 1]) & valid[:, None, :]
    w = inside.to(dtype)
    return w / w.sum(dim=1, keepdim=True).clamp_min(1.0)


def span_maps(probs: torch.Tensor, spans, valid, hw: tuple[int, int]) -> torch.Tensor:
    """Average head-pooled attention probabilities ``(frames, S, L)`` over each span."""
    bn, s, n_tokens = probs.shape
    w = span_weights(spans, valid, n_tokens, probs.dtype)
    maps = probs @ w  # (frames, S, M)
    return maps.transpose(1, 2).reshape(bn, w.shape[-1], *hw)


def record_cross_attention_map(stack: AttentionMaskStack | None, layer: int, query_states, text_keys,
                               spans, valid, hw: tuple[int, int], heads: int = 1) -> torch.Tensor:
    """Per-character cross-attention maps for one layer.

    ``query_states`` is ``(frames, H*W, D)`` and ``text_keys`` ``(frames, L, D)``,
    both already projected. Probabilities are taken over the token axis,
    averaged over heads and then over the tokens of each character span.
    """
    bn, s, d = query_states.shape
    if s != hw[0] * hw[1]:
        raise ValueError(f"query has {s} positions, layer resolution is {hw}")
    dh = d // heads
    q = query_states.view(bn, s, heads, dh).transpose(1, 2)
    k = text_keys.view(bn, -1, heads, dh).transpose(1, 2)
    probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1).mean(1)
    maps = span_maps(probs, spans, valid, hw)
    if stack is not None:
        stack.record(layer, maps)
    return maps


def max_normalize(maps: torch.Tensor) -> torch.Tensor:
    peak = maps.flatten(-2).amax(-1)[..., None, None]
    return torch.where(peak > 0, maps / peak.clamp_min(torch.finfo(maps.dtype).tiny), torch.zeros_like(maps))


def resize_map(maps: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(maps.shape[-2:]) == tuple(size):
        return maps
    return F.interpolate(maps, size=size, mode="bilinear", align_corners=False)


def accumulate_maps(stack: AttentionMaskStack, up_to_layer: int | None, size: tuple[int, int]) -> torch.Tensor:
    """Sum the maps recorded before ``up_to_layer`` at ``size``, then max-normalise.

    ``up_to_layer=None`` accumulates every recorded layer.
    """
    maps = [m for _, m in stack.records] if up_to_layer is None else stack.preceding(up_to_layer)
    if not maps:
        raise NoPrecedingMapsError(
            "no cross-attention maps recorded before this layer; skip AMSA at the first attention block")
    total = resize_map(maps[0], size)
    for m in maps[1:]:
        total = total + resize_map(m, size)
    return max_normalize(total)


def build_frame_mask(accumulated: torch.Tensor, valid: torch.Tensor | None, eps: float) -> torch.Tensor:
    """Union of character maps per frame, clamped to ``[eps, 1]``.

    ``accumulated`` is ``(frames, M, H, W)``; frames without any valid
    character are fully visible (all ones).
    """
    bn, m = accumulated.shape[:2]
    if valid is None:
        valid = torch.ones(bn, m, dtype=torch.bool, device=accumulated.device)
    if m == 0:
        return torch.ones(bn, *accumulated.shape[2:], dtype=accumulated.dtype, device=accumulated.device)
    masked = accumulated.masked_fill(~valid[:, :, None, None], float("-inf"))
    union = masked.amax(dim=1)
    has_char = valid.any(dim=1)[:, None, None]
    union = torch.where(has_char, union, torch.ones_like(union))
    return union.clamp(eps, 1.0)


def frame_key_bias(masks: torch.Tensor, num_frames: int) -> torch.Tensor:
    """Additive logits ``(B, N*S, N*S)`` from per-frame key masks ``(B*N, S)``.

    Keys in the query's own frame get 0; keys in other frames get the log of
    their own frame's mask at their location.
    """
    bn, s = masks.shape
    b = bn // num_frames
    if (masks <= 0).any():
        raise ValueError("AMSA masks must be clamped to [eps, 1]; found values <= 0")
    log_keys = masks.log().reshape(b, 1, num_frames * s)
    frame_of = torch.arange(num_frames, device=masks.device).repeat_interleave(s)
    own = frame_of[:, None] == frame_of[None, :]
    return log_keys.expand(b, num_frames * s, num_frames * s).masked_fill(own, 0.0)


def amsa_attention(q, k, v, masks: torch.Tensor | None, num_frames: int, heads: int = 1) -> torch.Tensor:
    """Joint self-attention over all frames of each story.

    ``q, k, v`` are ``(B*N, S, D)`` projections in concatenated layout;
    ``masks`` is ``(B*N, S)`` with values in ``[eps, 1]``, or None for an
    unbiased full-sequence attention. Returns ``(B*N, S, D)``.
    """
    bn, s, d = q.shape
    if bn % num_frames:
        raise ValueError(f"leading size {bn} not divisible by num_frames={num_frames}")
    b, dh = bn // num_frames, d // heads

    def fold(x):
        return x.reshape(b, num_frames * s, heads, dh).transpose(1, 2)

    bias = None
    if masks is not None:
        bias = frame_key_bias(masks.reshape(bn, s), num_frames)[:, None].to(q.dtype)
    out = F.scaled_dot_product_attention(fold(q), fold(k), fold(v), attn_mask=bias)
    return out.transpose(1, 2).reshape(bn, s, d)


def frame_attention(q, k, v, heads: int = 1) -> torch.Tensor:
    """Standard per-image self-attention, ``(B*N, S, D)``."""
    bn, s, d = q.shape
    dh = d // heads

    def split(x):
        return x.reshape(bn, s, heads, dh).transpose(1, 2)

    out = F.scaled_dot_product_attention(split(q), split(k), split(v))
    return out.transpose(1, 2).reshape(bn, s, d)


@dataclass
class PassContext:
    """Per-forward-pass state shared by the attention blocks."""

    num_frames: int
    hw_of: dict = field(default_factory=dict)
    spans: torch.Tensor | None = None
    valid: torch.Tensor | None = None
    stack: AttentionMaskStack | None = None
    amsa: AmsaConfig | None = None
    id_tokens: torch.Tensor | None = None


class SelfAttention(nn.Module):
    """Self-attention whose key set depends on the model's synchronisation mode.

    * ``frame``: each image attends to itself (the backbone default);
    * ``full``: every frame attends to all frames of its story, unbiased;
    * ``amsa``: as ``full`` with a log-mask bias on other frames' keys.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        self.mode = "frame"
        self.layer_index = -1

    def forward(self, x: torch.Tensor, ctx: PassContext, hw: tuple[int, int]) -> torch.Tensor:
        q, k, v = self.to_q(x), self.to_k(x), self.to_v(x)
        mode, masks = self.mode, None
        if mode == "amsa":
            cfg = ctx.amsa
            if cfg is None or not cfg.enabled:
                mode = "frame"
            elif cfg.force_unit_masks:
                masks = torch.ones(x.shape[:2], dtype=x.dtype, device=x.device)
            else:
                try:
                    acc = accumulate_maps(ctx.stack, self.layer_index, hw)
                except NoPrecedingMapsError:
                    mode = "frame"
                else:
                    masks = build_frame_mask(acc, ctx.valid, cfg.eps).flatten(1)
        if mode == "frame":
            out = frame_attention(q, k, v, self.heads)
        else:
            out = amsa_attention(q, k, v, masks, ctx.num_frames, self.heads)
        return self.to_out(out)


class CrossAttention(nn.Module):
    """Text cross-attention. Records character maps when a stack is present;
    an attached identity adapter adds its gated output before ``to_out``."""

    def __init__(self, dim: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        self.id_adapter: nn.Module | None = None
        self.layer_index = -1

    def forward(self, x, context, ctx: PassContext, hw: tuple[int, int]) -> torch.Tensor:
        bn, s, d = x.shape
        dh = d // self.heads
        q = self.to_q(x).view(bn, s, self.heads, dh).transpose(1, 2)
        k = self.to_k(context).view(bn, -1, self.heads, dh).transpose(1, 2)
        v = self.to_v(context).view(bn, -1, self.heads, dh).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = probs @ v
        if ctx.stack is not None and ctx.spans is not None:
            ctx.stack.record(self.layer_index, span_maps(probs.mean(1), ctx.spans, ctx.valid, hw))
        if self.id_adapter is not None and ctx.id_tokens is not None:
            out = out + self.id_adapter(q, ctx.id_tokens)
        return self.to_out(out.transpose(1, 2).reshape(bn, s, d))


class Synchronizer:
    """Handle returned by :func:`attach_synchronizer`; owns the map stack."""

    def __init__(self, config: AmsaConfig):
        self.config = config
        self.stack = AttentionMaskStack()


def attach_synchronizer(unet: nn.Module, config: AmsaConfig | None = None) -> Synchronizer:
    if getattr(unet, "synchronizer", None) is not None:
        raise RuntimeError("a synchronizer is already attached to this model")
    sync = Synchronizer(config or AmsaConfig())
    for mod in unet.modules():
        if isinstance(mod, SelfAttention):
            mod.mode = "amsa"
    unet.synchronizer = sync
    return sync


def detach_synchronizer(unet: nn.Module) -> None:
    if getattr(unet, "synchronizer", None) is None:
        raise RuntimeError("no synchronizer attached")
    for mod in unet.modules():
        if isinstance(mod, SelfAttention):
            mod.mode = getattr(unet, "self_attention_mode", "frame")
    unet.synchronizer.stack.clear()
    unet.synchronizer = None
