"""Small models shared by the unit and acceptance tests."""

import torch
import torch.nn as nn

from storysync.losses import ldm_loss, mask_perceptual_loss, total_loss
from storysync.synchronizer import (AmsaConfig, AttentionMaskStack, CrossAttention, PassContext, SelfAttention,
                                    accumulate_maps)


class TwoLayerToy(nn.Module):
    """Cross-attention (records character maps) followed by masked joint self-attention.

    Enough of the real path to exercise every gradient route of the
    combined objective: noise MSE through both layers, Dice through the
    cross-attention query and key projections.
    """

    def __init__(self, dim=8, ctx_dim=6, heads=2, hw=(4, 4), num_frames=2):
        super().__init__()
        self.hw, self.num_frames = hw, num_frames
        self.inp = nn.Linear(3, dim)
        self.cross = CrossAttention(dim, ctx_dim, heads)
        self.cross.layer_index = 0
        self.self_attn = SelfAttention(dim, heads)
        self.self_attn.layer_index = 1
        self.self_attn.mode = "amsa"
        self.head = nn.Linear(dim, 3)

    def forward(self, x, context, spans, valid):
        ctx = PassContext(self.num_frames, spans=spans, valid=valid, stack=AttentionMaskStack(),
                          amsa=AmsaConfig(eps=1e-3))
        h = self.inp(x)
        h = h + self.cross(h, context, ctx, self.hw)
        h = h + self.self_attn(h, ctx, self.hw)
        return self.head(h), ctx.stack


def toy_objective(model, batch, alpha=0.1):
    x, context, spans, valid, noise, gt = batch
    pred, stack = model(x, context, spans, valid)
    maps = accumulate_maps(stack, None, model.hw)
    return total_loss(ldm_loss(pred, noise), mask_perceptual_loss(maps, gt, valid), alpha)


def toy_batch(seed=0, dtype=torch.float64, num_frames=2, hw=(4, 4), ctx_dim=6, n_tokens=5):
    g = torch.Generator().manual_seed(seed)
    s = hw[0] * hw[1]
    x = torch.randn(num_frames, s, 3, generator=g, dtype=dtype)
    context = torch.randn(num_frames, n_tokens, ctx_dim, generator=g, dtype=dtype)
    spans = torch.tensor([[[1, 2]]] * num_frames)
    valid = torch.ones(num_frames, 1, dtype=torch.bool)
    noise = torch.randn(num_frames, s, 3, generator=g, dtype=dtype)
    gt = (torch.rand(num_frames, 1, *hw, generator=g) > 0.6).to(dtype)
    return x, context, spans, valid, noise, gt
