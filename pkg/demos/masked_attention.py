"""
How the masked cross-frame attention routes information
=======================================================

Two frames, one query in frame 0. The character mask on frame 1 decides
how much of frame 1's keys the query may use: keys under the mask keep
their logits, keys outside it are pushed down by log(eps).
"""

import torch

from storysync.synchronizer import amsa_attention, build_frame_mask, frame_key_bias

torch.manual_seed(0)

# a 2x2 latent per frame, so 4 tokens each
q = torch.randn(2, 4, 8)
k = torch.randn(2, 4, 8)
v = torch.randn(2, 4, 8)

# a single character whose map covers the left column of frame 1
maps = torch.zeros(2, 1, 2, 2)
maps[:, 0, :, 0] = 1.0
masks = build_frame_mask(maps, torch.ones(2, 1, dtype=torch.bool), eps=1e-3).flatten(1)
print("per-key masks:\n", masks)

# the additive bias seen by every query: 0 on its own frame, log(mask) on the other frame
bias = frame_key_bias(masks, num_frames=2)
print("bias row for a frame-0 query:\n", bias[0, 0].view(2, 4))

out = amsa_attention(q, k, v, masks, num_frames=2)
unit = amsa_attention(q, k, v, torch.ones_like(masks), num_frames=2)
print("change caused by the mask, per query:", (out - unit).norm(dim=-1))
