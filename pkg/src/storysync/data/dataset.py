"""Dataset directories and tensor batches for training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..core.tokenizer import pad_ids, tokenize
from .records import StoryGroup, load_story_group, make_id_bucket, to_tensor_image, write_story_group
from .synthetic import IdentitySpec, identity_pool
from .records import generate_synthetic_group


def generate_dataset(root, num_groups: int, num_frames: int, seed: int, size: int = 64,
                     identities: list[IdentitySpec] | None = None) -> list[StoryGroup]:
    """Generate and write ``num_groups`` groups, cycling through ``identities``."""
    identities = identities or identity_pool(seed)
    ss = np.random.SeedSequence(seed)
    group_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(num_groups)]
    groups = []
    for g in range(num_groups):
        ident = identities[g % len(identities)]
        group = generate_synthetic_group(ident, num_frames, group_seeds[g], size, group_id=f"g{g:04d}")
        if root is not None:
            write_story_group(group, root)
        groups.append(group)
    return groups


def load_dataset(root) -> list[StoryGroup]:
    gdirs = sorted(p for p in (Path(root) / "groups").iterdir() if p.is_dir())
    if not gdirs:
        raise FileNotFoundError(f"no groups under {root}/groups")
    return [load_story_group(p) for p in gdirs]


@dataclass
class StoryBatch:
    """Concatenated-layout tensors for B stories of N frames."""

    images: torch.Tensor  # (B*N, 3, H, W) in [-1, 1]
    ids: torch.Tensor  # (B*N, L)
    spans: torch.Tensor  # (B*N, M, 2)
    valid: torch.Tensor  # (B*N, M)
    masks: torch.Tensor  # (B*N, M, H, W) float {0, 1}
    refs: torch.Tensor | None  # (B*N, 3, r, r)
    num_frames: int
    group_ids: tuple[str, ...]

    @property
    def num_stories(self) -> int:
        return self.images.shape[0] // self.num_frames

    def to(self, dtype) -> "StoryBatch":
        cast = lambda t: None if t is None else t.to(dtype)
        return StoryBatch(cast(self.images), self.ids, self.spans, self.valid, cast(self.masks),
                          cast(self.refs), self.num_frames, self.group_ids)


def collate(groups: list[StoryGroup], max_len: int, ref_size: int | None = None) -> StoryBatch:
    n = groups[0].num_frames
    if any(g.num_frames != n for g in groups):
        raise ValueError("all groups in a batch must have the same frame count")
    m = max(g.num_characters for g in groups)
    images, ids, spans, valid, masks, refs = [], [], [], [], [], []
    for g in groups:
        images.append(to_tensor_image(g.images))
        for f in range(n):
            ids.append(pad_ids(tokenize(g.prompts[f]), max_len))
            sp = torch.zeros(m, 2, dtype=torch.long)
            va = torch.zeros(m, dtype=torch.bool)
            for c in range(g.num_characters):
                sp[c] = torch.tensor(g.spans[f][c])
                va[c] = (f, c) not in g.missing_masks
            spans.append(sp)
            valid.append(va)
        mk = np.zeros((n, m) + g.masks.shape[-2:], np.float32)
        mk[:, : g.num_characters] = g.masks
        masks.append(torch.from_numpy(mk))
        if ref_size is not None:
            refs.append(make_id_bucket(g, ref_size).images)
    return StoryBatch(
        images=torch.cat(images),
        ids=torch.tensor(ids),
        spans=torch.stack(spans),
        valid=torch.stack(valid),
        masks=torch.cat(masks),
        refs=torch.cat(refs) if refs else None,
        num_frames=n,
        group_ids=tuple(g.group_id for g in groups),
    )
