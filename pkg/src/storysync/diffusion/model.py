"""The full story model: text encoder, UNet, optional synchronizer and injector."""

from __future__ import annotations

import torch
import torch.nn as nn

from ..core.config import ModelConfig
from ..core.types import FrameBatch, concat_frames, split_frames
from ..injector import FaceCondition, IDInjector, attach_injector
from ..synchronizer import AmsaConfig, attach_synchronizer, detach_synchronizer
from .unet import StoryUNet, TextEncoder, null_token_ids


class StoryModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.text_encoder = TextEncoder(config.text_dim, config.max_text_len, config.vocab_version,
                                        config.num_heads)
        self.unet = StoryUNet(config)
        self.injector: IDInjector | None = None

    # -- wiring ---------------------------------------------------------
    def attach_synchronizer(self, amsa: AmsaConfig | None = None):
        amsa = amsa or AmsaConfig(eps=self.config.mask_eps, enabled=self.config.amsa)
        return attach_synchronizer(self.unet, amsa)

    def detach_synchronizer(self) -> None:
        detach_synchronizer(self.unet)

    @property
    def synchronizer(self):
        return self.unet.synchronizer

    def add_injector(self) -> IDInjector:
        if self.injector is not None:
            raise RuntimeError("model already has an injector")
        injector = IDInjector(self.config)
        injector.build_adapters(self.unet)
        self.injector = injector
        attach_injector(self.unet, injector)
        return injector

    # -- conditioning ---------------------------------------------------
    def encode_text(self, ids: torch.Tensor) -> torch.Tensor:
        return self.text_encoder(ids)

    def null_text(self) -> torch.Tensor:
        return self.text_encoder(null_token_ids(self.config.max_text_len).to(self.unet.conv_in.weight.device))

    def face_condition(self, refs: torch.Tensor, null_flags=None) -> FaceCondition:
        if self.injector is None:
            raise RuntimeError("model has no identity injector")
        return self.injector.face_condition(refs, null_flags)

    # -- forward ----------------------------------------------------------
    def forward(self, z: torch.Tensor, t, text_emb: torch.Tensor, *, num_frames: int, spans=None, valid=None,
                c_f: FaceCondition | None = None) -> torch.Tensor:
        """Noise prediction for concatenated latents ``(B*N, C, H, W)``."""
        id_tokens = None if c_f is None else c_f.embeddings
        if id_tokens is not None and id_tokens.shape[0] != z.shape[0]:
            raise ValueError(f"face condition has {id_tokens.shape[0]} rows, latents {z.shape[0]}")
        return self.unet(z, t, text_emb, num_frames=num_frames, spans=spans, valid=valid, id_tokens=id_tokens)

    def recorded_maps(self):
        return None if self.synchronizer is None else self.synchronizer.stack


def unet_forward(model: StoryModel, z: FrameBatch, t, text_emb, spans=None, valid=None,
                 c_f: FaceCondition | None = None) -> FrameBatch:
    """FrameBatch-level forward; accepts either layout and returns the same layout."""
    per_frame = z.layout == "per-frame"
    zc = concat_frames(z) if per_frame else z
    out = model(zc.latents, t, text_emb, num_frames=zc.num_frames, spans=spans, valid=valid, c_f=c_f)
    res = FrameBatch(out, zc.num_frames, zc.timestep, "concatenated")
    return split_frames(res) if per_frame else res
