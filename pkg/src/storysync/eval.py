"""Desk-scale story metrics with pluggable encoders, and ablation tables.

Metric values from the toy encoders only support comparisons between runs
on identical data; they are not comparable to numbers obtained with large
pretrained encoders.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core.tokenizer import split_words
from .data.synthetic import COLORS, SCENES
from .injector import ToyIDEncoder, ToyPatchEncoder
from .losses import dice_term, downsample_mask

METRICS = ("text_sim", "frame_sim_clip_style", "frame_sim_dino_style", "face_sim", "face_sim_ref", "dice")
COSINE_METRICS = set(METRICS) - {"dice"}


# -- encoder plugins ----------------------------------------------------------------

class PaletteTextImageEncoder:
    """Joint text/image space over the synthetic palette (colours and scenes).

    Text embeds as indicator weights of the colour and scene words it
    mentions. An image embeds as the square root of the fraction of pixels
    nearest each palette entry, so a small character still registers next
    to a large background.
    """

    def __init__(self):
        self.names = list(COLORS) + list(SCENES)
        self.palette = torch.tensor([COLORS[c] for c in COLORS] + [SCENES[s] for s in SCENES], dtype=torch.float32)

    @property
    def dim(self) -> int:
        return len(self.names)

    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        out = torch.zeros(len(prompts), self.dim)
        for i, p in enumerate(prompts):
            for w in split_words(p):
                if w in self.names:
                    out[i, self.names.index(w)] = 1.0
        return out

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        rgb = (images.clamp(-1, 1) + 1) * 127.5  # (B, 3, H, W)
        px = rgb.flatten(2).transpose(1, 2)  # (B, HW, 3)
        nearest = torch.cdist(px, self.palette[None].expand(px.shape[0], -1, -1)).argmin(-1)
        hist = F.one_hot(nearest, self.dim).float().mean(1)
        return hist.sqrt()


class PooledPatchEncoder:
    """Global image embedding: mean of frozen patch features (CLIP-image role)."""

    def __init__(self, image_size: int = 64, patch_size: int = 8, dim: int = 64, seed: int = 21):
        self.net = ToyPatchEncoder(image_size, patch_size, dim, seed)

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images).mean(1)


class PatchGridEncoder:
    """Layout-sensitive embedding: the standardised patch-token grid (DINO role)."""

    def __init__(self, image_size: int = 64, patch_size: int = 8, dim: int = 64, seed: int = 23):
        self.net = ToyPatchEncoder(image_size, patch_size, dim, seed)

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        tok = self.net(images)
        tok = (tok - tok.mean(1, keepdim=True)) / (tok.std(1, keepdim=True) + 1e-6)
        return tok.flatten(1)


class CropIDEncoder:
    """Identity embedding of character crops via the frozen toy ID encoder."""

    def __init__(self, crop_size: int = 32):
        self.net = ToyIDEncoder(image_size=crop_size)

    @torch.no_grad()
    def __call__(self, crops: torch.Tensor) -> torch.Tensor:
        return self.net(crops)


# -- metrics -----------------------------------------------------------------------

def _cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.cosine_similarity(a.double(), b.double(), dim=-1, eps=1e-12)


def text_image_similarity(images: torch.Tensor, prompts: Sequence[str], encoder=None) -> float:
    """Mean cosine between each image and its prompt in a joint embedding space."""
    if images.shape[0] != len(prompts):
        raise ValueError(f"{images.shape[0]} images for {len(prompts)} prompts")
    encoder = encoder or PaletteTextImageEncoder()
    return float(_cos(encoder.encode_image(images), encoder.encode_text(prompts)).mean())


def pairwise_cosine(emb: torch.Tensor) -> float:
    if emb.shape[0] < 2:
        raise ValueError("need at least two embeddings for a pairwise similarity")
    pairs = torch.combinations(torch.arange(emb.shape[0]), 2)
    return float(_cos(emb[pairs[:, 0]], emb[pairs[:, 1]]).mean())


def inter_frame_similarity(images: torch.Tensor, encoder: Callable | None = None) -> float:
    """Mean cosine over all unordered frame pairs."""
    if images.shape[0] < 2:
        raise ValueError("inter-frame similarity needs at least two frames")
    encoder = encoder or PooledPatchEncoder(images.shape[-1])
    return pairwise_cosine(encoder(images))


def face_similarity(crops: torch.Tensor, reference: torch.Tensor | None = None,
                    encoder: Callable | None = None) -> dict[str, float]:
    """``face_sim`` among frame crops, plus ``face_sim_ref`` against references when given."""
    encoder = encoder or CropIDEncoder(crops.shape[-1])
    emb = encoder(crops)
    out = {"face_sim": pairwise_cosine(emb)}
    if reference is not None:
        ref = encoder(reference)
        out["face_sim_ref"] = float(_cos(emb[:, None], ref[None]).mean())
    return out


def dice_coefficient(pred_maps: torch.Tensor, gt_masks: torch.Tensor, valid: torch.Tensor | None = None) -> float:
    """Mean Dice coefficient between soft maps and binary masks over valid pairs."""
    gt = downsample_mask(gt_masks[:, : pred_maps.shape[1]], pred_maps.shape[-2:])
    coef = 1.0 - dice_term(pred_maps, gt.to(pred_maps.dtype))
    if valid is None:
        return float(coef.mean())
    if not valid.any():
        raise ValueError("no valid (frame, character) pairs")
    return float(coef[valid].mean())


def crops_from_maps(images: torch.Tensor, maps: torch.Tensor, size: int = 32, threshold: float = 0.5,
                    character: int = 0) -> torch.Tensor:
    """Character crops located by thresholding upsampled attention maps.

    Generated images carry no ground-truth mask, so the bounding box comes
    from the model's own map of the character's description tokens.
    """
    from .data.records import character_crop, to_tensor_image, to_uint8_image

    h, w = images.shape[-2:]
    up = F.interpolate(maps[:, character:character + 1].float(), size=(h, w), mode="bilinear",
                       align_corners=False)[:, 0]
    arrs = to_uint8_image(images)
    crops = []
    for n in range(images.shape[0]):
        m = (up[n] >= threshold * up[n].max()).numpy()
        crops.append(character_crop(arrs[n], m, size))
    return to_tensor_image(np.stack(crops))


# -- reports -----------------------------------------------------------------------

@dataclass
class EvalReport:
    run_id: str
    metrics: dict[str, float]
    counts: dict[str, int]
    config_hash: str = ""
    tags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.metrics.items():
            if k not in METRICS:
                raise ValueError(f"unknown metric {k!r}")
            lo = -1.0 if k in COSINE_METRICS else 0.0
            if not lo - 1e-9 <= v <= 1.0 + 1e-9:
                raise ValueError(f"{k}={v} outside [{lo}, 1]")
            if self.counts.get(k, 0) <= 0:
                raise ValueError(f"metric {k} has no sample count")

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "metrics": dict(self.metrics), "counts": dict(self.counts),
                "config_hash": self.config_hash, "tags": dict(self.tags)}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["run_id"], dict(d["metrics"]), dict(d["counts"]), d.get("config_hash", ""),
                   dict(d.get("tags", {})))

    def to_text(self) -> str:
        lines = [f"run {self.run_id} (config {self.config_hash[:12]})"]
        for k in METRICS:
            if k in self.metrics:
                lines.append(f"  {k:<22} {self.metrics[k]:.6f}  (n={self.counts[k]})")
        return "\n".join(lines)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jp, tp = out / f"{self.run_id}.json", out / f"{self.run_id}.txt"
        jp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        tp.write_text(self.to_text() + "\n")
        return jp, tp


SYNCHRONIZER_AXES = ("AMSA", "MPL")
INJECTOR_AXES = ("ID injection",)


def ablation_table(runs: Sequence[EvalReport], axes: Sequence[str] = SYNCHRONIZER_AXES,
                   metrics: Sequence[str] | None = None) -> str:
    """Rows are runs, labelled by their ``tags`` for each axis; values in percent.

    Synchronizer ablations tag each run with ``AMSA`` and ``MPL`` as ✓ or ✗;
    injector ablations tag ``ID injection`` as ``Stacked-ID`` or ``SRS``.
    """
    if len(runs) < 2:
        raise ValueError("an ablation table needs at least two runs")
    keys = set(runs[0].metrics)
    for r in runs[1:]:
        if set(r.metrics) != keys:
            raise ValueError(f"runs {runs[0].run_id!r} and {r.run_id!r} report different metrics")
    cols = [m for m in (metrics or METRICS) if m in keys]
    header = list(axes) + cols
    rows = []
    for r in runs:
        missing = [a for a in axes if a not in r.tags]
        if missing:
            raise ValueError(f"run {r.run_id!r} lacks tags {missing}")
        rows.append([r.tags[a] for a in axes] + [f"{100 * r.metrics[m]:.2f}" for m in cols])
    widths = [max(len(header[i]), *(len(row[i]) for row in rows)) for i in range(len(header))]
    fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep] + [fmt(r) for r in rows])


# -- whole-run evaluation ----------------------------------------------------------

def attention_dice(model, batch, timesteps: Sequence[int] = (200, 500, 800), seed: int = 0) -> float:
    """Mean Dice of accumulated maps against GT masks on real frames at fixed noise levels."""
    from .diffusion.training import probe_maps

    if model.synchronizer is None:
        raise RuntimeError("attention Dice needs a model with the synchronizer attached")
    scores = [dice_coefficient(probe_maps(model, batch, t, seed), batch.masks, batch.valid) for t in timesteps]
    return float(np.mean(scores))


def evaluate_run(model, groups, run_id: str, *, steps: int | None = None, guidance: float | None = None,
                 seed: int = 0, use_reference: bool = False, metrics: Sequence[str] | None = None,
                 tags: dict | None = None, config_hash: str = "") -> EvalReport:
    """Sample one story per group from its prompts and score the chosen metrics."""
    from .core.types import StoryPrompt
    from .data.dataset import collate
    from .data.records import make_id_bucket
    from .diffusion.sampler import ddim_sample
    from .diffusion.training import map_resolution
    from .synchronizer import accumulate_maps

    wanted = list(metrics or METRICS)
    unknown = set(wanted) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    scores: dict[str, list[float]] = {m: [] for m in wanted}
    clip_enc, dino_enc, id_enc = PooledPatchEncoder(), PatchGridEncoder(), CropIDEncoder(model.config.ref_size)
    needs_samples = set(wanted) - {"dice"}
    for gi, group in enumerate(groups):
        if needs_samples:
            prompt = StoryPrompt.from_lines(story_lines(group))
            ref = make_id_bucket(group, model.config.ref_size) if use_reference else None
            images = ddim_sample(model, prompt, ref, steps=steps, guidance=guidance, seed=seed + gi)
            if "text_sim" in scores:
                scores["text_sim"].append(text_image_similarity(images, group.prompts))
            if "frame_sim_clip_style" in scores:
                scores["frame_sim_clip_style"].append(inter_frame_similarity(images, clip_enc))
            if "frame_sim_dino_style" in scores:
                scores["frame_sim_dino_style"].append(inter_frame_similarity(images, dino_enc))
            if {"face_sim", "face_sim_ref"} & set(wanted):
                if model.synchronizer is None:
                    raise RuntimeError("face metrics locate characters with the synchronizer's maps")
                maps = accumulate_maps(model.recorded_maps(), None, map_resolution(model))
                crops = crops_from_maps(images, maps, model.config.ref_size)
                face = face_similarity(crops, ref.images if ref is not None else None, id_enc)
                for k, v in face.items():
                    if k in scores:
                        scores[k].append(v)
        if "dice" in scores:
            scores["dice"].append(attention_dice(model, collate([group], model.config.max_text_len), seed=seed))
    values = {k: float(np.mean(v)) for k, v in scores.items() if v}
    counts = {k: len(v) for k, v in scores.items() if v}
    return EvalReport(run_id, values, counts, config_hash, dict(tags or {}))


def story_lines(group) -> list[str]:
    """Prompts of a group in bracket-marker form, one line per frame."""
    lines = []
    for n, prompt in enumerate(group.prompts):
        words = split_words(prompt)
        marks = sorted(group.spans[n])
        out, i = [], 0
        for s, e in marks:
            out += words[i:s] + ["[" + " ".join(words[s:e + 1]) + "]"]
            i = e + 1
        out += words[i:]
        lines.append(" ".join(out))
    return lines
