"""Staged training: backbone pretraining, synchronizer, injector.

The backbone stage stands in for the pretrained text-to-image checkpoint the
method starts from: every UNet and text-encoder weight trains with ordinary
per-image self-attention. The synchronizer stage switches on cross-frame
masked self-attention and the Dice constraint and trains only attention
projections; the injector stage trains only the identity branch.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..core import make_generator
from ..core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ..core.config import ModelConfig
from ..data.dataset import StoryBatch, collate
from ..data.records import StoryGroup
from ..injector import drop_conditions, shuffle_bucket, IDBucket
from ..losses import LossBreakdown, ldm_loss, mask_perceptual_loss, total_loss
from ..synchronizer import AmsaConfig, accumulate_maps
from .model import StoryModel
from .schedule import NoiseSchedule, add_noise

log = logging.getLogger(__name__)

STAGES = ("backbone", "synchronizer", "injector")
_PREREQUISITE = {"synchronizer": ("backbone", "synchronizer"), "injector": ("synchronizer", "injector")}


class StageError(RuntimeError):
    pass


def is_trainable(name: str, stage: str) -> bool:
    if stage == "backbone":
        return name.startswith(("unet.", "text_encoder."))
    if stage == "synchronizer":
        if not name.startswith("unet."):
            return False
        return any(f".{p}." in name for p in ("attn1.to_q", "attn1.to_k", "attn1.to_v", "attn1.to_out",
                                              "attn2.to_q", "attn2.to_k"))
    if stage == "injector":
        return name.startswith(("injector.resampler.", "injector.adapters.", "injector.null_tokens"))
    raise ValueError(f"unknown stage {stage!r}")


def build_model(config: ModelConfig, stage: str) -> StoryModel:
    """Model wired for ``stage``; initial weights depend only on ``config.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = StoryModel(config)
        if stage in ("synchronizer", "injector"):
            model.attach_synchronizer(AmsaConfig(eps=config.mask_eps, enabled=config.amsa))
        if stage == "injector":
            model.add_injector()
    return model


def load_weights(model: StoryModel, params: dict[str, torch.Tensor], allow_missing_injector: bool) -> None:
    own = model.state_dict()
    unexpected = sorted(set(params) - set(own))
    missing = sorted(set(own) - set(params))
    if unexpected:
        raise KeyError(f"checkpoint has parameters the model lacks: {unexpected[:5]}")
    if missing and not (allow_missing_injector and all(k.startswith("injector.") for k in missing)):
        raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
    model.load_state_dict(params, strict=False)


def stage_lr(config: ModelConfig, stage: str) -> float:
    return {"backbone": config.lr_backbone, "synchronizer": config.lr_synchronizer,
            "injector": config.lr_injector}[stage]


@dataclass
class TrainState:
    model: StoryModel
    stage: str
    config: ModelConfig
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    schedule: NoiseSchedule
    trainable: list[str]
    frozen: list[str]
    step: int = 0
    history: list[dict] = field(default_factory=list)

    def frozen_digest(self) -> str:
        named = dict(self.model.named_parameters())
        h = hashlib.sha256()
        for name in self.frozen:
            h.update(name.encode())
            h.update(named[name].detach().cpu().numpy().tobytes())
        return h.hexdigest()


def make_train_state(config: ModelConfig, stage: str, init: Checkpoint | None = None,
                     resume: Checkpoint | None = None) -> TrainState:
    """Fresh state for ``stage``, optionally initialised from an earlier stage or resumed."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if resume is not None and resume.stage != stage:
        raise StageError(f"cannot resume a {stage} run from a {resume.stage} checkpoint")
    if stage == "injector" and init is None and resume is None:
        raise StageError("the injector stage needs a synchronizer checkpoint to start from")
    if init is not None and stage in _PREREQUISITE and init.stage not in _PREREQUISITE[stage]:
        raise StageError(f"{stage} stage cannot start from a {init.stage} checkpoint")

    model = build_model(config, stage)
    source = resume or init
    if source is not None:
        load_weights(model, source.params, allow_missing_injector=stage == "injector")
    names = [n for n, _ in model.named_parameters()]
    trainable = [n for n in names if is_trainable(n, stage)]
    frozen = [n for n in names if n not in set(trainable)]
    named = dict(model.named_parameters())
    for n in names:
        named[n].requires_grad_(n in set(trainable))
    optimizer = torch.optim.AdamW([named[n] for n in trainable], lr=stage_lr(config, stage),
                                  weight_decay=config.weight_decay)
    generator = make_generator(config.seed)
    state = TrainState(model, stage, config, optimizer, generator,
                       NoiseSchedule.linear(config.train_timesteps, config.beta_start, config.beta_end),
                       trainable, frozen)
    if resume is not None:
        if resume.optimizer is not None:
            optimizer.load_state_dict(resume.optimizer)
        if resume.rng_state is not None:
            generator.set_state(resume.rng_state)
        state.step = resume.step
    return state


def state_to_checkpoint(state: TrainState, meta: dict | None = None) -> Checkpoint:
    params = {k: v.detach().clone() for k, v in state.model.state_dict().items()}
    return Checkpoint(params=params, stage=state.stage, config=state.config, step=state.step,
                      optimizer=state.optimizer.state_dict(), rng_state=state.generator.get_state(),
                      meta=dict(meta or {}))


def arrange_references(refs: torch.Tensor, num_frames: int, strategy: str, generator: torch.Generator) -> torch.Tensor:
    """Per-story reference order: a seeded shuffle of the bucket, or the frame's own crop."""
    if strategy == "stacked":
        return refs
    out = []
    for b in range(refs.shape[0] // num_frames):
        block = refs[b * num_frames:(b + 1) * num_frames]
        seed = int(torch.randint(0, 2**31 - 1, (1,), generator=generator))
        bucket = IDBucket("story", block, tuple(range(num_frames)))
        out.append(shuffle_bucket(bucket, seed).images)
    return torch.cat(out)


def map_resolution(model: StoryModel) -> tuple[int, int]:
    stack = model.recorded_maps()
    return min(stack.resolutions)


def train_step(state: TrainState, batch: StoryBatch) -> LossBreakdown:
    cfg, model, g = state.config, state.model, state.generator
    n = batch.num_frames
    if n != cfg.num_frames:
        raise ValueError(f"batch has {n} frames per story, config expects {cfg.num_frames}")
    if state.stage == "injector" and batch.refs is None:
        raise StageError("injector stage batches need reference crops (ID buckets)")
    model.train()
    dtype = next(model.parameters()).dtype
    x0 = batch.images.to(dtype)
    b = batch.num_stories
    t = torch.randint(0, state.schedule.num_steps, (b,), generator=g).repeat_interleave(n)
    noise = torch.randn(x0.shape, generator=g, dtype=dtype)
    z_t = add_noise(state.schedule, x0, t, noise)

    text = model.encode_text(batch.ids)
    c_f, null_tokens = None, None
    if state.stage == "injector":
        refs = arrange_references(batch.refs.to(dtype), n, cfg.reference_strategy, g)
        c_f = model.face_condition(refs)
        null_tokens = model.injector.null_tokens
    text, c_f, drop_text, _ = drop_conditions(text, c_f, model.null_text(), null_tokens, cfg.cond_dropout, g, n)

    pred = model(z_t, t, text, num_frames=n, spans=batch.spans, valid=batch.valid, c_f=c_f)
    ldm = ldm_loss(pred, noise)
    if model.synchronizer is not None and len(model.recorded_maps()):
        maps = accumulate_maps(model.recorded_maps(), None, map_resolution(model))
        keep = batch.valid & ~drop_text[:, None]
        mpl = mask_perceptual_loss(maps, batch.masks.to(dtype), keep) / b
    else:
        mpl = torch.zeros((), dtype=dtype)
    losses = total_loss(ldm, mpl, cfg.mask_weight)

    state.optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    state.optimizer.step()
    state.step += 1
    state.history.append(losses.as_floats())
    return losses


# -- orchestration ------------------------------------------------------------------

def sample_batch(batches: StoryBatch, state: TrainState) -> StoryBatch:
    """Draw ``batch_size`` stories from a pre-collated pool using the run's RNG."""
    n, total = batches.num_frames, batches.num_stories
    pick = torch.randint(0, total, (state.config.batch_size,), generator=state.generator)
    rows = torch.cat([torch.arange(i * n, (i + 1) * n) for i in pick.tolist()])
    return StoryBatch(batches.images[rows], batches.ids[rows], batches.spans[rows], batches.valid[rows],
                      batches.masks[rows], None if batches.refs is None else batches.refs[rows], n,
                      tuple(batches.group_ids[i] for i in pick.tolist()))


def dump_masks(model: StoryModel, probe: StoryBatch, out_dir: Path, step: int, timestep: int = 300,
               seed: int = 0) -> list[Path]:
    """Write the accumulated character maps of a fixed probe as grayscale PNGs."""
    from PIL import Image

    if model.synchronizer is None:
        return []
    maps = probe_maps(model, probe, timestep, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    n = probe.num_frames
    for f in range(n):
        for c in range(maps.shape[1]):
            if not probe.valid[f, c]:
                continue
            arr = (maps[f, c].clamp(0, 1).numpy() * 255).round().astype(np.uint8)
            p = out_dir / f"step{step}_frame{f}_char{c}.png"
            Image.fromarray(arr).save(p)
            paths.append(p)
    return paths


@torch.no_grad()
def probe_maps(model: StoryModel, batch: StoryBatch, timestep: int, seed: int = 0,
               c_f=None) -> torch.Tensor:
    """Accumulated maps ``(B*N, M, h, w)`` for a deterministic noised copy of ``batch``."""
    cfg = model.config
    schedule = NoiseSchedule.linear(cfg.train_timesteps, cfg.beta_start, cfg.beta_end)
    g = make_generator(seed)
    dtype = next(model.parameters()).dtype
    x0 = batch.images.to(dtype)
    noise = torch.randn(x0.shape, generator=g, dtype=dtype)
    t = torch.full((x0.shape[0],), timestep, dtype=torch.long)
    z = add_noise(schedule, x0, t, noise)
    was_training = model.training
    model.eval()
    model(z, t, model.encode_text(batch.ids), num_frames=batch.num_frames, spans=batch.spans,
          valid=batch.valid, c_f=c_f)
    model.train(was_training)
    return accumulate_maps(model.recorded_maps(), None, map_resolution(model))


def run_training(config: ModelConfig, groups: list[StoryGroup], stage: str, out_dir, steps: int,
                 init_checkpoint=None, resume_checkpoint=None, checkpoint_every: int = 0,
                 mask_every: int = 0, log_every: int = 50, stop_at: int | None = None) -> Checkpoint:
    """Train ``stage`` for ``steps`` total optimizer steps and return the final checkpoint.

    Writes ``metrics.log`` (one line per step), ``ckpt_step<k>.ckpt`` every
    ``checkpoint_every`` steps, ``final.ckpt``, and mask dumps under
    ``masks/`` every ``mask_every`` steps. ``stop_at`` ends the run early
    (after saving a checkpoint) to exercise resumption.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if stage == "injector" and init_checkpoint is None and resume_checkpoint is None:
        raise StageError("injector training requires a synchronizer checkpoint (stage order)")
    init = load_checkpoint(init_checkpoint, expected=config) if init_checkpoint else None
    resume = load_checkpoint(resume_checkpoint, expected=config) if resume_checkpoint else None
    state = make_train_state(config, stage, init=init, resume=resume)

    pool = collate(groups, config.max_text_len, config.ref_size if stage == "injector" else None)
    probe = collate(groups[:1], config.max_text_len)
    metrics = open(out / "metrics.log", "a")
    try:
        if state.step == 0 and mask_every:
            dump_masks(state.model, probe, out / "masks", 0)
        while state.step < steps:
            losses = train_step(state, sample_batch(pool, state))
            metrics.write(losses.log_line(state.step) + "\n")
            metrics.flush()
            if log_every and state.step % log_every == 0:
                log.info("%s %s", stage, losses.log_line(state.step))
            if mask_every and state.step % mask_every == 0:
                dump_masks(state.model, probe, out / "masks", state.step)
            if checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state_to_checkpoint(state), out / f"ckpt_step{state.step}.ckpt")
            if stop_at is not None and state.step >= stop_at:
                break
    finally:
        metrics.close()
    ckpt = state_to_checkpoint(state, meta={"losses": state.history[-1] if state.history else {}})
    save_checkpoint(ckpt, out / ("final.ckpt" if state.step >= steps else f"ckpt_step{state.step}.ckpt"))
    return ckpt


def load_model(path, stage: str | None = None, config: ModelConfig | None = None) -> StoryModel:
    """Rebuild an inference model from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path, expected=config)
    model = build_model(ckpt.config, stage or ckpt.stage)
    load_weights(model, ckpt.params, allow_missing_injector=False)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
