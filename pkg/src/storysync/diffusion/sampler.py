"""Deterministic DDIM sampling with classifier-free guidance."""

from __future__ import annotations

import torch

from ..core import make_generator
from ..core.types import StoryPrompt
from ..injector import IDBucket, shuffle_bucket
from .model import StoryModel
from .schedule import NoiseSchedule


class MissingInjectorError(RuntimeError):
    pass


def guided_noise(model: StoryModel, z, t, text, null_text, guidance: float, *, num_frames, spans, valid,
                 c_f=None, c_f_null=None) -> torch.Tensor:
    """``null + s * (cond - null)``; the null pass is skipped when ``s == 1``.

    The null pass runs first so the maps left on the synchronizer stack
    belong to the conditional pass.
    """
    eps_null = None
    if guidance != 1.0:
        eps_null = model(z, t, null_text, num_frames=num_frames, spans=spans, valid=valid, c_f=c_f_null)
    eps = model(z, t, text, num_frames=num_frames, spans=spans, valid=valid, c_f=c_f)
    if eps_null is None:
        return eps
    return eps_null + guidance * (eps - eps_null)


@torch.no_grad()
def ddim_sample(model: StoryModel, prompts: StoryPrompt, reference: IDBucket | None = None,
                steps: int | None = None, guidance: float | None = None, seed: int = 0,
                shuffle_seed: int | None = None, clip_x0: bool = True,
                return_trajectory: bool = False):
    """Generate one story, returning images ``(N, 3, H, W)`` in [-1, 1].

    The masked cross-frame attention rebuilds its masks from the current
    step's maps on every network call. ``reference`` conditions frames on an
    identity bucket; with ``shuffle_seed`` the bucket is shuffled first,
    otherwise reference n conditions frame n. Afterwards the model's
    recorded maps are those of the last conditional pass.
    """
    cfg = model.config
    steps = cfg.sample_steps if steps is None else steps
    guidance = cfg.guidance_scale if guidance is None else guidance
    if reference is not None and model.injector is None:
        raise MissingInjectorError("a reference bucket was given but the model has no identity injector")
    n = len(prompts.frames)
    if reference is not None and len(reference) != n:
        raise ValueError(f"reference bucket has {len(reference)} images for {n} frames")

    model.eval()
    dtype = next(model.parameters()).dtype
    ids, spans, valid = prompts.encode(cfg.max_text_len)
    text = model.encode_text(ids)
    null_text = model.null_text().expand_as(text)
    c_f = c_f_null = None
    if reference is not None:
        if shuffle_seed is not None:
            reference = shuffle_bucket(reference, shuffle_seed)
        c_f = model.face_condition(reference.images.to(dtype))
        c_f_null = model.injector.null_condition(n)

    schedule = NoiseSchedule.linear(cfg.train_timesteps, cfg.beta_start, cfg.beta_end)
    g = make_generator(seed)
    z = torch.randn((n, cfg.latent_channels, cfg.image_size, cfg.image_size), generator=g, dtype=dtype)
    ts = schedule.ddim_timesteps(steps)
    trajectory = [z]
    for i, t in enumerate(ts):
        t = int(t)
        tt = torch.full((n,), t, dtype=torch.long)
        eps = guided_noise(model, z, tt, text, null_text, guidance, num_frames=n, spans=spans, valid=valid,
                           c_f=c_f, c_f_null=c_f_null)
        a_t = float(schedule.alpha_bar(t))
        a_prev = float(schedule.alpha_bar(int(ts[i + 1]))) if i + 1 < len(ts) else 1.0
        x0 = (z - (1 - a_t) ** 0.5 * eps) / a_t ** 0.5
        if clip_x0:
            x0 = x0.clamp(-1, 1)
            eps = (z - a_t ** 0.5 * x0) / (1 - a_t) ** 0.5
        z = a_prev ** 0.5 * x0 + (1 - a_prev) ** 0.5 * eps
        trajectory.append(z)
    out = z.clamp(-1, 1)
    return (out, trajectory) if return_trajectory else out
