"""Denoising loss plus a Dice constraint on per-character cross-attention maps."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

DICE_SMOOTH = 1e-6


@dataclass
class LossBreakdown:
    ldm: torch.Tensor
    mask_perceptual: torch.Tensor
    total: torch.Tensor
    alpha: float

    def as_floats(self) -> dict[str, float]:
        return {"ldm": float(self.ldm.detach()), "mask": float(self.mask_perceptual.detach()),
                "total": float(self.total.detach()), "alpha": self.alpha}

    def log_line(self, step: int) -> str:
        f = self.as_floats()
        return f"step={step} ldm={f['ldm']:.8f} mask={f['mask']:.8f} total={f['total']:.8f}"


def ldm_loss(noise_pred: torch.Tensor, noise_true: torch.Tensor) -> torch.Tensor:
    if noise_pred.shape != noise_true.shape:
        raise ValueError(f"shape mismatch: {tuple(noise_pred.shape)} vs {tuple(noise_true.shape)}")
    return F.mse_loss(noise_pred, noise_true)


def dice_term(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """``1 - 2 sum(p g) / (sum p^2 + sum g^2)`` over the trailing two axes.

    Leading axes are kept, so a ``(K, H, W)`` pair gives K terms. Both
    numerator and denominator carry a 1e-6 smoothing constant, which makes
    two empty masks score 0.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    p, g = pred.flatten(-2), gt.to(pred.dtype).flatten(-2)
    inter = (p * g).sum(-1)
    denom = (p * p).sum(-1) + (g * g).sum(-1)
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)


def downsample_mask(gt: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Area-average a binary mask ``(..., H, W)`` to ``size`` and threshold at 0.5."""
    if tuple(gt.shape[-2:]) == tuple(size):
        return (gt > 0.5).to(torch.float32)
    lead = gt.shape[:-2]
    x = gt.reshape(-1, 1, *gt.shape[-2:]).float()
    x = F.adaptive_avg_pool2d(x, size)
    return (x >= 0.5).float().reshape(*lead, *size)


def mask_perceptual_loss(pred_maps: torch.Tensor, gt_masks: torch.Tensor,
                         valid: torch.Tensor | None = None) -> torch.Tensor:
    """Sum of Dice terms over every declared (frame, character) pair.

    ``pred_maps`` is ``(F, M, h, w)`` with values in [0, 1]; ``gt_masks`` is
    ``(F, M', H, W)`` binary and is brought to ``(h, w)`` by
    :func:`downsample_mask`. ``valid`` marks declared characters; the sum
    runs over those only.
    """
    if valid is None:
        valid = torch.ones(pred_maps.shape[:2], dtype=torch.bool, device=pred_maps.device)
    if gt_masks.shape[0] != pred_maps.shape[0] or gt_masks.shape[1] < pred_maps.shape[1]:
        raise ValueError(f"missing ground-truth masks: predicted {tuple(pred_maps.shape[:2])}, "
                         f"ground truth {tuple(gt_masks.shape[:2])}")
    gt = downsample_mask(gt_masks[:, : pred_maps.shape[1]], pred_maps.shape[-2:])
    terms = dice_term(pred_maps, gt.to(pred_maps.dtype))
    return (terms * valid.to(terms.dtype)).sum()


def total_loss(ldm: torch.Tensor, mask_perceptual: torch.Tensor, alpha: float) -> LossBreakdown:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return LossBreakdown(ldm, mask_perceptual, ldm + alpha * mask_perceptual, alpha)
