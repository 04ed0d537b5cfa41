"""Multi-scale supervision losses.

The ground-truth mask is decimated into a six-level pyramid; every level
gets a BCE+Dice composite against its logits, and the six scalars are
combined with learnable per-level weights sigma_i:

    total = sum_i L_i / (2 sigma_i^2) + sum_i ln(1 + sigma_i^2)

The log term keeps the weights from blowing up; with all sigma_i = 1 the
combination collapses to 0.5 * sum(L_i) + 6 ln 2.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import DataValidationError, NonFiniteError, ShapeError
from .nn import Module
from .tensor import Parameter, Tensor

LOSS_KINDS = ("bce", "dice", "bce_dice")


def mask_pyramid(mask: Tensor | np.ndarray, levels: int = 6) -> list[Tensor]:
    """Nearest-neighbor decimation of a binary mask, factor 2^i per level
    (top-left sample of each cell). Level 0 is the input itself.
    """
    data = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if data.ndim != 4:
        raise ShapeError(f"mask must be 4-D (n, classes, h, w), got {data.shape}")
    if not np.all((data == 0) | (data == 1)):
        raise DataValidationError("mask must be binary (exactly 0/1 valued)")
    h, w = data.shape[2], data.shape[3]
    factor = 2 ** (levels - 1)
    if h % factor != 0 or w % factor != 0:
        raise ShapeError(f"mask spatial dims must be divisible by {factor}, got {h}x{w}")
    return [Tensor._wrap(np.ascontiguousarray(data[:, :, ::2 ** i, ::2 ** i]))
            for i in range(levels)]


def level_loss(logits: Tensor, mask: Tensor, kind: str = "bce_dice",
               smooth: float = 1.0) -> Tensor:
    """Per-level segmentation loss; ``bce_dice`` is 0.5*BCE + 0.5*(1 - Dice)."""
    if kind not in LOSS_KINDS:
        raise DataValidationError(f"unknown loss kind {kind!r}, expected one of {LOSS_KINDS}")
    if logits.shape != mask.shape:
        raise ShapeError(f"level_loss shape mismatch: logits {logits.shape} vs mask {mask.shape}")
    if kind == "bce":
        return T.bce_with_logits(logits, mask).mean()
    probs = T.sigmoid(logits)
    overlap = (probs * mask).sum(axis=(2, 3))
    dice = (2.0 * overlap + smooth) / (probs.sum(axis=(2, 3)) + mask.sum(axis=(2, 3)) + smooth)
    dice_loss = 1.0 - dice.mean()
    if kind == "dice":
        return dice_loss
    return 0.5 * T.bce_with_logits(logits, mask).mean() + 0.5 * dice_loss


class _ParamBank(Module):
    """Bare container so weights appear under numbered names."""


class AutoWeightedLoss(Module):
    """Learnable per-level loss weighting with a growth penalty.

    When ``learnable`` is off the weights stay frozen at 1.0, turning the
    combination into a plain scaled sum (the structural ablation path).
    """

    def __init__(self, levels: int = 6, eps: float = 1e-8, learnable: bool = True,
                 dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.levels = levels
        self.eps = eps
        self.learnable = learnable
        self.sigma = _ParamBank()
        for i in range(levels):
            setattr(self.sigma, str(i), Parameter(np.asarray(1.0, dtype=dtype)))
        if not learnable:
            for p in self.parameters():
                p.requires_grad = False

    def sigmas(self) -> list[Parameter]:
        return [getattr(self.sigma, str(i)) for i in range(self.levels)]

    def sigma_values(self) -> list[float]:
        return [float(s.data) for s in self.sigmas()]

    def forward(self, losses: list[Tensor]) -> Tensor:
        if len(losses) != self.levels:
            raise ShapeError(f"expected {self.levels} level losses, got {len(losses)}")
        for i, li in enumerate(losses):
            if not np.all(np.isfinite(li.data)):
                raise NonFiniteError(f"non-finite loss at level {i}")
        total = None
        for li, s in zip(losses, self.sigmas()):
            s_sq = s * s
            term = li / (2.0 * s_sq + 2.0 * self.eps) + T.log(s_sq + 1.0)
            total = term if total is None else total + term
        return total


def awl_combine(losses: list[Tensor], awl: AutoWeightedLoss) -> Tensor:
    return awl(losses)


def awl_sigma_grad(loss_value: float, sigma: float, eps: float = 1e-8) -> float:
    """Closed-form d(total)/d(sigma_i) used to cross-check autodiff."""
    return (-loss_value * sigma / (sigma * sigma + eps) ** 2
            + 2.0 * sigma / (1.0 + sigma * sigma))


def frozen_combination(losses: list[float]) -> float:
    """Value of the combination at sigma = 1: 0.5*sum(L) + n*ln(2)."""
    return 0.5 * sum(losses) + len(losses) * math.log(2.0)
