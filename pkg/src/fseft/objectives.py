"""
Segmentation losses and the organ-size prior used during adaptation.

Everything here operates on torch tensors so it can sit inside a training
graph; plain floats are accepted where a scalar is expected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgument, InvalidShape

DICE_EPS = 1e-5


@dataclass(frozen=True)
class SizePrior:
    """Mean foreground voxel count of the support masks (working resolution)."""

    S: float
    K: int

    def __post_init__(self):
        if self.S < 0:
            raise InvalidArgument("size prior must be non-negative")


@dataclass(frozen=True)
class PenaltyConfig:
    gamma: float = 0.2
    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidArgument(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.lam < 0:
            raise InvalidArgument(f"lambda must be >= 0, got {self.lam}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def dice_loss(probs, target, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss ``1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)``.

    All elements are pooled into one overlap, so a batch of patches counts
    as a single region.
    """
    probs, target = _as_tensor(probs), _as_tensor(target)
    if probs.shape != target.shape:
        raise InvalidShape(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    target = target.to(probs.dtype)
    inter = (probs * target).sum()
    denom = probs.sum() + target.sum()
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def bce_loss(probs, target) -> torch.Tensor:
    probs, target = _as_tensor(probs), _as_tensor(target)
    if probs.shape != target.shape:
        raise InvalidShape(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    return F.binary_cross_entropy(probs.clamp(1e-7, 1 - 1e-7), target.to(probs.dtype))


def segmentation_loss(probs, target, kind: str = "dice", eps: float = DICE_EPS):
    if kind == "dice":
        return dice_loss(probs, target, eps)
    if kind == "ce":
        return bce_loss(probs, target)
    if kind == "dice+ce":
        return dice_loss(probs, target, eps) + bce_loss(probs, target)
    raise InvalidArgument(f"unknown support loss {kind!r}; expected dice, ce or dice+ce")


def per_class_dice_loss(probs, target, eps: float = DICE_EPS) -> torch.Tensor:
    """Dice loss per channel. Channel axis is 0 for ``(C, ...)`` inputs,
    1 for batched ``(B, C, ...)`` inputs; batch entries are pooled."""
    probs, target = _as_tensor(probs), _as_tensor(target)
    if probs.shape != target.shape:
        raise InvalidShape(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    axis = 1 if probs.dim() == 5 else 0
    p = probs.movedim(axis, 0).reshape(probs.shape[axis], -1)
    y = target.movedim(axis, 0).reshape(probs.shape[axis], -1).to(p.dtype)
    inter = (p * y).sum(1)
    return 1.0 - (2.0 * inter + eps) / (p.sum(1) + y.sum(1) + eps)


def masked_partial_loss(probs, target, w, eps: float = DICE_EPS) -> torch.Tensor:
    """Partial-label loss: mean Dice loss over the classes annotated in ``w``.

    Channels with ``w == 0`` never enter the graph, so their gradient is
    exactly zero and their values (even NaN) are irrelevant.
    """
    probs, target = _as_tensor(probs), _as_tensor(target)
    w = np.asarray(w, dtype=np.float64).ravel()
    axis = 1 if probs.dim() == 5 else 0
    if w.shape[0] != probs.shape[axis]:
        raise InvalidShape(f"annotation vector has {w.shape[0]} entries, probs {probs.shape[axis]} channels")
    if w.sum() <= 0:
        raise InvalidArgument("annotation vector must mark at least one class")
    idx = np.flatnonzero(w)
    sel = torch.as_tensor(idx, dtype=torch.long, device=probs.device)
    losses = per_class_dice_loss(
        probs.index_select(axis, sel), target.index_select(axis, sel), eps
    )
    weights = torch.as_tensor(w[idx], dtype=losses.dtype, device=losses.device)
    return (weights * losses).sum() / weights.sum()


def support_size_prior(support_masks: Sequence) -> SizePrior:
    """Average foreground voxel count over the support masks."""
    masks = list(support_masks)
    if not masks:
        raise InvalidArgument("support set is empty")
    counts = []
    for m in masks:
        data = np.asarray(getattr(m, "data", m))
        if data.ndim == 4:
            if data.shape[0] != 1:
                raise InvalidShape("support masks must be single-channel")
            data = data[0]
        counts.append(int(np.count_nonzero(data)))
    return SizePrior(S=float(sum(counts)) / len(counts), K=len(counts))


def predicted_size(probs) -> torch.Tensor:
    """Soft region size: the sum of the probability map."""
    return _as_tensor(probs).sum()


def size_margin_penalty(S_hat, S, gamma: float) -> torch.Tensor:
    """Hinge on the predicted size outside the band ``[(1-g) S, (1+g) S]``.

    Zero inside the closed band, distance to the nearer band edge outside it.
    The gradient is -1/+1 outside and 0 on the band, boundaries included.
    """
    S_hat = _as_tensor(S_hat)
    S = float(S)
    if S < 0:
        raise InvalidArgument(f"size prior must be non-negative, got {S}")
    if not 0.0 <= gamma < 1.0:
        raise InvalidArgument(f"gamma must lie in [0, 1), got {gamma}")
    lower, upper = (1.0 - gamma) * S, (1.0 + gamma) * S
    return torch.relu(lower - S_hat) + torch.relu(S_hat - upper)


def adaptation_objective(
    support_probs,
    support_masks,
    query_S_hat,
    prior: SizePrior,
    cfg: PenaltyConfig,
    support_loss: str = "dice",
    eps: float = DICE_EPS,
) -> torch.Tensor:
    """Mean support segmentation loss plus ``lam`` times the size penalty."""
    support_probs, support_masks = list(support_probs), list(support_masks)
    if not support_probs or len(support_probs) != len(support_masks):
        raise InvalidArgument("need a non-empty, matched list of support predictions and masks")
    seg = torch.stack(
        [segmentation_loss(p, y, support_loss, eps) for p, y in zip(support_probs, support_masks)]
    ).mean()
    if cfg.lam == 0:
        return seg
    return seg + cfg.lam * size_margin_penalty(query_S_hat, prior.S, cfg.gamma)
