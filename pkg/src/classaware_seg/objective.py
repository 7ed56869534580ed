"""Cross-entropy objective with auxiliary pre-classification terms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .data import IGNORE_INDEX


@dataclass(frozen=True)
class LossWeights:
    main: float = 1.0
    aux: float = 0.8

    def __post_init__(self):
        if self.main < 0 or self.aux < 0:
            raise ValueError("loss weights must be non-negative")


def cross_entropy(logits: torch.Tensor, target: torch.Tensor, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Mean negative log-likelihood of the true class over non-ignored pixels.

    An all-ignored target gives 0 (with zero gradient) instead of NaN.
    """
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match target {tuple(target.shape)}")
    valid = target != ignore_index
    k = logits.shape[1]
    if valid.any() and (target[valid].min() < 0 or target[valid].max() >= k):
        raise ValueError("target labels outside 0..K-1")
    safe = torch.where(valid, target, torch.zeros_like(target))
    nll = -logits.log_softmax(dim=1).gather(1, safe[:, None]).squeeze(1)
    nll = torch.where(valid, nll, torch.zeros_like(nll))
    return nll.sum() / valid.sum().clamp_min(1)


def total_loss(main_logits: torch.Tensor, aux_logits: Sequence[torch.Tensor], target: torch.Tensor,
               weights: LossWeights = LossWeights()) -> torch.Tensor:
    """``main * CE(main) + aux * mean_s CE(upsampled aux_s)``.

    Auxiliary logits are bilinearly upsampled to the target resolution.
    """
    loss = weights.main * cross_entropy(main_logits, target)
    if aux_logits and weights.aux > 0:
        size = target.shape[-2:]
        terms = [cross_entropy(F.interpolate(a, size=size, mode="bilinear", align_corners=False)
                               if a.shape[-2:] != size else a, target) for a in aux_logits]
        loss = loss + weights.aux * torch.stack(terms).mean()
    return loss
