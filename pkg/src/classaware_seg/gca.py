"""Global class centers: pre-classify a feature map and pool one feature per class."""

from __future__ import annotations

import torch
from torch import nn


class PreClassifier(nn.Conv2d):
    """1x1 convolution producing K class logits per pixel."""

    def __init__(self, in_channels: int, num_classes: int):
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        super().__init__(in_channels, num_classes, kernel_size=1)


def preclassify(feature: torch.Tensor, classifier: PreClassifier) -> torch.Tensor:
    return classifier(feature)


def class_centers(feature: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Soft per-class average of pixel features.

    ``feature`` is ``[N, C, *spatial]`` and ``logits`` ``[N, K, *spatial]``;
    logits are softmax-normalised over the spatial positions of each class,
    so every returned row ``[N, K, C]`` is a convex combination of pixels.
    """
    if feature.shape[0] != logits.shape[0] or feature.shape[2:] != logits.shape[2:]:
        raise ValueError(f"feature {tuple(feature.shape)} and logits {tuple(logits.shape)} disagree")
    n, c = feature.shape[:2]
    weights = logits.flatten(2).softmax(dim=-1)  # [N, K, P]
    return torch.bmm(weights, feature.reshape(n, c, -1).transpose(1, 2))


def global_class_centers(feature: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """``[B, C, H, W]`` features and ``[B, K, H, W]`` logits to ``[B, K, C]`` centers."""
    if feature.ndim != 4:
        raise ValueError("feature must be [B, C, H, W]")
    return class_centers(feature, logits)


class GlobalClassAware(nn.Module):
    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.classifier = PreClassifier(in_channels, num_classes)

    def forward(self, feature: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        logits = self.classifier(feature)
        return global_class_centers(feature, logits), logits
