"""Multi-scale convolutional encoder with outputs at 1/4, 1/8, 1/16 and 1/32."""

from __future__ import annotations

import torch
from torch import nn

from .config import EncoderConfig

SCALES = (4, 8, 16, 32)


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "group":
        return nn.GroupNorm(min(8, channels), channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


def make_act(kind: str) -> nn.Module:
    if kind == "relu":
        return nn.ReLU()
    if kind == "leaky_relu":
        return nn.LeakyReLU(0.1)
    if kind == "gelu":
        return nn.GELU()
    raise ValueError(f"unknown activation {kind!r}")


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, kernel=3, stride=1, norm="batch", act="relu"):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, stride, kernel // 2, bias=norm == "none"),
            make_norm(norm, cout),
            make_act(act),
        )


class ConvEncoder(nn.Module):
    """Four stride-2 stages after a stride-2 stem.

    Any replacement encoder only has to return four maps with
    ``out_channels`` widths at strides 4, 8, 16 and 32.
    """

    def __init__(self, cfg: EncoderConfig | None = None, in_channels: int = 3):
        super().__init__()
        cfg = cfg or EncoderConfig()
        self.out_channels = tuple(cfg.channels)
        c1 = self.out_channels[0]
        self.stem = ConvNormAct(in_channels, max(c1 // 2, 8), 3, 2, cfg.norm, cfg.act)
        stages = []
        cin = max(c1 // 2, 8)
        for cout in self.out_channels:
            stages.append(nn.Sequential(
                ConvNormAct(cin, cout, 3, 2, cfg.norm, cfg.act),
                ConvNormAct(cout, cout, 3, 1, cfg.norm, cfg.act),
            ))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} is not a multiple of 32")
        x = self.stem(images)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def encode(images: torch.Tensor, encoder: nn.Module) -> list[torch.Tensor]:
    """Run an encoder and check the 4/8/16/32 scale contract."""
    feats = encoder(images)
    h, w = images.shape[-2:]
    if len(feats) != 4:
        raise ValueError("encoder must return four feature maps")
    for f, s, c in zip(feats, SCALES, encoder.out_channels):
        if f.shape[-2:] != (h // s, w // s) or f.shape[1] != c:
            raise ValueError(f"stage at 1/{s} has shape {tuple(f.shape)}")
    return feats
