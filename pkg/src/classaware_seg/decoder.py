"""Four-stage class-aware decoder cascade and the full segmentation model."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ConvEncoder, ConvNormAct, encode
from .config import RunConfig
from .gca import GlobalClassAware
from .lca import GlobalClassAttention, LocalClassAware


@dataclass
class CascadeState:
    enhanced: list[torch.Tensor]  # R_o at scales 4, 8, 16, 32 (shallow first)
    global_centers: torch.Tensor | None
    aux_logits: list[torch.Tensor] = field(default_factory=list)  # deepest stage first


@dataclass
class SegOutput:
    logits: torch.Tensor
    aux_logits: list[torch.Tensor]
    state: CascadeState


def _upsample(x, size):
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ClassAwareDecoder(nn.Module):
    """Context stage on the deepest map, then fuse-and-refine toward 1/4 scale."""

    def __init__(self, in_channels, num_classes: int, cfg: RunConfig, global_dim: int | None):
        super().__init__()
        d = cfg.decoder.width
        norm, act = cfg.encoder.norm, cfg.encoder.act
        kernel = 3 if cfg.decoder.fusion == "conv3x3" else 1
        c1, c2, c3, c4 = in_channels
        self.entry = ConvNormAct(c4, d, 1, 1, norm, act)
        # fuse[i] merges the upsampled deeper output with backbone stage 3 - i
        self.fuse = nn.ModuleList(ConvNormAct(d + c, d, kernel, 1, norm, act) for c in (c3, c2, c1))
        stages = []
        for _ in range(4):
            if cfg.lca.enabled:
                stages.append(LocalClassAware(d, num_classes, global_dim, cfg.lca.patches, cfg.lca.heads,
                                              cfg.atb, cfg.lca.tie_value_heads, norm, act))
            elif global_dim is not None:
                stages.append(GlobalClassAttention(d, global_dim, cfg.lca.heads, cfg.lca.tie_value_heads,
                                                   norm, act))
            else:
                stages.append(None)
        self.stages = nn.ModuleList(s if s is not None else nn.Identity() for s in stages)
        self.head = nn.Conv2d(4 * d, num_classes, 1)

    def _context(self, i, x, centers, aux):
        stage = self.stages[i]
        if isinstance(stage, nn.Identity):
            return x
        out, logits = stage(x, centers)
        if logits is not None:
            aux.append(logits)
        return out

    def run_cascade(self, pyramid: list[torch.Tensor], global_centers: torch.Tensor | None) -> CascadeState:
        aux: list[torch.Tensor] = []
        x = self._context(0, self.entry(pyramid[3]), global_centers, aux)
        outs = [x]
        for i, skip in enumerate((pyramid[2], pyramid[1], pyramid[0])):
            x = self.fuse[i](torch.cat([_upsample(x, skip.shape[-2:]), skip], 1))
            x = self._context(i + 1, x, global_centers, aux)
            outs.append(x)
        return CascadeState(outs[::-1], global_centers, aux)

    def predict(self, state: CascadeState, size) -> torch.Tensor:
        target = state.enhanced[0].shape[-2:]
        fused = torch.cat([_upsample(r, target) for r in state.enhanced], 1)
        return _upsample(self.head(fused), size)


class ClassAwareSegmenter(nn.Module):
    """Encoder, optional global class centers, class-aware decoder."""

    def __init__(self, cfg: RunConfig | None = None, encoder: nn.Module | None = None):
        super().__init__()
        cfg = cfg or RunConfig()
        self.cfg = cfg
        self.num_classes = cfg.data.num_classes
        self.encoder = encoder or ConvEncoder(cfg.encoder)
        chans = self.encoder.out_channels
        self.cg_layer = cfg.gca.cg_layer
        if cfg.gca.enabled:
            self.gca = GlobalClassAware(chans[self.cg_layer - 1], self.num_classes)
            global_dim = chans[self.cg_layer - 1]
        else:
            self.gca = None
            global_dim = None
        self.decoder = ClassAwareDecoder(chans, self.num_classes, cfg, global_dim)
        self.aux_stages = cfg.loss.aux_stages

    def force_identity_affine(self, flag: bool = True):
        for m in self.modules():
            if isinstance(m, LocalClassAware):
                m.force_identity = flag

    def forward(self, images: torch.Tensor) -> SegOutput:
        pyramid = encode(images, self.encoder)
        aux = []
        centers = None
        if self.gca is not None:
            centers, gca_logits = self.gca(pyramid[self.cg_layer - 1])
            aux.append(gca_logits)
        state = self.decoder.run_cascade(pyramid, centers)
        aux.extend(state.aux_logits)
        if self.aux_stages == "deepest":
            aux = aux[:1]
        logits = self.decoder.predict(state, images.shape[-2:])
        return SegOutput(logits, aux, state)


def build_model(cfg: RunConfig) -> ClassAwareSegmenter:
    return ClassAwareSegmenter(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
