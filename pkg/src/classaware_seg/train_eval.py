"""Training loop, checkpoints, sliding-window / multi-scale evaluation, ablation sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import EvalConfig, RunConfig, parse_config_text
from .data import SHAPE_KINDS, SegBatch, iterate_batches, load_split, read_manifest, synth_shapes, tile_offsets
from .decoder import ClassAwareSegmenter, build_model, count_parameters
from .metrics import ConfusionMatrix, SegMetrics, metrics
from .objective import LossWeights, total_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def poly_lr(step: int, total: int, base: float = 0.01, power: float = 0.9) -> float:
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return base * (1 - step / total) ** power


def seeded_model(cfg: RunConfig) -> ClassAwareSegmenter:
    torch.manual_seed(cfg.train.seed)
    return build_model(cfg)


# -- data ------------------------------------------------------------------


@dataclass
class Datasets:
    train: SegBatch
    eval: list[SegBatch]  # one full-size image per entry
    class_names: tuple[str, ...]


def make_datasets(cfg: RunConfig) -> Datasets:
    """The pinned synthetic set (``data.dataset = synth``) or a dataset root on disk."""
    d = cfg.data
    if d.dataset == "synth":
        train = synth_shapes(d.n_train, d.num_classes, d.image_size, d.seed)
        held = synth_shapes(d.n_eval, d.num_classes, d.image_size, d.seed + 1000)
        names = ("background",) + tuple(SHAPE_KINDS[(i - 1) % len(SHAPE_KINDS)] for i in range(1, d.num_classes))
        return Datasets(train, [held[i] for i in range(len(held))], names)
    root = Path(d.dataset)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    manifest = read_manifest(root, d.train_split)
    if manifest.num_classes != d.num_classes:
        raise ValueError(f"manifest has {manifest.num_classes} classes, config {d.num_classes}")
    train = load_split(manifest, tiled=True)
    eval_manifest = read_manifest(root, d.eval_split)
    return Datasets(train, load_split(eval_manifest, tiled=False), manifest.class_names)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path: str | Path, model: nn.Module, cfg: RunConfig, step: int):
    """Container: ``{"state_dict", "config" (resolved text), "config_hash", "step"}``."""
    torch.save({"state_dict": model.state_dict(), "config": cfg.to_text(),
                "config_hash": cfg.hash, "step": step}, path)


@dataclass
class Checkpoint:
    model: ClassAwareSegmenter
    cfg: RunConfig
    step: int
    config_hash: str

    @property
    def hash_ok(self) -> bool:
        return self.cfg.hash == self.config_hash


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    cfg = parse_config_text(blob["config"])
    model = build_model(cfg)
    model.load_state_dict(blob["state_dict"])
    return Checkpoint(model, cfg, int(blob["step"]), blob["config_hash"])


# -- training --------------------------------------------------------------


@dataclass
class TrainResult:
    model: ClassAwareSegmenter
    losses: list[float] = field(default_factory=list)
    checkpoint: Path | None = None


def train(model: ClassAwareSegmenter, data: SegBatch, cfg: RunConfig,
          out_dir: str | Path | None = None) -> TrainResult:
    """SGD with momentum, weight decay and a per-step poly schedule.

    Writes ``checkpoint.pt``, ``loss.csv`` (``step,value`` lines) and
    ``config.cfg`` into ``out_dir`` when given.
    """
    t = cfg.train
    data.check(cfg.data.num_classes)
    torch.manual_seed(t.seed)
    weights = LossWeights(cfg.loss.main, cfg.loss.aux)
    opt = torch.optim.SGD(model.parameters(), lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay)
    aug = None
    if cfg.data.augment:
        aug = dict(scale_range=cfg.data.scale_range, flip_prob=cfg.data.flip_prob,
                   photometric=cfg.data.photometric)
    batch_size = min(t.batch_size, len(data))
    losses: list[float] = []
    model.train()
    step, epoch = 0, 0
    while step < t.iterations:
        for batch in iterate_batches(data, batch_size, t.seed, epoch, augment_kwargs=aug,
                                     workers=cfg.data.workers):
            if step >= t.iterations:
                break
            lr = poly_lr(step, t.iterations, t.lr, t.poly_power)
            for group in opt.param_groups:
                group["lr"] = lr
            out = model(batch.images)
            loss = total_loss(out.logits, out.aux_logits, batch.masks, weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss.item()} at step {step} (lr={lr:.3g})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
            if t.log_every and step % t.log_every == 0:
                log.info("step %d/%d loss %.4f lr %.5f", step, t.iterations, losses[-1], lr)
        epoch += 1
    result = TrainResult(model, losses)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(cfg.to_text())
        (out / "loss.csv").write_text("".join(f"{i},{v:.6f}\n" for i, v in enumerate(losses)))
        result.checkpoint = out / "checkpoint.pt"
        save_checkpoint(result.checkpoint, model, cfg, step)
    return result


# -- inference -------------------------------------------------------------


def _forward_padded(model, images):
    """Logits for inputs of any size: replicate-pad to a multiple of 32, then crop."""
    h, w = images.shape[-2:]
    ph, pw = -h % 32, -w % 32
    if ph or pw:
        images = F.pad(images, (0, pw, 0, ph), mode="replicate")
    return model(images).logits[..., :h, :w]


def sliding_logits(model, images: torch.Tensor, tile: int = 0, stride: int = 0) -> torch.Tensor:
    """Average logits over edge-anchored tiles; ``tile=0`` runs the whole image at once."""
    h, w = images.shape[-2:]
    if tile <= 0 or (tile >= h and tile >= w):
        return _forward_padded(model, images)
    stride = stride or tile
    th, tw = min(tile, h), min(tile, w)
    total = None
    count = images.new_zeros(1, 1, h, w)
    for y in tile_offsets(h, th, stride):
        for x in tile_offsets(w, tw, stride):
            logits = _forward_padded(model, images[..., y:y + th, x:x + tw])
            if total is None:
                total = images.new_zeros(images.shape[0], logits.shape[1], h, w)
            total[..., y:y + th, x:x + tw] += logits
            count[..., y:y + th, x:x + tw] += 1
    return total / count


def _scaled_size(n: int, scale: float) -> int:
    return max(32, int(round(n * scale / 32)) * 32)


@torch.no_grad()
def infer_probs(model, images: torch.Tensor, cfg: EvalConfig) -> torch.Tensor:
    """Class probabilities averaged over scales and (optionally) horizontal flips."""
    model.eval()
    h, w = images.shape[-2:]
    acc = None
    n = 0
    for s in cfg.scales:
        size = (h, w) if s == 1.0 else (_scaled_size(h, s), _scaled_size(w, s))
        x = images if size == (h, w) else F.interpolate(images, size=size, mode="bilinear", align_corners=False)
        variants = [False, True] if cfg.flip else [False]
        for flip in variants:
            xi = x.flip(-1) if flip else x
            probs = sliding_logits(model, xi, cfg.tile, cfg.stride).softmax(1)
            if flip:
                probs = probs.flip(-1)
            if size != (h, w):
                probs = F.interpolate(probs, size=(h, w), mode="bilinear", align_corners=False)
            acc = probs if acc is None else acc + probs
            n += 1
    return acc / n


def evaluate(model, dataset: Sequence[SegBatch], cfg: EvalConfig, num_classes: int) -> tuple[SegMetrics, ConfusionMatrix]:
    cm = ConfusionMatrix(num_classes)
    for item in dataset:
        pred = infer_probs(model, item.images, cfg).argmax(1)
        cm.accumulate(pred, item.masks)
    return metrics(cm), cm


# -- cost ------------------------------------------------------------------


def model_cost(model: nn.Module, size: tuple[int, int] = (128, 128)) -> dict:
    """Parameter count and multiply-accumulates of conv/linear layers for one image."""
    macs = 0

    def hook(mod, inp, out):
        nonlocal macs
        if isinstance(mod, nn.Conv2d):
            macs += out.numel() // out.shape[0] * (mod.in_channels // mod.groups) * mod.kernel_size[0] * mod.kernel_size[1]
        elif isinstance(mod, nn.Linear):
            macs += out.numel() // out.shape[0] * mod.in_features

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, 3, *size))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return {"params": count_parameters(model), "macs": macs}


# -- ablations -------------------------------------------------------------

ABLATION_GRIDS: dict[str, list] = {
    "structure": [(True, True), (False, True), (True, False), (False, False)],  # (gca, lca)
    "cg_layer": [4, 3, 2, 1],
    "atb_factors": [(True, True, True), (False, True, True), (True, False, True),
                    (True, True, False), (False, False, False)],  # (scale, rotation, offset)
    "patches": [(1, 1), (2, 2), (4, 4), (8, 8), (16, 16)],
    "heads": [1, 2, 4, 8, 16],
    "loss_weight": [0.2, 0.4, 0.6, 0.8, 1.0],
}


def ablation_overrides(axis: str, value) -> dict:
    if axis == "structure":
        return {"gca.enabled": bool(value[0]), "lca.enabled": bool(value[1])}
    if axis == "cg_layer":
        return {"gca.cg_layer": int(value)}
    if axis == "atb_factors":
        return {"atb.scale": bool(value[0]), "atb.rotation": bool(value[1]), "atb.offset": bool(value[2])}
    if axis == "patches":
        return {"lca.patches": tuple(value)}
    if axis == "heads":
        return {"lca.heads": int(value)}
    if axis == "loss_weight":
        return {"loss.aux": float(value)}
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_GRIDS)}")


def ablation_sweep(axis: str, base: RunConfig, grid: Sequence | None = None,
                   datasets: Datasets | None = None) -> list[dict]:
    """Train and evaluate one model per grid point, everything else held fixed."""
    if axis not in ABLATION_GRIDS:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_GRIDS)}")
    grid = ABLATION_GRIDS[axis] if grid is None else grid
    datasets = datasets or make_datasets(base)
    rows = []
    for value in grid:
        cfg = base.replace(ablation_overrides(axis, value))
        model = seeded_model(cfg)
        cost = model_cost(model, (cfg.data.image_size, cfg.data.image_size))
        train(model, datasets.train, cfg)
        m, _ = evaluate(model, datasets.eval, cfg.eval, cfg.data.num_classes)
        rows.append({"axis": axis, "value": _format_grid_value(value), "miou": m.miou, "macc": m.macc,
                     "mf1": m.mf1, "params": cost["params"], "macs": cost["macs"], "config_hash": cfg.hash})
        log.info("%s=%s %s", axis, rows[-1]["value"], m.summary())
    return rows


def _format_grid_value(value) -> str:
    if isinstance(value, tuple) and all(isinstance(v, bool) for v in value):
        return "".join("Y" if v else "N" for v in value)
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    return str(value)


def format_table(rows: list[dict]) -> str:
    """Tab-separated table with a header line."""
    if not rows:
        return ""
    keys = list(rows[0])
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join(f"{r[k]:.4f}" if isinstance(r[k], float) and not math.isnan(r[k]) else str(r[k])
                               for k in keys))
    return "\n".join(lines) + "\n"
