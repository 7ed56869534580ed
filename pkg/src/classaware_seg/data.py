"""Segmentation data: tiling, augmentation, synthetic shapes, on-disk tiled datasets."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IGNORE_INDEX = 255


@dataclass
class SegBatch:
    """Images ``[B, 3, H, W]`` in [0, 1] and integer masks ``[B, H, W]``."""

    images: torch.Tensor
    masks: torch.Tensor

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be [B, 3, H, W], got {tuple(self.images.shape)}")
        b, _, h, w = self.images.shape
        if tuple(self.masks.shape) != (b, h, w):
            raise ValueError("images and masks disagree on B, H, W")

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, idx) -> "SegBatch":
        if isinstance(idx, int):
            idx = slice(idx, idx + 1)
        return SegBatch(self.images[idx], self.masks[idx])

    def check(self, num_classes: int, multiple: int = 32):
        h, w = self.images.shape[-2:]
        if h % multiple or w % multiple:
            raise ValueError(f"H and W must be multiples of {multiple}, got {h}x{w}")
        valid = self.masks[self.masks != IGNORE_INDEX]
        if valid.numel() and (valid.min() < 0 or valid.max() >= num_classes):
            raise ValueError("mask contains labels outside 0..K-1")

    @staticmethod
    def cat(batches: Sequence["SegBatch"]) -> "SegBatch":
        return SegBatch(torch.cat([b.images for b in batches]), torch.cat([b.masks for b in batches]))


@dataclass
class DatasetManifest:
    root: Path
    split: str
    num_classes: int
    class_names: tuple[str, ...]
    tile: int
    stride: int

    def __post_init__(self):
        if self.tile <= 0 or self.stride <= 0:
            raise ValueError("tile and stride must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names must have one entry per class")


# -- tiling --------------------------------------------------------------


def tile_offsets(length: int, tile: int, stride: int) -> list[int]:
    """Start offsets along one axis; the last tile is anchored to the far edge."""
    if tile <= 0 or stride <= 0:
        raise ValueError("tile and stride must be positive")
    if tile > length:
        raise ValueError(f"tile {tile} larger than extent {length}")
    offsets = list(range(0, length - tile + 1, stride))
    if offsets[-1] + tile < length:
        offsets.append(length - tile)
    return offsets


class Tile(NamedTuple):
    image: torch.Tensor
    mask: torch.Tensor
    offset: tuple[int, int]


def tile_image(image: torch.Tensor, mask: torch.Tensor, tile: int, stride: int) -> list[Tile]:
    if image.shape[-2:] != mask.shape:
        raise ValueError(f"image {tuple(image.shape)} and mask {tuple(mask.shape)} disagree")
    h0, w0 = mask.shape
    tiles = []
    for y in tile_offsets(h0, tile, stride):
        for x in tile_offsets(w0, tile, stride):
            tiles.append(Tile(image[:, y:y + tile, x:x + tile], mask[y:y + tile, x:x + tile], (y, x)))
    return tiles


def stitch_tiles(tiles: Sequence[torch.Tensor], offsets: Sequence[tuple[int, int]],
                 shape: tuple[int, int]) -> torch.Tensor:
    """Paste tiles (``[..., t, t]``) back at their offsets; later tiles overwrite overlaps."""
    lead = tiles[0].shape[:-2]
    out = torch.zeros(*lead, *shape, dtype=tiles[0].dtype)
    for t, (y, x) in zip(tiles, offsets):
        out[..., y:y + t.shape[-2], x:x + t.shape[-1]] = t
    return out


# -- augmentation ---------------------------------------------------------


def _resize(image: torch.Tensor, mask: torch.Tensor, scale: float):
    h, w = mask.shape
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (nh, nw) == (h, w):
        return image, mask
    image = F.interpolate(image[None], size=(nh, nw), mode="bilinear", align_corners=False)[0]
    mask = F.interpolate(mask[None, None].float(), size=(nh, nw), mode="nearest")[0, 0].long()
    return image, mask


def _crop_or_pad(image, mask, size: tuple[int, int], rng: np.random.Generator):
    th, tw = size
    h, w = mask.shape
    if h > th or w > tw:
        y = int(rng.integers(0, h - th + 1)) if h > th else 0
        x = int(rng.integers(0, w - tw + 1)) if w > tw else 0
        image = image[:, y:y + min(h, th), x:x + min(w, tw)]
        mask = mask[y:y + min(h, th), x:x + min(w, tw)]
        h, w = mask.shape
    if h < th or w < tw:
        y = int(rng.integers(0, th - h + 1))
        x = int(rng.integers(0, tw - w + 1))
        out_img = image.new_zeros(3, th, tw)
        out_mask = mask.new_full((th, tw), IGNORE_INDEX)
        out_img[:, y:y + h, x:x + w] = image
        out_mask[y:y + h, x:x + w] = mask
        image, mask = out_img, out_mask
    return image, mask


# YIQ transform, used for hue rotation.
_RGB2YIQ = torch.tensor([[0.299, 0.587, 0.114],
                         [0.596, -0.274, -0.322],
                         [0.211, -0.523, 0.312]])
_YIQ2RGB = torch.linalg.inv(_RGB2YIQ)


def _gray(image):
    return (0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2])[None]


def photometric_distort(image: torch.Tensor, rng: np.random.Generator,
                        strength: float = 0.25, hue_deg: float = 9.0) -> torch.Tensor:
    """Brightness, contrast, saturation and hue jitter in random order."""

    def brightness(img):
        return img * (1 + rng.uniform(-strength, strength))

    def contrast(img):
        return (img - _gray(img).mean()) * (1 + rng.uniform(-strength, strength)) + _gray(img).mean()

    def saturation(img):
        g = _gray(img)
        return (img - g) * (1 + rng.uniform(-strength, strength)) + g

    def hue(img):
        a = math.radians(rng.uniform(-hue_deg, hue_deg))
        rot = torch.tensor([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
        m = (_YIQ2RGB @ rot @ _RGB2YIQ).to(img.dtype)
        return torch.einsum("ij,jhw->ihw", m, img)

    ops = [brightness, contrast, saturation, hue]
    for i in rng.permutation(len(ops)):
        image = ops[i](image).clamp(0, 1)
    return image


def augment_sample(image: torch.Tensor, mask: torch.Tensor, rng: np.random.Generator,
                   scale_range=(0.5, 1.5), flip_prob=0.5, photometric=True):
    size = tuple(mask.shape)
    if rng.random() < flip_prob:
        image, mask = image.flip(-1), mask.flip(-1)
    if rng.random() < flip_prob:
        image, mask = image.flip(-2), mask.flip(-2)
    lo, hi = scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    if scale != 1.0:
        image, mask = _resize(image, mask, scale)
        image, mask = _crop_or_pad(image, mask, size, rng)
    if photometric:
        image = photometric_distort(image, rng)
    return image, mask


def augment(batch: SegBatch, rng_seed: int, scale_range=(0.5, 1.5), flip_prob: float = 0.5,
            photometric: bool = True) -> SegBatch:
    """Random flips, rescaling and photometric jitter, deterministic in ``rng_seed``.

    Geometric ops hit image and mask alike (mask resampled nearest-neighbour);
    the output is cropped or padded back to the input size, padding with the
    ignore label.
    """
    if not 0 <= flip_prob <= 1:
        raise ValueError("flip_prob must lie in [0, 1]")
    images, masks = [], []
    for i in range(len(batch)):
        rng = np.random.default_rng([rng_seed, i])
        img, msk = augment_sample(batch.images[i], batch.masks[i], rng, scale_range, flip_prob, photometric)
        images.append(img)
        masks.append(msk)
    return SegBatch(torch.stack(images), torch.stack(masks))


# -- synthetic shapes -------------------------------------------------------

SHAPE_KINDS = ("rectangle", "ellipse", "bar", "triangle", "ring", "cross")

# Mean RGB per shape kind; instances jitter around it.
_KIND_COLORS = np.array([
    [0.85, 0.30, 0.25],
    [0.25, 0.70, 0.30],
    [0.25, 0.35, 0.85],
    [0.85, 0.80, 0.25],
    [0.75, 0.30, 0.80],
    [0.25, 0.80, 0.80],
])


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, a: float, b: float) -> np.ndarray:
    """Membership of local-frame coordinates (u along the major axis)."""
    if kind == "rectangle":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if kind == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1
    if kind == "bar":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if kind == "triangle":
        # isosceles, apex at u=+a, base at u=-a with half-width 2b
        t = (a - u) / (2 * a)
        return (u >= -a) & (u <= a) & (np.abs(v) <= 2 * b * t)
    if kind == "ring":
        r = (u / a) ** 2 + (v / a) ** 2
        return (r <= 1) & (r >= 0.36)
    if kind == "cross":
        w = max(b / 2, 1.0)
        return ((np.abs(u) <= a) & (np.abs(v) <= w)) | ((np.abs(v) <= a) & (np.abs(u) <= w))
    raise ValueError(kind)


def _aspect(kind: str, rng) -> float:
    if kind == "bar":
        return rng.uniform(3.0, 4.5)
    if kind in ("rectangle", "ellipse", "triangle"):
        return rng.uniform(1.0, 1.8)
    return 1.0


def render_shapes_image(K: int, size: int, rng: np.random.Generator, min_shapes=3, max_shapes=6):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    # smooth background with low-frequency gradient and noise
    base = rng.uniform(0.35, 0.6, size=3)
    gx, gy = rng.uniform(-0.15, 0.15, size=(2, 3))
    image = base[:, None, None] + gx[:, None, None] * (xx / size - 0.5) + gy[:, None, None] * (yy / size - 0.5)
    mask = np.zeros((size, size), dtype=np.int64)
    base_extent = size / 7
    for _ in range(int(rng.integers(min_shapes, max_shapes + 1))):
        cls = int(rng.integers(1, K))
        kind = SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)]
        theta = rng.uniform(0, 2 * np.pi)
        a = base_extent * rng.uniform(0.25, 2.0)
        b = max(a / _aspect(kind, rng), 1.5)
        a = max(a, 2.0)
        cx, cy = rng.uniform(0, size, size=2)
        dx, dy = xx - cx, yy - cy
        u = np.cos(theta) * dx + np.sin(theta) * dy
        v = -np.sin(theta) * dx + np.cos(theta) * dy
        inside = _shape_mask(kind, u, v, a, b)
        color = np.clip(_KIND_COLORS[(cls - 1) % len(_KIND_COLORS)] + rng.uniform(-0.15, 0.15, 3), 0, 1)
        image[:, inside] = color[:, None]
        mask[inside] = cls
    image = image + rng.normal(0, 0.04, size=image.shape)
    return np.clip(image, 0, 1).astype(np.float32), mask


def synth_shapes(n: int, K: int, size: int, rng_seed: int) -> SegBatch:
    """Images of randomly rotated and scaled shapes; the class of a shape is its kind.

    Class 0 is background; class ``k >= 1`` is ``SHAPE_KINDS[k - 1]``.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if size % 32:
        raise ValueError("size must be a multiple of 32")
    images, masks = [], []
    for i in range(n):
        img, msk = render_shapes_image(K, size, np.random.default_rng([rng_seed, i]))
        images.append(img)
        masks.append(msk)
    return SegBatch(torch.from_numpy(np.stack(images)), torch.from_numpy(np.stack(masks)))


# -- batching ---------------------------------------------------------------


def iterate_batches(data: SegBatch, batch_size: int, seed: int, epoch: int, *,
                    augment_kwargs: dict | None = None, workers: int = 0,
                    drop_last: bool = True) -> Iterator[SegBatch]:
    """Shuffled batches for one epoch.

    Per-sample augmentation seeds depend only on (seed, epoch, sample index),
    so the output is identical for any ``workers`` count.
    """
    order = np.random.default_rng([seed, epoch]).permutation(len(data))
    stop = len(order) - (len(order) % batch_size if drop_last else 0)

    def load(idx: int):
        img, msk = data.images[idx], data.masks[idx]
        if augment_kwargs is not None:
            img, msk = augment_sample(img, msk, np.random.default_rng([seed, epoch, idx]), **augment_kwargs)
        return img, msk

    pool = ThreadPoolExecutor(workers) if workers > 0 else None
    try:
        for start in range(0, stop, batch_size):
            idxs = [int(i) for i in order[start:start + batch_size]]
            items = list(pool.map(load, idxs)) if pool else [load(i) for i in idxs]
            yield SegBatch(torch.stack([a for a, _ in items]), torch.stack([b for _, b in items]))
    finally:
        if pool:
            pool.shutdown()


# -- on-disk datasets -------------------------------------------------------

MANIFEST_NAME = "manifest.cfg"


def read_manifest(root: str | Path, split: str) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    values = {}
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"bad manifest line: {line!r}")
        values[key.strip()] = val.strip()
    try:
        k = int(values["num_classes"])
        names = tuple(s.strip() for s in values.get("class_names", "").split(",") if s.strip()) or \
            tuple(f"class_{i}" for i in range(k))
        return DatasetManifest(root, split, k, names, int(values["tile"]), int(values["stride"]))
    except KeyError as exc:
        raise ValueError(f"manifest missing key {exc}") from exc


def write_manifest(manifest: DatasetManifest):
    manifest.root.mkdir(parents=True, exist_ok=True)
    (manifest.root / MANIFEST_NAME).write_text(
        f"num_classes = {manifest.num_classes}\n"
        f"class_names = {','.join(manifest.class_names)}\n"
        f"tile = {manifest.tile}\n"
        f"stride = {manifest.stride}\n")


def save_split(root: str | Path, split: str, batch: SegBatch, prefix: str = "img"):
    """Write a batch as ``<root>/<split>/images/*.png`` and ``masks/*.png``."""
    img_dir = Path(root) / split / "images"
    msk_dir = Path(root) / split / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    msk_dir.mkdir(parents=True, exist_ok=True)
    for i in range(len(batch)):
        rgb = (batch.images[i].permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(img_dir / f"{prefix}_{i:04d}.png")
        Image.fromarray(batch.masks[i].numpy().astype(np.uint8), "L").save(msk_dir / f"{prefix}_{i:04d}.png")


def read_image(path: str | Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def read_mask(path: str | Path) -> torch.Tensor:
    return torch.from_numpy(np.asarray(Image.open(path), dtype=np.int64).copy())


def load_split(manifest: DatasetManifest, tiled: bool = True) -> SegBatch | list[SegBatch]:
    """Load a split. With ``tiled`` the images are cut into manifest-sized tiles
    and one SegBatch is returned; otherwise a list of full-size single-image batches."""
    img_dir = manifest.root / manifest.split / "images"
    msk_dir = manifest.root / manifest.split / "masks"
    if not img_dir.is_dir() or not msk_dir.is_dir():
        raise FileNotFoundError(f"missing images/ or masks/ under {manifest.root / manifest.split}")
    paths = sorted(img_dir.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG images in {img_dir}")
    out = []
    for p in paths:
        image, mask = read_image(p), read_mask(msk_dir / p.name)
        if tiled:
            out.extend(SegBatch(t.image[None], t.mask[None]) for t in
                       tile_image(image, mask, manifest.tile, manifest.stride))
        else:
            out.append(SegBatch(image[None], mask[None]))
    return SegBatch.cat(out) if tiled else out
