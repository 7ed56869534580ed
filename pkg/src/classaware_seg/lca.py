"""Local class centers over affine-warped windows, and class-center cross-attention.

Coordinates are in feature-cell units with ``x`` along width and ``y`` along
height; cell ``(y, x)`` sits at integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ConvNormAct
from .config import ATBConfig
from .gca import PreClassifier, class_centers


@dataclass(frozen=True)
class WindowGrid:
    n_h: int
    n_w: int
    h: int  # window height in cells
    w: int
    height: int  # unpadded plane size
    width: int

    @property
    def count(self) -> int:
        return self.n_h * self.n_w

    @property
    def padded(self) -> tuple[int, int]:
        return self.n_h * self.h, self.n_w * self.w


@dataclass
class AffineFactors:
    scale: torch.Tensor  # [n]
    theta: torch.Tensor  # [n], radians
    offset: torch.Tensor  # [n, 2] (dx, dy) in units of window half-extent

    @staticmethod
    def identity(n: int, dtype=torch.float32, device=None) -> "AffineFactors":
        z = torch.zeros(n, dtype=dtype, device=device)
        return AffineFactors(z + 1, z.clone(), torch.zeros(n, 2, dtype=dtype, device=device))


@dataclass
class WindowGeometry:
    """Corner and center coordinates of every window in the (padded) plane, ``[count]`` each."""

    x_l: torch.Tensor
    y_l: torch.Tensor
    x_r: torch.Tensor
    y_r: torch.Tensor

    @property
    def x_c(self):
        return (self.x_l + self.x_r) / 2

    @property
    def y_c(self):
        return (self.y_l + self.y_r) / 2


def window_grid(height: int, width: int, n_h: int, n_w: int) -> WindowGrid:
    if n_h < 1 or n_w < 1:
        raise ValueError("window counts must be >= 1")
    if n_h > height or n_w > width:
        raise ValueError(f"{n_h}x{n_w} windows do not fit a {height}x{width} plane")
    return WindowGrid(n_h, n_w, math.ceil(height / n_h), math.ceil(width / n_w), height, width)


def split_windows(x: torch.Tensor, grid: WindowGrid) -> torch.Tensor:
    """``[B, C, H, W]`` to ``[B * n_h * n_w, C, h, w]``, replicate-padding to fit."""
    b, c, h, w = x.shape
    ph, pw = grid.padded
    if (ph, pw) != (h, w):
        x = F.pad(x, (0, pw - w, 0, ph - h), mode="replicate")
    x = x.reshape(b, c, grid.n_h, grid.h, grid.n_w, grid.w)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b * grid.count, c, grid.h, grid.w)


def merge_windows(windows: torch.Tensor, grid: WindowGrid) -> torch.Tensor:
    n, c = windows.shape[:2]
    b = n // grid.count
    x = windows.reshape(b, grid.n_h, grid.n_w, c, grid.h, grid.w)
    x = x.permute(0, 3, 1, 4, 2, 5).reshape(b, c, *grid.padded)
    return x[:, :, :grid.height, :grid.width]


def split(feature: torch.Tensor, dist: torch.Tensor, n_h: int, n_w: int):
    """Split a feature map and its class logits into the same windows."""
    if feature.shape[2:] != dist.shape[2:]:
        raise ValueError("feature and distribution must share spatial size")
    grid = window_grid(feature.shape[2], feature.shape[3], n_h, n_w)
    return split_windows(feature, grid), split_windows(dist, grid), grid


def window_geometry(grid: WindowGrid, dtype=torch.float64, device=None) -> WindowGeometry:
    iy = torch.arange(grid.n_h, dtype=dtype, device=device).repeat_interleave(grid.n_w)
    ix = torch.arange(grid.n_w, dtype=dtype, device=device).repeat(grid.n_h)
    return WindowGeometry(ix * grid.w, iy * grid.h, ix * grid.w + grid.w - 1, iy * grid.h + grid.h - 1)


def rotation_matrix(theta: torch.Tensor) -> torch.Tensor:
    """``[[cos, sin], [-sin, cos]]`` for each angle, shape ``[..., 2, 2]``."""
    c, s = torch.cos(theta), torch.sin(theta)
    return torch.stack([torch.stack([c, s], -1), torch.stack([-s, c], -1)], -2)


def transform_points(points: torch.Tensor, center: torch.Tensor, half_extent: torch.Tensor,
                     factors: AffineFactors) -> torch.Tensor:
    """Scale, rotate and offset ``[n, P, 2]`` points about per-window centers ``[n, 2]``."""
    rel = (points - center[:, None]) * factors.scale[:, None, None]
    rot = rotation_matrix(factors.theta)  # [n, 2, 2]
    moved = torch.einsum("nij,npj->npi", rot, rel)
    return center[:, None] + (factors.offset * half_extent)[:, None] + moved


def transform_window(geom: WindowGeometry, factors: AffineFactors) -> torch.Tensor:
    """Sampling grid ``[n, h, w, 2]`` (x, y) of each window after the affine warp.

    ``geom`` describes one image's windows; ``factors`` may cover several images
    (``n`` a multiple of the window count), in which case geometry repeats.
    """
    count = geom.x_l.shape[0]
    h = int(round((geom.y_r[0] - geom.y_l[0]).item())) + 1
    w = int(round((geom.x_r[0] - geom.x_l[0]).item())) + 1
    n = factors.theta.shape[0]
    reps = n // count
    dtype = factors.theta.dtype
    xl, yl = geom.x_l.to(dtype).repeat(reps), geom.y_l.to(dtype).repeat(reps)
    yy, xx = torch.meshgrid(torch.arange(h, dtype=dtype, device=xl.device),
                            torch.arange(w, dtype=dtype, device=xl.device), indexing="ij")
    local = torch.stack([xx, yy], -1).reshape(1, h * w, 2)
    points = local + torch.stack([xl, yl], -1)[:, None]
    center = torch.stack([geom.x_c.to(dtype).repeat(reps), geom.y_c.to(dtype).repeat(reps)], -1)
    half = torch.tensor([w / 2, h / 2], dtype=dtype, device=xl.device).expand(n, 2)
    return transform_points(points, center, half, factors).reshape(n, h, w, 2)


def sample_window(plane: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinear read of ``plane [B, C, H, W]`` at ``grid [n, h, w, 2]`` (x, y).

    Windows are assigned to images in order, ``n // B`` per image. Coordinates
    outside the plane are clamped to the border. Differentiable in both the
    plane values and the grid.
    """
    b, c, H, W = plane.shape
    n, h, w, _ = grid.shape
    per_image = n // b
    x = grid[..., 0].clamp(0, W - 1)
    y = grid[..., 1].clamp(0, H - 1)
    # NaN coordinates (a diverging run) still need valid indices; the weights carry the NaN
    x0 = x.detach().nan_to_num(0.0).floor()
    y0 = y.detach().nan_to_num(0.0).floor()
    wx, wy = x - x0, y - y0
    x0i, y0i = x0.long(), y0.long()
    x1i, y1i = (x0i + 1).clamp(max=W - 1), (y0i + 1).clamp(max=H - 1)
    base = (torch.arange(b, device=plane.device).repeat_interleave(per_image) * (H * W)).view(n, 1, 1)
    flat = plane.permute(0, 2, 3, 1).reshape(b * H * W, c)

    def gather(yi, xi):
        return flat[(base + yi * W + xi).reshape(-1)].reshape(n, h, w, c)

    wx, wy = wx[..., None], wy[..., None]
    out = ((1 - wx) * (1 - wy) * gather(y0i, x0i) + wx * (1 - wy) * gather(y0i, x1i)
           + (1 - wx) * wy * gather(y1i, x0i) + wx * wy * gather(y1i, x1i))
    return out.permute(0, 3, 1, 2)


def local_class_centers(windows: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Per-window class centers ``[n, K, C]`` from ``[n, C, h, w]`` and ``[n, K, h, w]``."""
    return class_centers(windows, logits)


def multi_head_class_attention(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor,
                               heads: int, scaled: bool = True):
    """Pixel-to-class cross-attention.

    queries ``[n, P, D]``, keys ``[n, K, D]``, values ``[n, K, Dv]``. Channels are
    split evenly into ``heads`` groups; each head's affinity is a softmax over
    classes. Returns ``(out [n, P, Dv], affinity [n, heads, P, K])``.
    """
    n, p, d = queries.shape
    k, dv = keys.shape[1], values.shape[2]
    if d % heads or dv % heads:
        raise ValueError(f"{heads} heads do not divide widths {d}/{dv}")
    q = queries.reshape(n, p, heads, d // heads).transpose(1, 2)
    kk = keys.reshape(n, k, heads, d // heads).transpose(1, 2)
    v = values.reshape(n, k, heads, dv // heads).transpose(1, 2)
    logits = q @ kk.transpose(-1, -2)
    if scaled:
        logits = logits / math.sqrt(d // heads)
    affinity = logits.softmax(dim=-1)
    out = (affinity @ v).transpose(1, 2).reshape(n, p, dv)
    return out, affinity


class AffineTransformBlock(nn.Module):
    """Predicts per-window (scale, rotation, offset) from the pooled window feature.

    Only the enabled factors get output units; disabled ones stay at identity.
    The projection starts at zero so every window starts untransformed.
    """

    def __init__(self, channels: int, cfg: ATBConfig | None = None, negative_slope: float = 0.01):
        super().__init__()
        cfg = cfg or ATBConfig()
        self.use_rotation, self.use_offset, self.use_scale = cfg.rotation, cfg.offset, cfg.scale
        self.out_dim = int(cfg.rotation) + 2 * int(cfg.offset) + int(cfg.scale)
        if self.out_dim == 0:
            raise ValueError("at least one affine factor must be enabled")
        self.proj = nn.Linear(channels, self.out_dim)
        self.act = nn.LeakyReLU(negative_slope)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, windows: torch.Tensor) -> AffineFactors:
        pooled = windows.mean(dim=(2, 3))
        raw = self.act(self.proj(pooled))
        ident = AffineFactors.identity(raw.shape[0], raw.dtype, raw.device)
        i = 0
        theta, offset, scale = ident.theta, ident.offset, ident.scale
        if self.use_rotation:
            theta = raw[:, i]
            i += 1
        if self.use_offset:
            offset = raw[:, i:i + 2]
            i += 2
        if self.use_scale:
            # keep windows from collapsing or flipping
            scale = (1 + raw[:, i]).clamp_min(1e-3)
        return AffineFactors(scale, theta, offset)


class ClassValueProjection(nn.Module):
    """Projects class centers to attention values, per head or shared by all heads."""

    def __init__(self, in_dim: int, out_dim: int, heads: int, tied: bool = False):
        super().__init__()
        self.heads, self.tied = heads, tied
        self.proj = nn.Linear(in_dim, out_dim // heads if tied else out_dim)

    def forward(self, centers):
        v = self.proj(centers)
        return v.repeat(1, 1, self.heads) if self.tied else v


class LocalClassAware(nn.Module):
    """Window-level class-center attention for one decoder stage.

    Pixels attend to the local class centers of their own window (keys) and
    read out the matching global class centers (values). With
    ``global_dim=None`` the local centers serve as values too.
    """

    def __init__(self, width: int, num_classes: int, global_dim: int | None,
                 patches=(4, 4), heads: int = 8, atb: ATBConfig | None = None,
                 tie_value_heads: bool = False, norm: str = "batch", act: str = "relu"):
        super().__init__()
        self.patches, self.heads = tuple(patches), heads
        self.classifier = PreClassifier(width, num_classes)
        atb = atb or ATBConfig()
        self.atb = AffineTransformBlock(width, atb) if (atb.scale or atb.rotation or atb.offset) else None
        self.query = nn.Linear(width, width)
        self.key = nn.Linear(width, width)
        self.value = ClassValueProjection(global_dim or width, width, heads, tie_value_heads)
        self.out = ConvNormAct(2 * width, width, 1, 1, norm, act)
        self.force_identity = False

    def effective_patches(self, height: int, width: int) -> tuple[int, int]:
        return min(self.patches[0], height), min(self.patches[1], width)

    def forward(self, x: torch.Tensor, global_centers: torch.Tensor | None = None):
        logits = self.classifier(x)
        out, _ = self.attend(x, logits, global_centers)
        return self.out(torch.cat([x, out], 1)), logits

    def attend(self, x, logits, global_centers=None, factors: AffineFactors | None = None):
        b, c, H, W = x.shape
        n_h, n_w = self.effective_patches(H, W)
        win, win_logits, grid = split(x, logits, n_h, n_w)
        if factors is None and self.atb is not None:
            factors = (AffineFactors.identity(win.shape[0], x.dtype, x.device)
                       if self.force_identity else self.atb(win))
        if factors is not None:
            geom = window_geometry(grid, x.dtype, x.device)
            coords = transform_window(geom, factors)
            plane = torch.cat([x, logits], 1)
            ph, pw = grid.padded
            if (ph, pw) != (H, W):
                plane = F.pad(plane, (0, pw - W, 0, ph - H), mode="replicate")
            sampled = sample_window(plane, coords)
            win_hat, logits_hat = sampled[:, :c], sampled[:, c:]
        else:
            win_hat, logits_hat = win, win_logits
        local = local_class_centers(win_hat, logits_hat)  # [n, K, C]
        if global_centers is None:
            values = self.value(local)
        else:
            values = self.value(global_centers).repeat_interleave(grid.count, 0)
        queries = self.query(win.flatten(2).transpose(1, 2))
        out, affinity = multi_head_class_attention(queries, self.key(local), values, self.heads)
        out = out.transpose(1, 2).reshape(-1, c, grid.h, grid.w)
        return merge_windows(out, grid), affinity


class GlobalClassAttention(nn.Module):
    """Pixels attend directly to global class centers (keys and values alike)."""

    def __init__(self, width: int, global_dim: int, heads: int = 8, tie_value_heads: bool = False,
                 norm: str = "batch", act: str = "relu"):
        super().__init__()
        self.heads = heads
        self.query = nn.Linear(width, width)
        self.key = nn.Linear(global_dim, width)
        self.value = ClassValueProjection(global_dim, width, heads, tie_value_heads)
        self.out = ConvNormAct(2 * width, width, 1, 1, norm, act)

    def forward(self, x: torch.Tensor, global_centers: torch.Tensor):
        b, c, H, W = x.shape
        queries = self.query(x.flatten(2).transpose(1, 2))
        out, _ = multi_head_class_attention(queries, self.key(global_centers),
                                            self.value(global_centers), self.heads)
        out = out.transpose(1, 2).reshape(b, c, H, W)
        return self.out(torch.cat([x, out], 1)), None
