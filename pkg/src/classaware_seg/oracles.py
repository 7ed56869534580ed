"""Naive loop-based references for checking the vectorised operators.

Nothing here imports from the rest of the package; everything works on
plain numpy float64 arrays with explicit Python loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class OracleReport:
    case_id: str
    max_abs: float
    max_rel: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.case_id:<40s} max_abs={self.max_abs:.3e} max_rel={self.max_rel:.3e}"


def compare(case_id: str, got, expected, atol: float = 1e-8, rtol: float | None = None) -> OracleReport:
    """Max absolute error, and error relative to the largest expected magnitude.

    Passes when ``max_abs < atol``, or when ``rtol`` is given and ``max_rel < rtol``.
    """
    got = np.asarray(got, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if got.shape != expected.shape:
        return OracleReport(case_id, math.inf, math.inf, False)
    diff = np.abs(got - expected)
    max_abs = float(diff.max()) if diff.size else 0.0
    scale = float(np.abs(expected).max()) if expected.size else 0.0
    max_rel = max_abs / max(scale, 1e-12)
    if not np.isfinite(max_abs):
        return OracleReport(case_id, max_abs, max_rel, False)
    passed = max_abs < atol if rtol is None else (max_rel < rtol or max_abs < atol)
    return OracleReport(case_id, max_abs, max_rel, passed)


def _softmax(values):
    m = max(values)
    exps = [math.exp(v - m) for v in values]
    s = sum(exps)
    return [e / s for e in exps]


def oracle_class_centers(feature, logits):
    """``feature [C, H, W]``, ``logits [K, H, W]`` to ``[K, C]``: softmax over positions, weighted sum."""
    feature = np.asarray(feature, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    c = feature.shape[0]
    k = logits.shape[0]
    positions = [(i, j) for i in range(feature.shape[1]) for j in range(feature.shape[2])]
    out = np.zeros((k, c))
    for cls in range(k):
        weights = _softmax([logits[cls, i, j] for i, j in positions])
        for ch in range(c):
            total = 0.0
            for wgt, (i, j) in zip(weights, positions):
                total += wgt * feature[ch, i, j]
            out[cls, ch] = total
    return out


def oracle_attention(pixels, keys, values, heads: int = 1, scaled: bool = True):
    """``pixels [P, D]``, ``keys [K, D]``, ``values [K, Dv]`` to ``[P, Dv]``.

    Head ``i`` uses channel slice ``i`` of each input.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    p, d = pixels.shape
    k, dv = values.shape
    dh, dvh = d // heads, dv // heads
    out = np.zeros((p, dv))
    for head in range(heads):
        for px in range(p):
            scores = []
            for cls in range(k):
                dot = 0.0
                for ch in range(dh):
                    dot += pixels[px, head * dh + ch] * keys[cls, head * dh + ch]
                scores.append(dot / math.sqrt(dh) if scaled else dot)
            weights = _softmax(scores)
            for ch in range(dvh):
                total = 0.0
                for cls in range(k):
                    total += weights[cls] * values[cls, head * dvh + ch]
                out[px, head * dvh + ch] = total
    return out


def oracle_affine(points, center, half_extent, scale: float, theta: float, offset):
    """Map each ``(x, y)`` point: center + offset*half_extent + R(theta) (scale * (p - center)),
    with ``R = [[cos, sin], [-sin, cos]]``."""
    cx, cy = center
    hx, hy = half_extent
    ox, oy = offset
    ct, st = math.cos(theta), math.sin(theta)
    out = []
    for x, y in points:
        dx, dy = scale * (x - cx), scale * (y - cy)
        out.append((cx + ox * hx + ct * dx + st * dy, cy + oy * hy - st * dx + ct * dy))
    return np.array(out, dtype=np.float64)


def oracle_bilinear(plane, x: float, y: float):
    """Bilinear value of ``plane [C, H, W]`` at ``(x, y)`` with border clamping."""
    plane = np.asarray(plane, dtype=np.float64)
    _, h, w = plane.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * plane[:, y0, x0] + fx * (1 - fy) * plane[:, y0, x1]
            + (1 - fx) * fy * plane[:, y1, x0] + fx * fy * plane[:, y1, x1])


def oracle_cross_entropy(logits, target: int) -> float:
    """Negative log softmax probability of ``target`` for one pixel's logits."""
    probs = _softmax(list(np.asarray(logits, dtype=np.float64)))
    return -math.log(probs[target])


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`` per coordinate."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(x))
        flat[i] = orig - eps
        down = float(f(x))
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (up - down) / (2 * eps)
    return grad
