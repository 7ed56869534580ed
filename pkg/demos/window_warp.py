"""
Warping local windows
---------------------

Split a small feature plane into a 2x2 grid of windows, then read each
window back through a rotated, scaled and shifted sampling grid. With the
identity factors the read is exact; the warped reads interpolate.
"""

import math

import torch

from classaware_seg.lca import AffineFactors, sample_window, split, transform_window, window_geometry

plane = torch.arange(64.0).reshape(1, 1, 8, 8)
windows, _, grid = split(plane, plane, 2, 2)
geom = window_geometry(grid)

identity = AffineFactors.identity(grid.count)
same = sample_window(plane, transform_window(geom, identity))
print("identity read matches the split windows:", torch.equal(same, windows))

# a quarter turn in the first window, a zoom-out in the second, a shift in the third
factors = AffineFactors(
    scale=torch.tensor([1.0, 1.5, 1.0, 1.0]),
    theta=torch.tensor([math.pi / 2, 0.0, 0.0, 0.0]),
    offset=torch.tensor([[0.0, 0.0], [0.0, 0.0], [0.5, 0.0], [0.0, 0.0]]),
)
warped = sample_window(plane, transform_window(geom, factors))
for i in range(grid.count):
    print(f"window {i}:\n{windows[i, 0].numpy()}\n->\n{warped[i, 0].numpy().round(2)}\n")
