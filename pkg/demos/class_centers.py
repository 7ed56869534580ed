"""
Class centers from soft assignments
-----------------------------------

A pre-classifier scores every pixel for every class; a softmax over the
pixels turns each class's scores into weights, and the class center is the
weighted mean feature. Sharper scores pull a center toward fewer pixels.
"""

import torch

from classaware_seg.gca import global_class_centers

torch.manual_seed(0)
feature = torch.randn(1, 3, 4, 4)

for sharpness in (0.0, 1.0, 10.0, 100.0):
    logits = sharpness * torch.randn(1, 2, 4, 4, generator=torch.Generator().manual_seed(1))
    centers = global_class_centers(feature, logits)
    print(f"sharpness {sharpness:>5}: class 0 center {centers[0, 0].numpy().round(3)}")

print("spatial mean          :", feature.mean(dim=(2, 3))[0].numpy().round(3))
