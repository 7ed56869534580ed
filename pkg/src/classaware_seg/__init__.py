"""Class-aware semantic segmentation with global and affine-warped local class centers."""

from .config import RunConfig, desk_profile, load_config
from .data import IGNORE_INDEX, SegBatch, augment, synth_shapes, tile_image
from .decoder import ClassAwareSegmenter, build_model, count_parameters
from .gca import global_class_centers
from .lca import (AffineFactors, LocalClassAware, local_class_centers, multi_head_class_attention,
                  sample_window, split, transform_window)
from .metrics import ConfusionMatrix, metrics
from .objective import LossWeights, cross_entropy, total_loss
from .train_eval import evaluate, load_checkpoint, make_datasets, poly_lr, seeded_model, train

__version__ = "0.1.0"
