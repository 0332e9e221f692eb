"""
Builders shared by the test modules
"""

import numpy as np

from snarm.core.config import config_from_dict
from snarm.core.encoder import PatchFeatureGrid, PatchGeometry


def make_grid(values, image_size=None) -> PatchFeatureGrid:
    """Feature grid from an h x w x d array, optionally with a pixel footprint"""
    arr = np.asarray(values, dtype=np.float32)
    h, w = arr.shape[:2]
    geo = PatchGeometry(h, w, *(image_size or (h, w)))
    return PatchFeatureGrid(arr, geo)


def tiny_config(**overrides):
    """Small configuration for fast unit runs (8x8 grids on 32x32 images)"""
    data = {
        "encoder": {"backend": "synthetic", "resize": 32, "crop": 32, "patch_size": 4, "layer_dim": 4, "layers": 4},
        "bank": {"size": 64, "topk": 2},
        "snmm": {"dim": 8, "state_dim": 4},
        "train": {"steps": 4, "batch_size": 2, "cycle_length": 2, "jitter_lambda": 1.0, "log_every": 1},
        "performance": {"num_workers": 1},
    }
    for section, values in overrides.items():
        data.setdefault(section, {}).update(values)
    return config_from_dict(data)
