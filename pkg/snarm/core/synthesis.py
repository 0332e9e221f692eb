"""
Pseudo-anomaly synthesis

Training data is anomaly-free, so the focal losses are supervised with
synthetic defects. The default works on feature grids: a random elliptical or
rectangular patch region is overwritten with donor patches from another
training image (or the image's own patches) plus scaled Gaussian noise. The
pixel mode pastes a jittered crop of the image onto itself before encoding.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import cv2
import numpy as np

from ..schemas.config import SynthesisConfig
from .encoder import Image, PatchFeatureGrid
from .exceptions import DataError

ASPECT_RANGE = (0.3, 3.3)
COLOR_JITTER = 0.05


@dataclass
class TrainSample:
    """Feature grid with its pixel-level label mask"""

    features: PatchFeatureGrid
    label_mask: np.ndarray
    is_synthetic: bool = False
    patch_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        geo = self.features.geometry
        if self.label_mask.shape != (geo.image_h, geo.image_w):
            raise DataError(f"label mask {self.label_mask.shape} does not match image {(geo.image_h, geo.image_w)}")
        if not np.isin(self.label_mask, (0, 1)).all():
            raise DataError("label mask must be binary")
        if not self.is_synthetic and self.label_mask.any():
            raise DataError("anomaly-free samples must have an all-zero label mask")

    @classmethod
    def normal(cls, features: PatchFeatureGrid) -> "TrainSample":
        geo = features.geometry
        return cls(features, np.zeros((geo.image_h, geo.image_w), dtype=np.uint8))


def area_bounds(num_cells: int, min_area: float, max_area: float) -> Tuple[int, int]:
    """Admissible region sizes in cells; never below one cell"""
    lo = max(1, math.ceil(min_area * num_cells))
    hi = max(lo, math.floor(max_area * num_cells))
    return lo, min(hi, num_cells)


def _rect_dims(target: float, aspect: float, h: int, w: int, lo: int, hi: int) -> Tuple[int, int]:
    rh = int(np.clip(round(math.sqrt(target * aspect)), 1, h))
    for ph in [rh] + [x for x in range(1, h + 1) if x != rh]:
        low = max(1, math.ceil(lo / ph))
        high = min(w, hi // ph)
        if low <= high:
            pw = int(np.clip(round(target / ph), low, high))
            return ph, pw
    return 1, 1


def random_region(
    h: int, w: int, rng: np.random.Generator, min_area: float, max_area: float, shape: Optional[str] = None
) -> np.ndarray:
    """
    Boolean h x w region whose area fraction lies in [min_area, max_area]

    Args:
        h, w: Grid size
        rng: Random generator
        min_area, max_area: Area bounds as fractions of h * w
        shape: "ellipse" or "rectangle"; drawn at random when None

    Returns:
        h x w boolean mask with at least one True cell
    """
    lo, hi = area_bounds(h * w, min_area, max_area)
    shape = shape or ("ellipse" if rng.random() < 0.5 else "rectangle")
    target = rng.uniform(lo, hi)
    aspect = rng.uniform(*ASPECT_RANGE)

    if shape == "ellipse":
        a = math.sqrt(target * aspect / math.pi)
        b = math.sqrt(target / (aspect * math.pi))
        canvas = np.zeros((h, w), dtype=np.uint8)
        center = (int(rng.integers(0, w)), int(rng.integers(0, h)))
        axes = (max(0, int(round(b))), max(0, int(round(a))))
        cv2.ellipse(canvas, center, axes, float(rng.uniform(0, 180)), 0, 360, 1, thickness=-1)
        region = canvas.astype(bool)
        if lo <= region.sum() <= hi:
            return region

    ph, pw = _rect_dims(target, aspect, h, w, lo, hi)
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    region = np.zeros((h, w), dtype=bool)
    region[top : top + ph, left : left + pw] = True
    return region


def synthesize_anomaly(
    normal: TrainSample,
    rng: np.random.Generator,
    cfg: SynthesisConfig,
    donors: Sequence[PatchFeatureGrid] = (),
) -> TrainSample:
    """
    Feature-level pseudo-anomaly

    Args:
        normal: Anomaly-free sample
        rng: Synthesis substream
        cfg: Synthesis section
        donors: Other training grids to borrow patches from

    Returns:
        Synthetic TrainSample; label_mask is the region mapped to pixels
    """
    if normal.label_mask.any():
        raise DataError("synthesis expects an anomaly-free sample")
    grid = normal.features
    region = random_region(grid.h, grid.w, rng, cfg.min_area, cfg.max_area)

    source = grid.grid.astype(np.float64)
    usable = [d for d in donors if d.grid.shape == grid.grid.shape]
    if usable and rng.random() < cfg.donor_prob:
        donor = usable[int(rng.integers(0, len(usable)))]
        shift = (int(rng.integers(0, grid.h)), int(rng.integers(0, grid.w)))
        source = np.roll(donor.grid.astype(np.float64), shift, axis=(0, 1))

    sigma = np.maximum(grid.grid.reshape(-1, grid.d).std(axis=0), 1e-2)
    noise = rng.standard_normal((int(region.sum()), grid.d)) * sigma * cfg.noise_scale

    out = grid.grid.astype(np.float64)
    out[region] = source[region] + noise
    features = PatchFeatureGrid(out.astype(np.float32), grid.geometry)
    return TrainSample(features, grid.geometry.to_pixel_mask(region), True, region)


def cut_paste(image: Image, rng: np.random.Generator, cfg: SynthesisConfig) -> Tuple[Image, np.ndarray]:
    """
    Pixel-level cut-paste: a jittered rectangle of the image is pasted elsewhere

    Returns:
        (augmented image, H x W uint8 mask of the pasted rectangle)
    """
    h, w = image.height, image.width
    lo, hi = area_bounds(h * w, cfg.min_area, cfg.max_area)
    ph, pw = _rect_dims(rng.uniform(lo, hi), rng.uniform(*ASPECT_RANGE), h, w, lo, hi)

    top, left = int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))
    patch = image.pixels[top : top + ph, left : left + pw].copy()
    patch = np.clip(patch + rng.standard_normal(patch.shape) * COLOR_JITTER, 0.0, 1.0)

    paste_top, paste_left = int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))
    pixels = image.pixels.copy()
    pixels[paste_top : paste_top + ph, paste_left : paste_left + pw] = patch

    mask = np.zeros((h, w), dtype=np.uint8)
    mask[paste_top : paste_top + ph, paste_left : paste_left + pw] = 1
    return Image(pixels, image.source_id), mask
