"""
Procedural texture dataset with planted defects

Each category is one texture family (striped, speckled or blobbed) with its
own palette. Test defects are ellipses, rectangles or scratches painted in a
contrasting colour; their masks are exact. Everything is derived from the
seed, so two runs produce byte-identical files.
"""

import logging
import math
from pathlib import Path
from typing import Dict, Tuple, Union

import cv2
import numpy as np

from ..schemas.dataset import DatasetManifest, SyntheticDatasetSpec
from ..utils.helpers import ensure_dir
from .dataset import load_manifest
from .seeding import substream

logger = logging.getLogger(__name__)

MAX_DEFECT_DRAWS = 100


def _category_style(rng: np.random.Generator) -> Dict[str, object]:
    """Palette and stripe geometry shared by every image of a category"""
    base = rng.uniform(0.25, 0.75, size=3)
    accent = np.clip(base + rng.choice([-1.0, 1.0], size=3) * rng.uniform(0.1, 0.2, size=3), 0.0, 1.0)
    return {"base": base, "accent": accent, "period": rng.uniform(6.0, 12.0), "angle": rng.uniform(0.0, math.pi)}


def _texture(kind: str, size: int, style: Dict[str, object], rng: np.random.Generator) -> np.ndarray:
    """size x size x 3 float texture in [0, 1]"""
    base, accent = style["base"], style["accent"]
    period, angle = style["period"], style["angle"]

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "striped":
        phase = rng.uniform(0.0, 2.0 * math.pi)
        coord = xx * math.cos(angle) + yy * math.sin(angle)
        weight = 0.5 + 0.5 * np.sin(2.0 * math.pi * coord / period + phase)
    elif kind == "speckled":
        weight = (rng.random((size, size)) < 0.15).astype(np.float64)
        weight = cv2.GaussianBlur(weight, (3, 3), 0.7)
    elif kind == "blobbed":
        noise = rng.standard_normal((size, size))
        smooth = cv2.GaussianBlur(noise, (0, 0), period / 3.0)
        weight = (smooth > 0).astype(np.float64)
        weight = cv2.GaussianBlur(weight, (3, 3), 0.8)
    else:
        raise ValueError(f"unknown texture {kind!r}")

    img = base[None, None, :] * (1.0 - weight[..., None]) + accent[None, None, :] * weight[..., None]
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _draw_shape(shape: str, size: int, target: float, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((size, size), dtype=np.uint8)
    cx, cy = int(rng.integers(size // 8, size - size // 8)), int(rng.integers(size // 8, size - size // 8))
    aspect = rng.uniform(0.5, 2.0)
    if shape == "ellipse":
        a = math.sqrt(target * aspect / math.pi)
        b = math.sqrt(target / (aspect * math.pi))
        cv2.ellipse(mask, (cx, cy), (max(1, round(a)), max(1, round(b))), float(rng.uniform(0, 180)), 0, 360, 1, -1)
    elif shape == "rectangle":
        w = max(1, round(math.sqrt(target * aspect)))
        h = max(1, round(target / w))
        cv2.rectangle(mask, (cx - w // 2, cy - h // 2), (cx - w // 2 + w - 1, cy - h // 2 + h - 1), 1, -1)
    elif shape == "scratch":
        thickness = int(rng.integers(2, 4))
        length = target / thickness
        theta = rng.uniform(0.0, math.pi)
        dx, dy = 0.5 * length * math.cos(theta), 0.5 * length * math.sin(theta)
        cv2.line(mask, (round(cx - dx), round(cy - dy)), (round(cx + dx), round(cy + dy)), 1, thickness)
    else:
        raise ValueError(f"unknown defect shape {shape!r}")
    return mask


def _defect_mask(shape: str, size: int, area: Tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """Binary mask whose area fraction lies within the configured bounds"""
    total = size * size
    low, high = math.ceil(area[0] * total), math.floor(area[1] * total)
    for _ in range(MAX_DEFECT_DRAWS):
        mask = _draw_shape(shape, size, rng.uniform(low, high), rng)
        if low <= int(mask.sum()) <= high:
            return mask
    # deterministic fallback: a centred square of the lower-bound area
    side = math.ceil(math.sqrt(low))
    while side * side > high and side > 1:
        side -= 1
    mask = np.zeros((size, size), dtype=np.uint8)
    top = (size - side) // 2
    mask[top : top + side, top : top + side] = 1
    return mask


def _paint_defect(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    colour = 1.0 - img[mask.astype(bool)].mean(axis=0)
    region = colour[None, :] + rng.normal(0.0, 0.05, size=(int(mask.sum()), 3))
    out = img.copy()
    out[mask.astype(bool)] = np.clip(region, 0.0, 1.0)
    return out


def _write_rgb(path: Path, img: np.ndarray) -> None:
    ensure_dir(path.parent)
    bgr = cv2.cvtColor(np.round(img * 255.0).astype(np.uint8), cv2.COLOR_RGB2BGR)
    cv2.imwrite(str(path), bgr)


def generate_synthetic_dataset(spec: SyntheticDatasetSpec, root: Union[str, Path], seed: int = 0) -> DatasetManifest:
    """
    Write the synthetic dataset in the canonical layout and load its manifest

    Args:
        spec: Generator parameters
        root: Output directory
        seed: Root seed; identical seeds give byte-identical datasets

    Returns:
        DatasetManifest of the written dataset
    """
    root = ensure_dir(root)
    size = spec.image_size
    names = spec.category_names()

    for c, category in enumerate(names):
        texture = spec.textures[c % len(spec.textures)]
        style = _category_style(substream(seed, "dataset", c))
        cat_dir = root / category

        for i in range(spec.train_per_category):
            rng = substream(seed, "dataset", c, 0, i)
            _write_rgb(cat_dir / "train" / "good" / f"{i:03d}.png", _texture(texture, size, style, rng))

        for i in range(spec.test_good_per_category):
            rng = substream(seed, "dataset", c, 1, i)
            _write_rgb(cat_dir / "test" / "good" / f"{i:03d}.png", _texture(texture, size, style, rng))

        for i in range(spec.test_defect_per_category):
            rng = substream(seed, "dataset", c, 2, i)
            shape = spec.defect_shapes[i % len(spec.defect_shapes)]
            img = _texture(texture, size, style, rng)
            mask = _defect_mask(shape, size, spec.defect_area, rng)
            _write_rgb(cat_dir / "test" / shape / f"{i:03d}.png", _paint_defect(img, mask, rng))
            mask_path = cat_dir / "ground_truth" / shape / f"{i:03d}_mask.png"
            ensure_dir(mask_path.parent)
            cv2.imwrite(str(mask_path), mask * 255)

        logger.info(f"Generated synthetic category {category} ({texture}) under {cat_dir}")

    return load_manifest(root, names)
