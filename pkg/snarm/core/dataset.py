"""
MVTec-style dataset ingestion

Layout per category:
    <root>/<category>/train/good/*.png
    <root>/<category>/test/<good|defect>/*.png
    <root>/<category>/ground_truth/<defect>/<stem>_mask.png
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from ..schemas.config import EncoderConfig
from ..schemas.dataset import DatasetManifest, ImageEntry
from ..utils.helpers import is_valid_image_format, list_images
from .encoder import Image, load_image, load_mask, preprocess_mask
from .exceptions import DataError

logger = logging.getLogger(__name__)

GOOD = "good"


def _subdirs(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir() if p.is_dir() and not p.name.startswith("."))


def _reject_loose_images(directory: Path) -> None:
    for path in sorted(directory.iterdir()):
        if path.is_file() and is_valid_image_format(path.name):
            raise DataError(f"malformed dataset layout: image {path} must live in a class subdirectory")


def _find_mask(category_dir: Path, defect: str, stem: str) -> Optional[Path]:
    gt_dir = category_dir / "ground_truth" / defect
    for candidate in list_images(gt_dir):
        if candidate.stem in (f"{stem}_mask", stem):
            return candidate
    return None


def _category_entries(category_dir: Path) -> List[ImageEntry]:
    category = category_dir.name
    _reject_loose_images(category_dir)

    train_dir = category_dir / "train"
    if not train_dir.is_dir():
        raise DataError(f"malformed dataset layout: {train_dir} is missing")
    _reject_loose_images(train_dir)

    entries = []
    for sub in _subdirs(train_dir):
        if sub.name != GOOD:
            raise DataError(f"training split must be anomaly-free, found {sub}")
        entries.extend(ImageEntry(path=p, category=category, split="train", label=0) for p in list_images(sub))

    test_dir = category_dir / "test"
    if not test_dir.is_dir():
        return entries
    _reject_loose_images(test_dir)

    for sub in _subdirs(test_dir):
        for path in list_images(sub):
            if sub.name == GOOD:
                entries.append(ImageEntry(path=path, category=category, split="test", label=0))
                continue
            mask = _find_mask(category_dir, sub.name, path.stem)
            if mask is None:
                logger.warning(f"No ground-truth mask for {path}; flagged mask_missing")
            entries.append(
                ImageEntry(
                    path=path,
                    category=category,
                    split="test",
                    label=1,
                    defect=sub.name,
                    mask_path=mask,
                    mask_missing=mask is None,
                )
            )
    return entries


def load_manifest(root: Union[str, Path], categories: Optional[Sequence[str]] = None) -> DatasetManifest:
    """
    Scan a dataset directory

    Args:
        root: Dataset root
        categories: Restrict to these categories (all subdirectories when None)

    Returns:
        DatasetManifest in lexicographic order (category, split, class, file)
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")

    available = [p.name for p in _subdirs(root)]
    wanted = sorted(categories) if categories is not None else available
    missing = [c for c in wanted if c not in available]
    if missing:
        raise DataError(f"categories not found under {root}: {missing}")
    if not wanted:
        raise DataError(f"no categories under {root}")

    entries: List[ImageEntry] = []
    for category in wanted:
        entries.extend(_category_entries(root / category))

    manifest = DatasetManifest(root=root, categories=list(wanted), entries=entries)
    logger.info(f"Loaded dataset manifest from {root}: {manifest.counts()}")
    return manifest


def load_entry(entry: ImageEntry, cfg: EncoderConfig) -> Tuple[Image, np.ndarray]:
    """
    Image and its mask, the mask brought to the preprocessed (crop) resolution

    Normal images and images flagged mask_missing get an all-zero mask.
    """
    image = load_image(entry.path)
    if entry.mask_path is not None:
        mask = load_mask(entry.mask_path)
        if mask.shape != (image.height, image.width):
            raise DataError(f"mask {entry.mask_path} does not match image {entry.path}")
    else:
        mask = np.zeros((image.height, image.width), dtype=np.uint8)
    return Image(image.pixels, entry.image_id), preprocess_mask(mask, cfg.resize, cfg.crop)
