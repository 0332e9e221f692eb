"""
Tests for dataset ingestion and the synthetic texture generator
"""

import math
import time

import cv2
import numpy as np
import pytest

from snarm.core.dataset import load_entry, load_manifest
from snarm.core.exceptions import DataError
from snarm.core.synthetic_dataset import generate_synthetic_dataset
from snarm.schemas.config import EncoderConfig
from snarm.schemas.dataset import SyntheticDatasetSpec


def _spec(**kw):
    data = dict(image_size=32, categories=2, train_per_category=3, test_good_per_category=2, test_defect_per_category=3)
    data.update(kw)
    return SyntheticDatasetSpec(**data)


def _write(path, size=8, value=128):
    path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), np.full((size, size, 3), value, dtype=np.uint8))


# synthetic generator


def test_synthetic_dataset_layout(tmp_path):
    manifest = generate_synthetic_dataset(_spec(), tmp_path, seed=3)
    assert manifest.categories == ["speckled_01", "striped_00"]
    counts = manifest.counts()
    for category in manifest.categories:
        assert counts[category] == {"train": 3, "test_good": 2, "test_defect": 3}
    assert (tmp_path / "striped_00" / "train" / "good" / "000.png").is_file()
    assert (tmp_path / "striped_00" / "ground_truth" / "ellipse" / "000_mask.png").is_file()


def test_synthetic_dataset_is_byte_identical_for_a_seed(tmp_path):
    generate_synthetic_dataset(_spec(), tmp_path / "a", seed=7)
    generate_synthetic_dataset(_spec(), tmp_path / "b", seed=7)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*.png"))
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_synthetic_dataset_depends_on_seed(tmp_path):
    generate_synthetic_dataset(_spec(categories=1), tmp_path / "a", seed=1)
    generate_synthetic_dataset(_spec(categories=1), tmp_path / "b", seed=2)
    rel = "striped_00/train/good/000.png"
    assert (tmp_path / "a" / rel).read_bytes() != (tmp_path / "b" / rel).read_bytes()


def test_default_synthetic_dataset_generates_quickly(tmp_path):
    start = time.perf_counter()
    manifest = generate_synthetic_dataset(SyntheticDatasetSpec(), tmp_path, seed=0)
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    assert sum(sum(c.values()) for c in manifest.counts().values()) == 2 * (40 + 10 + 10)


def test_synthetic_masks_respect_area_bounds(tmp_path):
    spec = _spec(test_defect_per_category=6, defect_shapes=["ellipse", "rectangle", "scratch"])
    manifest = generate_synthetic_dataset(spec, tmp_path, seed=0)
    total = spec.image_size**2
    low, high = math.ceil(spec.defect_area[0] * total), math.floor(spec.defect_area[1] * total)
    defects = manifest.select("test", label=1)
    assert {e.defect for e in defects} == {"ellipse", "rectangle", "scratch"}
    for entry in defects:
        mask = cv2.imread(str(entry.mask_path), cv2.IMREAD_GRAYSCALE)
        assert low <= int((mask > 0).sum()) <= high


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(defect_area=(0.2, 0.1))
    assert SyntheticDatasetSpec(categories=4).category_names() == ["striped_00", "speckled_01", "blobbed_02", "striped_03"]


# manifest


def test_manifest_without_test_split(tmp_path):
    _write(tmp_path / "wood" / "train" / "good" / "000.png")
    _write(tmp_path / "wood" / "train" / "good" / "001.png")
    manifest = load_manifest(tmp_path)
    assert manifest.categories == ["wood"]
    assert manifest.counts() == {"wood": {"train": 2, "test_good": 0, "test_defect": 0}}


def test_manifest_rejects_loose_images(tmp_path):
    _write(tmp_path / "wood" / "train" / "good" / "000.png")
    _write(tmp_path / "wood" / "test" / "stray.png")
    with pytest.raises(DataError):
        load_manifest(tmp_path)


def test_manifest_rejects_anomalous_training_class(tmp_path):
    _write(tmp_path / "wood" / "train" / "crack" / "000.png")
    with pytest.raises(DataError):
        load_manifest(tmp_path)


def test_manifest_flags_missing_mask(tmp_path):
    _write(tmp_path / "wood" / "train" / "good" / "000.png")
    _write(tmp_path / "wood" / "test" / "crack" / "000.png")
    _write(tmp_path / "wood" / "test" / "crack" / "001.png")
    _write(tmp_path / "wood" / "ground_truth" / "crack" / "000_mask.png", value=255)

    defects = load_manifest(tmp_path).select("test", label=1)
    assert [e.mask_missing for e in defects] == [False, True]
    assert defects[0].defect == "crack"
    assert defects[0].image_id == "wood/test/crack/000"


def test_manifest_category_selection(tmp_path):
    for category in ("tile", "wood"):
        _write(tmp_path / category / "train" / "good" / "000.png")
    assert load_manifest(tmp_path, ["wood"]).categories == ["wood"]
    with pytest.raises(DataError):
        load_manifest(tmp_path, ["leather"])
    with pytest.raises(DataError):
        load_manifest(tmp_path / "nowhere")


def test_load_entry_brings_mask_to_crop_size(tmp_path):
    _write(tmp_path / "wood" / "train" / "good" / "000.png", size=40)
    _write(tmp_path / "wood" / "test" / "crack" / "000.png", size=40)
    mask = np.zeros((40, 40), dtype=np.uint8)
    mask[10:20, 10:20] = 255
    (tmp_path / "wood" / "ground_truth" / "crack").mkdir(parents=True)
    cv2.imwrite(str(tmp_path / "wood" / "ground_truth" / "crack" / "000_mask.png"), mask)

    entry = load_manifest(tmp_path).select("test")[0]
    image, out = load_entry(entry, EncoderConfig(resize=40, crop=32, patch_size=4))
    assert image.source_id == "wood/test/crack/000"
    assert out.shape == (32, 32)
    assert set(np.unique(out)) == {0, 1}


def test_load_entry_normal_image_has_empty_mask(tmp_path):
    _write(tmp_path / "wood" / "train" / "good" / "000.png", size=16)
    entry = load_manifest(tmp_path).select("train")[0]
    _, mask = load_entry(entry, EncoderConfig(resize=16, crop=16, patch_size=4))
    assert not mask.any()
