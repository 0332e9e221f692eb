"""
Pydantic schemas for dataset manifests and the synthetic dataset generator
"""

from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

TEXTURES = ("striped", "speckled", "blobbed")
DEFECT_SHAPES = ("ellipse", "rectangle", "scratch")


class SyntheticDatasetSpec(BaseModel):
    """Parameters of the procedural texture dataset"""

    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(default=64, ge=16)
    categories: int = Field(default=2, ge=1)
    textures: List[Literal["striped", "speckled", "blobbed"]] = Field(
        default_factory=lambda: list(TEXTURES)
    )
    defect_shapes: List[Literal["ellipse", "rectangle", "scratch"]] = Field(
        default_factory=lambda: ["ellipse", "rectangle"]
    )
    train_per_category: int = Field(default=40, ge=1)
    test_good_per_category: int = Field(default=10, ge=0)
    test_defect_per_category: int = Field(default=10, ge=0)
    defect_area: Tuple[float, float] = (0.02, 0.10)

    @model_validator(mode="after")
    def _check_area(self):
        low, high = self.defect_area
        if not 0.0 < low <= high < 1.0:
            raise ValueError("defect_area must satisfy 0 < low <= high < 1")
        return self

    def category_names(self) -> List[str]:
        return [f"{self.textures[i % len(self.textures)]}_{i:02d}" for i in range(self.categories)]


class ImageEntry(BaseModel):
    """One image of the manifest"""

    path: Path
    category: str
    split: Literal["train", "test"]
    label: int = Field(..., ge=0, le=1)
    defect: str = "good"
    mask_path: Optional[Path] = None
    mask_missing: bool = False

    @property
    def image_id(self) -> str:
        return f"{self.category}/{self.split}/{self.defect}/{self.path.stem}"


class DatasetManifest(BaseModel):
    """Validated listing of an MVTec-style dataset"""

    root: Path
    categories: List[str]
    entries: List[ImageEntry] = Field(default_factory=list)

    def select(
        self,
        split: Optional[str] = None,
        categories: Optional[List[str]] = None,
        label: Optional[int] = None,
    ) -> List[ImageEntry]:
        """
        Filter entries, keeping manifest order

        Args:
            split: "train" or "test"
            categories: Category names to keep
            label: 0 for normal, 1 for anomalous

        Returns:
            Matching entries
        """
        wanted = set(categories) if categories is not None else None
        return [
            e
            for e in self.entries
            if (split is None or e.split == split)
            and (wanted is None or e.category in wanted)
            and (label is None or e.label == label)
        ]

    def counts(self) -> Dict[str, Dict[str, int]]:
        summary: Dict[str, Dict[str, int]] = {}
        for e in self.entries:
            per_cat = summary.setdefault(e.category, {"train": 0, "test_good": 0, "test_defect": 0})
            if e.split == "train":
                per_cat["train"] += 1
            elif e.label == 0:
                per_cat["test_good"] += 1
            else:
                per_cat["test_defect"] += 1
        return summary
