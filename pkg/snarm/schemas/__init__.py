"""Pydantic schemas for configuration, datasets and reports"""

from .config import RunConfig
from .dataset import DatasetManifest, ImageEntry, SyntheticDatasetSpec
from .report import EvaluationReport, ImageScoreRow, MetricReport

__all__ = [
    "RunConfig",
    "DatasetManifest",
    "ImageEntry",
    "SyntheticDatasetSpec",
    "EvaluationReport",
    "ImageScoreRow",
    "MetricReport",
]
