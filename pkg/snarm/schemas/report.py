"""
Pydantic schemas for evaluation reports and inference outputs
"""

from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class MetricReport(BaseModel):
    """The four threshold-independent metrics plus their mean"""

    model_config = ConfigDict(populate_by_name=True)

    I_AUROC: float = Field(..., ge=0.0, le=1.0)
    P_AUROC: Optional[float] = Field(None, ge=0.0, le=1.0)
    P_AP: Optional[float] = Field(None, ge=0.0, le=1.0)
    PRO: Optional[float] = Field(None, ge=0.0, le=1.0)
    mAD: float = Field(..., ge=0.0, le=1.0, description="Mean of the available metrics")


class EvaluationReport(MetricReport):
    """Flat report written to report.json"""

    per_category: Dict[str, MetricReport] = Field(default_factory=dict)
    num_images: int = 0
    regime: Optional[str] = None
    runs: List[str] = Field(default_factory=list)


class ImageScoreRow(BaseModel):
    """One row of the scores.csv sidecar"""

    image_id: str
    image_score: float = Field(..., ge=0.0, le=1.0)


class PredictionGeometry(BaseModel):
    """Preprocessing that produced a predictions directory (preprocess.json)"""

    resize: int = Field(..., gt=0)
    crop: int = Field(..., gt=0)
