"""
Pydantic schemas for run configuration

One model per config.yaml section; RunConfig is the whole file.
"""

from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .dataset import SyntheticDatasetSpec

DEFAULT_LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DILATION_RATES = (3, 6, 12, 24)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EncoderConfig(_Section):
    """Backbone and feature fusion settings"""

    backend: str = Field(default="synthetic", description="Registered encoder backend name")
    layers: int = Field(default=8, ge=2, description="Number of intermediate layers (L)")
    resize: int = Field(default=448, gt=0)
    crop: int = Field(default=392, gt=0)
    patch_size: int = Field(default=14, gt=0)
    layer_dim: int = Field(default=32, gt=0, description="Per-layer channels of the synthetic backend")
    pooling: bool = Field(default=True, description="3x3 neighbourhood pooling after fusion")
    feature_size: Optional[Tuple[int, int]] = Field(
        default=None, description="Flatten(Up(F)) target; None keeps the fused grid size"
    )
    seed: int = Field(default=0, description="Seed of the synthetic backend projections")
    model_name: str = Field(default="dinov2_vitb14_reg", description="torch.hub model for the dinov2 backend")

    @field_validator("layers")
    @classmethod
    def _even_layers(cls, value: int) -> int:
        if value % 2:
            raise ValueError("encoder.layers must be even")
        return value

    @model_validator(mode="after")
    def _check_sizes(self):
        if self.resize < self.crop:
            raise ValueError("encoder.resize must be >= encoder.crop")
        if self.crop < self.patch_size:
            raise ValueError("encoder.crop must be >= encoder.patch_size")
        return self


class BankConfig(_Section):
    """Prototype bank (coreset) settings"""

    size: int = Field(default=10_000, ge=1, description="Number of prototypes T")
    coreset_mode: Literal["exact", "projected"] = "exact"
    projection_dim: int = Field(default=128, ge=1)
    topk: int = Field(default=3, ge=1, description="k of top-k reference averaging")
    theta: Literal[1, 2] = 2
    per_category: bool = False


class NavigatorConfig(_Section):
    """Residual Navigator and trusted-patch selection"""

    percentile: float = Field(default=75.0, gt=0.0, lt=100.0, description="p of the trusted set")
    intra_topk: int = Field(default=1, ge=1)


class SNMMConfig(_Section):
    """Self-Navigated Mamba Module"""

    dim: int = Field(default=256, ge=1)
    state_dim: int = Field(default=16, ge=1)
    blocks: int = 2
    keep_ratio: float = Field(default=1.0, gt=0.0, le=1.0)

    @field_validator("blocks")
    @classmethod
    def _two_blocks(cls, value: int) -> int:
        if value != 2:
            raise ValueError("snmm.blocks is fixed to 2")
        return value


class DecoderConfig(_Section):
    """Multi-View Decoder and image-score reduction"""

    rates: Tuple[int, int, int, int] = DILATION_RATES
    reduction: Literal["max", "top_q_mean"] = "top_q_mean"
    top_q: float = Field(default=0.001, gt=0.0, le=1.0)

    @field_validator("rates")
    @classmethod
    def _fixed_rates(cls, value):
        if tuple(value) != DILATION_RATES:
            raise ValueError(f"decoder.rates must be {DILATION_RATES}")
        return tuple(value)


class TrainConfig(_Section):
    """Losses, optimizer and cyclic schedule"""

    alpha_nav: float = Field(default=0.5, gt=0.0, lt=1.0)
    gamma_nav: float = Field(default=4.0, ge=0.0)
    alpha_branch: float = Field(default=0.25, gt=0.0, lt=1.0)
    gamma_branch: float = Field(default=4.0, ge=0.0)
    lr: float = Field(default=0.001, gt=0.0)
    weight_decay: float = Field(default=0.05, ge=0.0)
    cycle_length: int = Field(default=100, ge=1, description="K steps per active branch")
    jitter_lambda: float = Field(default=30.0, ge=0.0)
    jitter_prob: float = Field(default=1.0, ge=0.0, le=1.0)
    steps: int = Field(default=400, ge=1)
    batch_size: int = Field(default=8, ge=1)
    snmm_continuous: bool = True
    log_every: int = Field(default=50, ge=1)


class SynthesisConfig(_Section):
    """Pseudo-anomaly synthesis used to supervise the focal losses"""

    mode: Literal["feature", "pixel"] = "feature"
    anomaly_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    min_area: float = Field(default=0.01, gt=0.0, le=1.0)
    max_area: float = Field(default=0.20, gt=0.0, le=1.0)
    noise_scale: float = Field(default=1.0, ge=0.0)
    donor_prob: float = Field(default=0.5, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _area_order(self):
        if self.min_area > self.max_area:
            raise ValueError("synthesis.min_area must be <= synthesis.max_area")
        return self


class MetricsConfig(_Section):
    pro_fpr_limit: float = Field(default=0.3, gt=0.0, le=1.0)
    pro_connectivity: Literal[4, 8] = 8
    pro_max_thresholds: Optional[int] = Field(default=None, ge=2)


class DatasetConfig(_Section):
    """Where the data lives; a synthetic spec generates it when missing"""

    root: Path = Path("data/synthetic")
    categories: Optional[List[str]] = None
    synthetic: Optional[SyntheticDatasetSpec] = None


class RegimeConfig(_Section):
    regime: Literal["single", "multi", "cross", "fewshot"] = "multi"
    fewshot_k: int = Field(default=4, ge=1)
    seed: int = 0
    output_dir: Path = Path("runs")


class AblationConfig(_Section):
    """Component toggles for ablation runs"""

    hybrid: bool = True
    navigation: bool = True
    multiview: bool = Field(default=True, description="false decodes with one single-view head")
    topk: bool = True
    jitter: bool = True
    cyclic: bool = True


class LoggingConfig(_Section):
    level: str = "INFO"
    format: str = DEFAULT_LOG_FORMAT
    file: Optional[Path] = None


class PerformanceConfig(_Section):
    num_workers: int = Field(default=4, ge=1)


class RunConfig(_Section):
    """Complete configuration of one SNARM run"""

    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    bank: BankConfig = Field(default_factory=BankConfig)
    navigator: NavigatorConfig = Field(default_factory=NavigatorConfig)
    snmm: SNMMConfig = Field(default_factory=SNMMConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    run: RegimeConfig = Field(default_factory=RegimeConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)
    performance: PerformanceConfig = Field(default_factory=PerformanceConfig)

    @model_validator(mode="after")
    def _regime_fields(self):
        categories = self.dataset.categories
        if self.run.regime == "cross" and categories is not None and len(categories) < 2:
            raise ValueError("cross regime requires at least 2 categories")
        return self

    @property
    def regime(self) -> str:
        return self.run.regime

    @property
    def seed(self) -> int:
        return self.run.seed

    # Effective values after ablation toggles

    @property
    def inter_topk(self) -> int:
        return self.bank.topk if self.ablation.topk else 1

    @property
    def intra_topk(self) -> int:
        return self.navigator.intra_topk if self.ablation.topk else 1

    @property
    def keep_ratio(self) -> float:
        return self.snmm.keep_ratio if self.ablation.navigation else 1.0

    @property
    def jitter_lambda(self) -> float:
        return self.train.jitter_lambda if self.ablation.jitter else 0.0

    @property
    def cyclic(self) -> bool:
        # a single-view decoder has one branch to train
        return self.ablation.cyclic and self.ablation.multiview
