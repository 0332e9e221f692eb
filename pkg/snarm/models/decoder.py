"""
Multi-View Decoder

Four dilation rates times four scan directions give sixteen view branches.
Each branch is an atrous block (dilated 3x3 conv + GELU) followed by a 1x1
head; logits are upsampled to the image size before the sigmoid. At
inference the sixteen maps are averaged.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..core.exceptions import ConfigError, DataError
from ..schemas.config import DILATION_RATES
from .snmm import DIRECTIONS, DirectionalOutputs


NUM_VIEWS = len(DILATION_RATES) * len(DIRECTIONS)


class ViewBranch(nn.Module):
    """One (dilation rate, direction) prediction branch"""

    def __init__(self, dim: int, rate: int):
        super().__init__()
        if rate not in DILATION_RATES:
            raise ConfigError(f"dilation rate must be one of {DILATION_RATES}, got {rate}")
        self.rate = rate
        self.atrous = nn.Conv2d(dim, dim, kernel_size=3, padding=rate, dilation=rate)
        self.head = nn.Conv2d(dim, 1, kernel_size=1)

    def forward(self, features: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        return head_apply(F.gelu(atrous_apply(features, self)), self, size)


def atrous_apply(features: torch.Tensor, branch: ViewBranch) -> torch.Tensor:
    """Dilated 3x3 convolution with zero padding that keeps h x w"""
    return branch.atrous(features)


def head_apply(features: torch.Tensor, branch: ViewBranch, size: Tuple[int, int]) -> torch.Tensor:
    """
    sigmoid(Up(Conv1x1(features)))

    Args:
        features: B x d x h x w
        branch: Branch owning the head
        size: Target (H, W), at least the grid size

    Returns:
        B x H x W map in (0, 1)
    """
    h, w = features.shape[-2:]
    if size[0] < h or size[1] < w:
        raise DataError(f"target size {size} is smaller than the grid {h}x{w}")
    logits = F.interpolate(branch.head(features), size=tuple(size), mode="bilinear", align_corners=False)
    return torch.sigmoid(logits).squeeze(1)


class MultiViewDecoder(nn.Module):
    """
    Sixteen independent view branches indexed [scale][direction]

    With multiview=False a single branch at the first rate decodes the mean
    of the four directional outputs.
    """

    def __init__(self, dim: int, rates: Sequence[int] = DILATION_RATES, multiview: bool = True):
        super().__init__()
        self.multiview = multiview
        self.rates = tuple(rates) if multiview else (rates[0],)
        views = len(DIRECTIONS) if multiview else 1
        self.branches = nn.ModuleList(
            nn.ModuleList(ViewBranch(dim, rate) for _ in range(views)) for rate in self.rates
        )

    def scale_parameters(self, scale: int):
        return self.branches[scale].parameters()

    def forward(
        self,
        outputs: DirectionalOutputs,
        size: Tuple[int, int],
        scales: Optional[Sequence[int]] = None,
    ) -> torch.Tensor:
        """
        Args:
            outputs: Directional SNMM outputs
            size: Image size (H, W)
            scales: Scale branches to evaluate (all by default)

        Returns:
            B x len(scales) x 4 x H x W maps (B x 1 x 1 x H x W single-view)
        """
        if not self.multiview:
            return self.branches[0][0](outputs.mean(), size)[:, None, None]
        scales = range(len(self.rates)) if scales is None else scales
        maps = []
        for i in scales:
            maps.append(torch.stack([branch(o, size) for branch, o in zip(self.branches[i], outputs)], dim=1))
        return torch.stack(maps, dim=1)


def ensemble(maps: torch.Tensor) -> torch.Tensor:
    """
    Mean of the sixteen view maps

    Args:
        maps: B x 4 x 4 x H x W (or B x 16 x H x W)

    Returns:
        B x H x W
    """
    flat = maps.reshape(maps.shape[0], -1, *maps.shape[-2:])
    if flat.shape[1] != NUM_VIEWS:
        raise DataError(f"ensemble expects {NUM_VIEWS} maps, got {flat.shape[1]}")
    return flat.mean(dim=1)


def image_score(values: np.ndarray, reduction: str = "top_q_mean", q: float = 0.001) -> float:
    """
    Image-level score of an anomaly map

    top_q_mean averages the ceil(q * N) largest pixels (at least one).
    """
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise DataError("image_score needs a non-empty map")
    if reduction == "max":
        return float(flat.max())
    if reduction != "top_q_mean":
        raise ConfigError(f"unknown image score reduction {reduction!r}")
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"top_q must be in (0, 1], got {q}")
    n = max(1, math.ceil(q * flat.size))
    return float(np.sort(flat)[-n:].mean())


@dataclass
class AnomalyMap:
    """Final per-pixel anomaly map and its image score"""

    values: np.ndarray
    image_score: float

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataError(f"anomaly map must be H x W, got {self.values.shape}")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise DataError("anomaly map values must lie in [0, 1]")

    @classmethod
    def from_values(cls, values: np.ndarray, reduction: str = "top_q_mean", q: float = 0.001) -> "AnomalyMap":
        return cls(values, image_score(values, reduction, q))

    def to_png16(self) -> np.ndarray:
        return np.round(self.values * 65535.0).astype(np.uint16)


def final_map(maps: torch.Tensor) -> torch.Tensor:
    """Ensemble of the sixteen views, or the only view of a single-view decoder"""
    flat = maps.reshape(maps.shape[0], -1, *maps.shape[-2:])
    if flat.shape[1] == 1:
        return flat[:, 0]
    return ensemble(maps)
