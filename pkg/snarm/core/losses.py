"""
Training losses and feature jittering
"""

from typing import Optional, Tuple

import torch
import torch.nn.functional as F

from ..schemas.config import TrainConfig
from .exceptions import DataError

EPS = 1e-7


def focal_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    """
    Binary focal loss summed over pixels

    -sum[a (1-M)^g Y log M + (1-a) M^g (1-Y) log(1-M)]

    Args:
        pred: Probabilities, ... x H x W
        target: Binary map of the same shape
        alpha: Weight of the positive class
        gamma: Focusing parameter

    Returns:
        Scalar; leading (batch) dimensions are averaged
    """
    if pred.shape != target.shape:
        raise DataError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    m = pred.clamp(EPS, 1.0 - EPS)
    y = target.to(m.dtype)
    pos = alpha * (1.0 - m).pow(gamma) * y * torch.log(m)
    neg = (1.0 - alpha) * m.pow(gamma) * (1.0 - y) * torch.log(1.0 - m)
    per_map = -(pos + neg).sum(dim=(-2, -1))
    return per_map.mean() if per_map.dim() else per_map


def upsample_to(q: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Bilinear Up(.) of B x h x w grids to B x H x W"""
    if tuple(q.shape[-2:]) == tuple(size):
        return q
    return F.interpolate(q.unsqueeze(1), size=tuple(size), mode="bilinear", align_corners=False).squeeze(1)


def total_loss(
    nav_q: torch.Tensor,
    branch_maps: torch.Tensor,
    target: torch.Tensor,
    cfg: TrainConfig,
    active_branch: Optional[int],
) -> torch.Tensor:
    """
    Navigator focal loss plus the branch term

    Args:
        nav_q: Waypoint classifier output q, B x h x w
        branch_maps: B x 4 x 4 x H x W view maps [scale][direction]
        target: B x H x W binary ground truth
        cfg: Train section (alphas and gammas)
        active_branch: Scale index whose four directional maps enter the loss;
            None averages all sixteen maps (non-cyclic training)

    Returns:
        Scalar loss
    """
    num_scales = branch_maps.shape[1]
    if active_branch is not None and not 0 <= active_branch < num_scales:
        raise DataError(f"active branch {active_branch} outside [0, {num_scales})")

    nav = focal_loss(upsample_to(nav_q, target.shape[-2:]), target, cfg.alpha_nav, cfg.gamma_nav)

    maps = branch_maps if active_branch is None else branch_maps[:, active_branch : active_branch + 1]
    maps = maps.flatten(1, 2)
    expanded = target.unsqueeze(1).expand_as(maps)
    # leading dims are averaged: batch and the selected maps
    branch = focal_loss(maps, expanded, cfg.alpha_branch, cfg.gamma_branch)
    return nav + branch


def consistent_jitter(
    features: torch.Tensor, residuals: torch.Tensor, lam: float, noise: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Perturb a descriptor and its residual with the same noise

    f~ = f + lam * (||f|| / d) * eps and r~ = r + lam * (||r|| / d) * eps, with
    norms taken along the last axis.
    """
    if lam < 0:
        raise DataError(f"jitter lambda must be >= 0, got {lam}")
    if features.shape != residuals.shape or features.shape != noise.shape:
        raise DataError("features, residuals and noise must share one shape")
    d = features.shape[-1]
    f_scale = features.norm(dim=-1, keepdim=True) / d
    r_scale = residuals.norm(dim=-1, keepdim=True) / d
    return features + lam * f_scale * noise, residuals + lam * r_scale * noise
