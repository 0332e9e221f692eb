"""
Full trainable network: navigator, intra-matching, SNMM and decoder
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from ..core.matching import intra_residuals, trusted_indices
from ..schemas.config import RunConfig
from .decoder import MultiViewDecoder
from .navigator import ResidualNavigator
from .snmm import SelfNavigatedMambaModule


@dataclass
class NetworkOutput:
    q: torch.Tensor
    q_star: torch.Tensor
    maps: torch.Tensor
    trusted: Optional[torch.Tensor] = None


class SNARMNetwork(nn.Module):
    """
    Residual Navigator -> hybrid residuals -> SNMM -> Multi-View Decoder

    Intra-matching has no parameters and runs on detached float64 copies of
    the features, so gradients flow through the navigator, SNMM and decoder
    only.
    """

    def __init__(
        self,
        feature_dim: int,
        dim: int = 256,
        state_dim: int = 16,
        blocks: int = 2,
        percentile: float = 75.0,
        intra_topk: int = 1,
        theta: int = 2,
        keep_ratio: float = 1.0,
        use_hybrid: bool = True,
        multiview: bool = True,
    ):
        super().__init__()
        self.feature_dim = feature_dim
        self.percentile = percentile
        self.intra_topk = intra_topk
        self.theta = theta
        self.keep_ratio = keep_ratio
        self.use_hybrid = use_hybrid

        in_dim = 2 * feature_dim if use_hybrid else feature_dim
        self.navigator = ResidualNavigator(feature_dim)
        self.snmm = SelfNavigatedMambaModule(in_dim, dim, state_dim, blocks)
        self.decoder = MultiViewDecoder(dim, multiview=multiview)

    @classmethod
    def from_config(cls, cfg: RunConfig, feature_dim: int) -> "SNARMNetwork":
        return cls(
            feature_dim,
            dim=cfg.snmm.dim,
            state_dim=cfg.snmm.state_dim,
            blocks=cfg.snmm.blocks,
            percentile=cfg.navigator.percentile,
            intra_topk=cfg.intra_topk,
            theta=cfg.bank.theta,
            keep_ratio=cfg.keep_ratio,
            use_hybrid=cfg.ablation.hybrid,
            multiview=cfg.ablation.multiview,
        )

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def intra(self, features: torch.Tensor, q_star: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Intra-residuals against each image's trusted patches

        Args:
            features: B x h x w x d_f
            q_star: B x h x w Waypoint Map

        Returns:
            (intra residuals B x h x w x d_f, trusted mask B x h x w)
        """
        b, h, w, d = features.shape
        feats = features.detach().cpu().double().numpy().reshape(b, h * w, d)
        scores = q_star.detach().cpu().double().numpy().reshape(b, h * w)
        residuals = np.empty_like(feats)
        trusted = np.zeros((b, h * w), dtype=bool)
        for i in range(b):
            idx = trusted_indices(scores[i], self.percentile)
            trusted[i, idx] = True
            residuals[i] = intra_residuals(feats[i], feats[i, idx], self.theta, self.intra_topk)
        out = torch.as_tensor(residuals.reshape(b, h, w, d), dtype=features.dtype, device=features.device)
        return out, torch.as_tensor(trusted.reshape(b, h, w), device=features.device)

    def forward(
        self,
        features: torch.Tensor,
        inter: torch.Tensor,
        size: Tuple[int, int],
        scales: Optional[Sequence[int]] = None,
    ) -> NetworkOutput:
        """
        Args:
            features: Fused patch features, B x h x w x d_f
            inter: Inter-residuals, B x h x w x d_f
            size: Image size (H, W) of the output maps
            scales: Decoder scale branches to evaluate (all by default)
        """
        q, q_star = self.navigator(inter)
        trusted = None
        residuals = inter
        if self.use_hybrid:
            intra, trusted = self.intra(features, q_star)
            residuals = torch.cat([inter, intra], dim=-1)
        outputs = self.snmm(residuals, q_star, self.keep_ratio)
        maps = self.decoder(outputs, size, scales)
        return NetworkOutput(q, q_star, maps, trusted)
