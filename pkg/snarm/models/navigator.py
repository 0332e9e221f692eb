"""
Residual Navigator: unary anomaly classifier over inter-residuals
"""

from typing import Tuple

import numpy as np
import torch
from torch import nn

from ..core.matching import NavigatorParams


class ResidualNavigator(nn.Module):
    """
    1x1 convolution + sigmoid, plus the channel-mean residual branch

    Initialised to zeros so an untrained navigator emits q = 0.5 and the
    Waypoint Map is driven by the mean branch.
    """

    def __init__(self, feature_dim: int):
        super().__init__()
        self.feature_dim = feature_dim
        self.conv = nn.Conv2d(feature_dim, 1, kernel_size=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, residuals: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            residuals: Inter-residuals, B x h x w x d_f

        Returns:
            (q, q_star), each B x h x w
        """
        x = residuals.permute(0, 3, 1, 2)
        q = torch.sigmoid(self.conv(x)).squeeze(1)
        return q, q + residuals.mean(dim=-1)

    def params(self) -> NavigatorParams:
        """Snapshot as plain numpy parameters"""
        weight = self.conv.weight.detach().cpu().double().numpy().reshape(-1)
        return NavigatorParams(weight, float(self.conv.bias.detach().cpu()))

    @torch.no_grad()
    def load_params(self, params: NavigatorParams) -> None:
        weight = torch.as_tensor(np.asarray(params.conv_weight), dtype=self.conv.weight.dtype)
        self.conv.weight.copy_(weight.view_as(self.conv.weight))
        self.conv.bias.fill_(params.conv_bias)
