"""
Self-Navigated Mamba Module

Hybrid residuals are embedded into tokens, the Waypoint Map picks the tokens
worth scanning, and each Self-Navigated Mamba Block runs a selective scan in
four directions (right, left, down, up) after a 3x3 convolution. Tokens that
are not selected keep their convolution output.
"""

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import nn

DIRECTIONS = ("right", "left", "down", "up")

# softplus^-1(1.0): the step size starts at 1
_DELTA_BIAS_INIT = math.log(math.e - 1.0)


@dataclass
class TokenGrid:
    """Tokens B x d_m x h x w and the scan mask B x h x w"""

    tokens: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.tokens.dim() != 4:
            raise ValueError(f"tokens must be B x d x h x w, got {tuple(self.tokens.shape)}")
        b, _, h, w = self.tokens.shape
        if tuple(self.mask.shape) != (b, h, w):
            raise ValueError(f"mask shape {tuple(self.mask.shape)} does not match tokens")
        if not bool(self.mask.flatten(1).any(dim=1).all()):
            raise ValueError("every sample needs at least one selected token")


class DirectionalOutputs(NamedTuple):
    right: torch.Tensor
    left: torch.Tensor
    down: torch.Tensor
    up: torch.Tensor

    def mean(self) -> torch.Tensor:
        return torch.stack(tuple(self), dim=0).mean(dim=0)


def selective_scan(
    u: torch.Tensor,
    delta: torch.Tensor,
    A: torch.Tensor,
    B: torch.Tensor,
    C: torch.Tensor,
    D: torch.Tensor,
) -> torch.Tensor:
    """
    Sequential selective scan with zero-order-hold on A

        h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t
        y_t = C_t . h_t + D * x_t

    Args:
        u: (..., l, d) inputs
        delta: (..., l, d) positive step sizes
        A: (..., d, n) negative state matrix
        B: (..., l, n) input projections
        C: (..., l, n) output projections
        D: (..., d) skip weights

    Returns:
        (..., l, d) outputs; the dtype of u is preserved
    """
    if u.shape[-2] == 0:
        raise ValueError("selective_scan needs a non-empty sequence")
    delta_a = torch.exp(delta.unsqueeze(-1) * A.unsqueeze(-3))
    delta_b_u = delta.unsqueeze(-1) * B.unsqueeze(-2) * u.unsqueeze(-1)

    state = torch.zeros_like(delta_a[..., 0, :, :])
    ys = []
    for t in range(u.shape[-2]):
        state = delta_a[..., t, :, :] * state + delta_b_u[..., t, :, :]
        ys.append((state * C[..., t, None, :]).sum(dim=-1))
    y = torch.stack(ys, dim=-2)
    return y + u * D.unsqueeze(-2)


class SelectiveSSM(nn.Module):
    """
    S independent selective SSMs evaluated in one scan

    Each scan s owns its own A, step-size projection (to a scalar per token),
    B and C projections and D. Inputs are stacked as S x batch x l x d.
    """

    def __init__(self, dim: int, state_dim: int, num_scans: int = 1):
        super().__init__()
        self.dim = dim
        self.state_dim = state_dim
        self.num_scans = num_scans

        a = torch.arange(1, state_dim + 1, dtype=torch.float32).repeat(num_scans, dim, 1)
        self.A_log = nn.Parameter(torch.log(a))
        self.delta_weight = nn.Parameter(torch.empty(num_scans, dim))
        self.delta_bias = nn.Parameter(torch.full((num_scans,), _DELTA_BIAS_INIT))
        self.B_weight = nn.Parameter(torch.empty(num_scans, state_dim, dim))
        self.C_weight = nn.Parameter(torch.empty(num_scans, state_dim, dim))
        self.D = nn.Parameter(torch.ones(num_scans, dim))

        bound = 1.0 / math.sqrt(dim)
        for weight in (self.delta_weight, self.B_weight, self.C_weight):
            nn.init.uniform_(weight, -bound, bound)

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        """
        Args:
            u: S x batch x l x d

        Returns:
            S x batch x l x d
        """
        if u.shape[0] != self.num_scans:
            raise ValueError(f"expected {self.num_scans} stacked sequences, got {u.shape[0]}")
        delta_logit = torch.einsum("sbld,sd->sbl", u, self.delta_weight) + self.delta_bias[:, None, None]
        delta = F.softplus(delta_logit).unsqueeze(-1).expand_as(u)
        B = torch.einsum("sbld,snd->sbln", u, self.B_weight)
        C = torch.einsum("sbld,snd->sbln", u, self.C_weight)
        return selective_scan(u, delta, self.A[:, None], B, C, self.D[:, None])


def direction_orders(h: int, w: int, device: Optional[torch.device] = None) -> List[torch.Tensor]:
    """
    Flat row-major positions in scan order for right, left, down and up

    right is row-major, left reverses every row, down is column-major and up
    reverses every column.
    """
    idx = torch.arange(h * w, device=device).view(h, w)
    return [
        idx.flatten(),
        idx.flip(1).flatten(),
        idx.t().flatten(),
        idx.flip(0).t().flatten(),
    ]


def selected_count(num_tokens: int, keep_ratio: float) -> int:
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    return max(1, min(num_tokens, math.ceil(keep_ratio * num_tokens)))


def navigate_tokens(grid: TokenGrid, q_star: torch.Tensor, keep_ratio: float) -> TokenGrid:
    """
    Keep the ceil(keep_ratio * M) tokens with the highest Waypoint score

    Ties go to the lower row-major index.
    """
    b, _, h, w = grid.tokens.shape
    count = selected_count(h * w, keep_ratio)
    order = torch.sort(-q_star.detach().reshape(b, -1), dim=1, stable=True).indices[:, :count]
    mask = torch.zeros(b, h * w, dtype=torch.bool, device=grid.tokens.device)
    mask.scatter_(1, order, True)
    return TokenGrid(grid.tokens, mask.view(b, h, w))


def _reflect_pad(x: torch.Tensor) -> torch.Tensor:
    # a length-1 axis has nothing to reflect; replicate it instead
    x = F.pad(x, (1, 1, 0, 0), mode="reflect" if x.shape[-1] > 1 else "replicate")
    return F.pad(x, (0, 0, 1, 1), mode="reflect" if x.shape[-2] > 1 else "replicate")


class SMBlock(nn.Module):
    """Self-Navigated Mamba Block: per-direction 3x3 conv then selective scan"""

    def __init__(self, dim: int, state_dim: int):
        super().__init__()
        self.dim = dim
        self.convs = nn.ModuleList(nn.Conv2d(dim, dim, kernel_size=3) for _ in DIRECTIONS)
        self.ssm = SelectiveSSM(dim, state_dim, num_scans=len(DIRECTIONS))

    def forward(self, grid: TokenGrid) -> DirectionalOutputs:
        x = grid.tokens
        b, d, h, w = x.shape
        count = int(grid.mask[0].sum())
        flat_mask = grid.mask.reshape(b, -1)
        if not bool((flat_mask.sum(dim=1) == count).all()):
            raise ValueError("every sample must select the same number of tokens")

        padded = _reflect_pad(x)
        flats, sequences, positions = [], [], []
        for conv, order in zip(self.convs, direction_orders(h, w, x.device)):
            flat = conv(padded).flatten(2).transpose(1, 2)
            keep = flat_mask[:, order]
            pos = order.expand(b, -1)[keep].view(b, count)
            flats.append(flat)
            positions.append(pos)
            sequences.append(torch.gather(flat, 1, pos.unsqueeze(-1).expand(-1, -1, d)))

        scanned = self.ssm(torch.stack(sequences, dim=0))

        outputs = []
        for flat, pos, seq in zip(flats, positions, scanned):
            out = flat.scatter(1, pos.unsqueeze(-1).expand(-1, -1, d), seq)
            outputs.append(out.transpose(1, 2).reshape(b, d, h, w) + x)
        return DirectionalOutputs(*outputs)


class SelfNavigatedMambaModule(nn.Module):
    """
    Embedding layer followed by stacked SMBs

    The mean of one block's four directional outputs feeds the next block.
    """

    def __init__(self, in_dim: int, dim: int = 256, state_dim: int = 16, blocks: int = 2):
        super().__init__()
        self.in_dim = in_dim
        self.dim = dim
        self.embedding = nn.Linear(in_dim, dim)
        self.blocks = nn.ModuleList(SMBlock(dim, state_dim) for _ in range(blocks))

    def embed(self, residuals: torch.Tensor) -> TokenGrid:
        """
        Args:
            residuals: B x h x w x in_dim (hybrid residuals)

        Returns:
            TokenGrid with every token selected
        """
        tokens = self.embedding(residuals).permute(0, 3, 1, 2)
        b, _, h, w = tokens.shape
        return TokenGrid(tokens, torch.ones(b, h, w, dtype=torch.bool, device=tokens.device))

    def forward(self, residuals: torch.Tensor, q_star: torch.Tensor, keep_ratio: float = 1.0) -> DirectionalOutputs:
        grid = navigate_tokens(self.embed(residuals), q_star, keep_ratio)
        outputs = None
        for block in self.blocks:
            if outputs is not None:
                grid = TokenGrid(outputs.mean(), grid.mask)
            outputs = block(grid)
        return outputs
