"""
Intra-matching guided by the Residual Navigator

The Waypoint Map scores every patch; the lowest-scoring p% of the test image
become trusted in-image references, every patch is re-matched against them,
and the resulting intra-residuals are concatenated with the inter-residuals.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import expit

from .bank import ResidualGrid, inter_residual, topk_indices
from .exceptions import ConfigError, DataError


@dataclass
class NavigatorParams:
    """1x1 convolution of the unary anomaly classifier"""

    conv_weight: np.ndarray
    conv_bias: float = 0.0

    def __post_init__(self):
        self.conv_weight = np.asarray(self.conv_weight, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.conv_weight)) or not math.isfinite(self.conv_bias):
            raise DataError("navigator parameters must be finite")

    @classmethod
    def zeros(cls, dim: int) -> "NavigatorParams":
        return cls(np.zeros(dim), 0.0)

    @property
    def dim(self) -> int:
        return self.conv_weight.shape[0]


@dataclass
class WaypointMap:
    """q = sigmoid branch, q_star = q + channel-mean residual"""

    q: np.ndarray
    q_star: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.q.shape


@dataclass
class TrustedSet:
    """Flat patch indices assumed normal, with their descriptors"""

    indices: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def waypoint(residuals: ResidualGrid, params: NavigatorParams) -> WaypointMap:
    """
    Waypoint Map from inter-residuals

    Args:
        residuals: Inter-residual grid (h x w x d_f)
        params: Navigator 1x1 convolution

    Returns:
        WaypointMap with q in (0, 1) and q_star = q + mean_k R(i, j, k)
    """
    if residuals.kind != "inter":
        raise DataError(f"waypoint expects inter residuals, got {residuals.kind}")
    return waypoint_from_array(residuals.residuals, params)


def waypoint_from_array(residuals: np.ndarray, params: NavigatorParams) -> WaypointMap:
    """Same as waypoint() on a raw h x w x d array (jittered residuals may be negative)"""
    if residuals.shape[-1] != params.dim:
        raise DataError(f"residual channels {residuals.shape[-1]} != navigator dim {params.dim}")
    r = residuals.astype(np.float64)
    q = expit(r @ params.conv_weight + params.conv_bias)
    return WaypointMap(q, q + r.mean(axis=-1))


def trusted_indices(q_star: np.ndarray, p: float) -> np.ndarray:
    """
    Flat indices whose score lies strictly below the nearest-rank p-th percentile

    Falls back to the ceil(p*M/100) lowest scores (stable order) when the
    strict rule leaves nothing, e.g. for a uniform map.
    """
    if not 0.0 < p < 100.0:
        raise ConfigError(f"percentile p must be in (0, 100), got {p}")
    scores = np.asarray(q_star, dtype=np.float64).reshape(-1)
    count = len(scores)
    rank = max(1, math.ceil(p / 100.0 * count))
    threshold = np.sort(scores, kind="stable")[rank - 1]
    chosen = np.flatnonzero(scores < threshold)
    if chosen.size == 0:
        chosen = np.sort(np.argsort(scores, kind="stable")[:rank])
    return chosen


def select_trusted(wm: WaypointMap, features: np.ndarray, p: float) -> TrustedSet:
    """
    Trusted in-image references

    Args:
        wm: Waypoint Map of the test image
        features: M x d_f descriptors in row-major patch order
        p: Percentile in (0, 100)

    Returns:
        TrustedSet (never empty)
    """
    features = np.asarray(features)
    if features.shape[0] != wm.q_star.size:
        raise DataError(f"{features.shape[0]} descriptors for a {wm.q_star.shape} waypoint map")
    idx = trusted_indices(wm.q_star, p)
    return TrustedSet(idx, features[idx])


def intra_residuals(features: np.ndarray, trusted: np.ndarray, theta: int, k: int = 1) -> np.ndarray:
    """
    Residual of each descriptor against its nearest (or top-k mean) trusted one

    Args:
        features: M x d_f descriptors
        trusted: S x d_f trusted descriptors (a patch may match itself)
        theta: Residual exponent
        k: Top-k averaging over the trusted set, clamped to its size

    Returns:
        M x d_f residuals
    """
    if len(trusted) == 0:
        raise DataError("intra-matching needs a non-empty trusted set")
    k = min(k, len(trusted))
    idx = topk_indices(features, trusted, k)
    refs = np.asarray(trusted, dtype=np.float64)[idx].mean(axis=1)
    return inter_residual(features, refs, theta)


def intra_residual_grid(
    features: np.ndarray, trusted: TrustedSet, theta: int, k: int, grid_shape: Tuple[int, int]
) -> ResidualGrid:
    """intra_residuals() reshaped into a ResidualGrid of kind "intra" """
    h, w = grid_shape
    if len(trusted) == 0:
        raise DataError("intra-matching needs a non-empty trusted set")
    res = intra_residuals(np.asarray(features), trusted.features, theta, k)
    return ResidualGrid(res.reshape(h, w, -1), theta, "intra")


def hybrid(inter: ResidualGrid, intra: ResidualGrid) -> ResidualGrid:
    """Channel concatenation [inter || intra]"""
    if inter.kind != "inter" or intra.kind != "intra":
        raise DataError(f"hybrid expects (inter, intra), got ({inter.kind}, {intra.kind})")
    if inter.shape != intra.shape:
        raise DataError(f"shape mismatch: {inter.shape} vs {intra.shape}")
    if inter.theta != intra.theta:
        raise DataError("inter and intra residuals use different theta")
    return ResidualGrid(np.concatenate([inter.residuals, intra.residuals], axis=-1), inter.theta, "hybrid")
