"""
Trainable networks
"""

from .decoder import AnomalyMap, MultiViewDecoder, ViewBranch, atrous_apply, ensemble, final_map, head_apply, image_score
from .navigator import ResidualNavigator
from .network import NetworkOutput, SNARMNetwork
from .snmm import DirectionalOutputs, SelectiveSSM, SelfNavigatedMambaModule, SMBlock, TokenGrid, navigate_tokens, selective_scan

__all__ = [
    "AnomalyMap",
    "DirectionalOutputs",
    "MultiViewDecoder",
    "NetworkOutput",
    "ResidualNavigator",
    "SNARMNetwork",
    "SMBlock",
    "SelectiveSSM",
    "SelfNavigatedMambaModule",
    "TokenGrid",
    "ViewBranch",
    "atrous_apply",
    "ensemble",
    "final_map",
    "head_apply",
    "image_score",
    "navigate_tokens",
    "selective_scan",
]
