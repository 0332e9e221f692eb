"""
Cyclic training of the navigator, SNMM and Multi-View Decoder

One scale branch (its four directional heads) is active for K steps while
the other three stay frozen; the navigator is updated at every step. The
SNMM trains continuously unless train.snmm_continuous is false.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from ..models.network import SNARMNetwork
from ..schemas.config import DILATION_RATES, RunConfig
from .bank import PrototypeBank, compute_inter_grid, inter_residual, topk_batch
from .config import config_from_dict, config_hash
from .encoder import FeatureExtractor, Image, PatchFeatureGrid, preprocess_mask
from .exceptions import ConfigError, DataError, NumericError
from .losses import consistent_jitter, total_loss
from .seeding import derive_seed, substream
from .synthesis import TrainSample, cut_paste, synthesize_anomaly

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class TrainingSet:
    """Anomaly-free training grids with their categories (and images for pixel synthesis)"""

    grids: List[PatchFeatureGrid]
    categories: List[Optional[str]]
    images: Optional[List[Image]] = None

    def __post_init__(self):
        if not self.grids:
            raise DataError("training set is empty")
        if len(self.categories) != len(self.grids):
            raise DataError("one category per training grid is required")
        shape = self.grids[0].grid.shape
        for grid in self.grids:
            if grid.grid.shape != shape:
                raise DataError(f"training grids differ in shape: {grid.grid.shape} vs {shape}")
        if self.images is not None and len(self.images) != len(self.grids):
            raise DataError("one image per training grid is required")

    def __len__(self) -> int:
        return len(self.grids)

    @property
    def feature_dim(self) -> int:
        return self.grids[0].d


@dataclass
class TrainingHistory:
    loss: List[float] = field(default_factory=list)
    active_branch: List[int] = field(default_factory=list)

    def as_dict(self) -> Dict[str, List]:
        return asdict(self)


def active_scale(step: int, cycle_length: int, cyclic: bool = True) -> Optional[int]:
    """Scale branch trained at a step (rates 3, 6, 12, 24 in turn); None trains all"""
    if not cyclic:
        return None
    return (step // cycle_length) % len(DILATION_RATES)


def build_network(cfg: RunConfig, feature_dim: int) -> SNARMNetwork:
    """Network with parameters initialised from the "init" substream"""
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    return SNARMNetwork.from_config(cfg, feature_dim)


def bank_for(banks: Dict[Optional[str], PrototypeBank], category: Optional[str]) -> PrototypeBank:
    if None in banks:
        return banks[None]
    if category not in banks:
        raise DataError(f"no prototype bank for category {category!r}")
    return banks[category]


class Trainer:
    """
    Runs the training loop

    Args:
        network: Network to optimise in place
        cfg: Run configuration
        banks: Prototype bank(s), keyed by category or None for one global bank
        extractor: Needed only for pixel-level synthesis
    """

    def __init__(
        self,
        network: SNARMNetwork,
        cfg: RunConfig,
        banks: Dict[Optional[str], PrototypeBank],
        extractor: Optional[FeatureExtractor] = None,
    ):
        self.network = network
        self.cfg = cfg
        self.banks = banks
        self.extractor = extractor
        self.history = TrainingHistory()

        if cfg.synthesis.mode == "pixel" and extractor is None:
            raise ConfigError("pixel synthesis needs a feature extractor")
        if not cfg.train.snmm_continuous:
            self.network.snmm.requires_grad_(False)

        params = [p for p in network.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(params, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)

        self.batch_rng = substream(cfg.seed, "batches")
        self.synthesis_rng = substream(cfg.seed, "synthesis")
        self.jitter_rng = substream(cfg.seed, "jitter")

    # Data

    def _inter(self, grid: PatchFeatureGrid, category: Optional[str]) -> np.ndarray:
        bank = bank_for(self.banks, category)
        return compute_inter_grid(grid, bank, self.cfg.bank.theta, self.cfg.inter_topk).residuals

    def _synthetic(self, data: TrainingSet, index: int, clean_inter: np.ndarray) -> Tuple[TrainSample, np.ndarray]:
        category = data.categories[index]
        rng = self.synthesis_rng

        if self.cfg.synthesis.mode == "pixel":
            image, mask = cut_paste(data.images[index], rng, self.cfg.synthesis)
            grid = self.extractor.encode_one(image)
            enc = self.cfg.encoder
            sample = TrainSample(grid, preprocess_mask(mask, enc.resize, enc.crop), True)
            return sample, self._inter(grid, category)

        donors = [g for i, g in enumerate(data.grids) if i != index and data.categories[i] == category]
        sample = synthesize_anomaly(TrainSample.normal(data.grids[index]), rng, self.cfg.synthesis, donors)

        # only the perturbed patches change their inter-residual
        inter = clean_inter.copy()
        region = sample.patch_mask
        feats = sample.features.grid[region]
        refs = topk_batch(feats, bank_for(self.banks, category), self.cfg.inter_topk)
        inter[region] = inter_residual(feats, refs, self.cfg.bank.theta)
        return sample, inter

    def _batch(self, data: TrainingSet, clean: List[np.ndarray]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        tc = self.cfg.train
        size = min(tc.batch_size, len(data))
        indices = self.batch_rng.choice(len(data), size=size, replace=False)

        features, inters, labels = [], [], []
        for index in indices:
            if self.batch_rng.random() < self.cfg.synthesis.anomaly_prob:
                sample, inter = self._synthetic(data, int(index), clean[index])
            else:
                sample, inter = TrainSample.normal(data.grids[index]), clean[index]
            features.append(sample.features.grid)
            inters.append(inter)
            labels.append(sample.label_mask)

        f = torch.as_tensor(np.stack(features), dtype=torch.float32)
        r = torch.as_tensor(np.stack(inters), dtype=torch.float32)
        y = torch.as_tensor(np.stack(labels), dtype=torch.float32)

        lam = self.cfg.jitter_lambda
        if lam > 0:
            for i in range(f.shape[0]):
                if self.jitter_rng.random() < tc.jitter_prob:
                    noise = torch.as_tensor(self.jitter_rng.standard_normal(f.shape[1:]), dtype=torch.float32)
                    f[i], r[i] = consistent_jitter(f[i], r[i], lam, noise)
        return f, r, y

    # Loop

    def step(self, features: torch.Tensor, inter: torch.Tensor, labels: torch.Tensor, active: Optional[int]) -> float:
        """
        One optimisation step

        Only the active scale is decoded, so the other branches keep a None
        gradient and AdamW leaves them untouched.
        """
        num_scales = len(self.network.decoder.rates)
        if active is not None and not 0 <= active < num_scales:
            raise DataError(f"active branch {active} outside [0, {num_scales})")
        self.network.train()
        self.optimizer.zero_grad(set_to_none=True)
        scales = None if active is None else (active,)
        out = self.network(features, inter, tuple(labels.shape[-2:]), scales)
        # out.maps holds the active scale only
        loss = total_loss(out.q, out.maps, labels, self.cfg.train, None)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite training loss {loss.item()} (active branch {active})")
        loss.backward()
        self.optimizer.step()
        return float(loss.item())

    def fit(self, data: TrainingSet, steps: Optional[int] = None) -> TrainingHistory:
        """
        Train for train.steps steps (or the given number)

        Args:
            data: Anomaly-free training grids
            steps: Override of train.steps

        Returns:
            Loss and active branch per step
        """
        tc = self.cfg.train
        steps = tc.steps if steps is None else steps
        if data.feature_dim != self.network.feature_dim:
            raise DataError(f"feature dim {data.feature_dim} != network feature dim {self.network.feature_dim}")
        if self.cfg.synthesis.mode == "pixel" and data.images is None:
            raise ConfigError("pixel synthesis needs the training images")

        clean = [self._inter(g, c) for g, c in zip(data.grids, data.categories)]
        start = len(self.history.loss)
        logger.info(f"Training {self.network.num_parameters()} parameters for {steps} steps")

        for step in tqdm(range(start, start + steps), desc="Training", leave=False):
            active = active_scale(step, tc.cycle_length, self.cfg.cyclic)
            features, inter, labels = self._batch(data, clean)
            loss = self.step(features, inter, labels, active)
            self.history.loss.append(loss)
            self.history.active_branch.append(-1 if active is None else active)
            if (step + 1) % tc.log_every == 0:
                logger.info(f"step {step + 1}: loss={loss:.4f} active_branch={active}")
        return self.history

    def rng_state(self) -> Dict[str, Dict]:
        return {
            "batches": self.batch_rng.bit_generator.state,
            "synthesis": self.synthesis_rng.bit_generator.state,
            "jitter": self.jitter_rng.bit_generator.state,
        }


def cyclic_train(
    network: SNARMNetwork,
    data: TrainingSet,
    cfg: RunConfig,
    banks: Dict[Optional[str], PrototypeBank],
    extractor: Optional[FeatureExtractor] = None,
) -> Trainer:
    """Train a network in place and return the trainer (history, optimizer)"""
    trainer = Trainer(network, cfg, banks, extractor)
    trainer.fit(data)
    return trainer


# Checkpoints


def save_checkpoint(path: Union[str, Path], network: SNARMNetwork, cfg: RunConfig, trainer: Optional[Trainer] = None) -> None:
    """Single torch.save container with everything needed to resume or infer"""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg.model_dump(mode="json"),
        "config_hash": config_hash(cfg),
        "feature_dim": network.feature_dim,
        "state_dict": network.state_dict(),
        "optimizer": trainer.optimizer.state_dict() if trainer else None,
        "rng_state": trainer.rng_state() if trainer else None,
        "history": trainer.history.as_dict() if trainer else None,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    logger.info(f"Checkpoint saved to {path}")


def load_checkpoint(path: Union[str, Path], cfg: Optional[RunConfig] = None) -> Tuple[SNARMNetwork, RunConfig, Dict]:
    """
    Rebuild the network stored in a checkpoint

    Args:
        path: Checkpoint file
        cfg: When given, its model sections must hash to the stored value.
            The stored configuration itself is always re-hashed and checked.

    Returns:
        (network in eval mode, stored configuration, raw payload)
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unsupported checkpoint format {payload.get('format')}")
    if cfg is not None and config_hash(cfg) != payload["config_hash"]:
        raise ConfigError(f"{path}: config hash mismatch (checkpoint {payload['config_hash'][:12]}, config {config_hash(cfg)[:12]})")

    stored = config_from_dict(payload["config"])
    if config_hash(stored) != payload["config_hash"]:
        raise ConfigError(f"{path}: stored configuration does not match its hash {payload['config_hash'][:12]}")
    network = SNARMNetwork.from_config(stored, payload["feature_dim"])
    network.load_state_dict(payload["state_dict"])
    network.eval()
    return network, stored, payload

