"""
Experiment pipeline: bank build -> train -> infer -> evaluate

Regimes:
    single   one model per category
    multi    one model for all categories
    cross    for each category, train on the others and test on it
    fewshot  like multi, with k normal images per category
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..models.network import SNARMNetwork
from ..schemas.config import RunConfig
from ..schemas.dataset import DatasetManifest, ImageEntry
from ..schemas.report import EvaluationReport
from ..utils.helpers import ensure_dir
from .bank import PrototypeBank, build_bank, save_banks
from .config import cache_dir, config_hash
from .dataset import load_entry, load_manifest
from .encoder import FeatureExtractor, Image, PatchFeatureGrid, create_backend, load_image
from .exceptions import ConfigError, DataError
from .inference import predict_grids, save_predictions
from .metrics import EvalRecord, evaluate
from .seeding import derive_seed
from .synthetic_dataset import generate_synthetic_dataset
from .trainer import Trainer, TrainingSet, build_network, save_checkpoint

logger = logging.getLogger(__name__)

MODEL_FILE = "model.pt"
REPORT_FILE = "report.json"


@dataclass
class RunPlan:
    """One train/test run of a regime"""

    key: str
    train_categories: List[str]
    test_categories: List[str]


@dataclass
class TrainedModel:
    network: SNARMNetwork
    banks: Dict[Optional[str], PrototypeBank]
    trainer: Optional[Trainer] = None


# Stages


def prepare_dataset(cfg: RunConfig) -> DatasetManifest:
    """Load the dataset, generating the synthetic one first when configured and absent"""
    root = Path(cfg.dataset.root)
    spec = cfg.dataset.synthetic
    if spec is not None and not root.is_dir():
        logger.info(f"Generating synthetic dataset under {root}")
        generate_synthetic_dataset(spec, root, cfg.seed)
    categories = cfg.dataset.categories
    if categories is None and spec is not None:
        categories = spec.category_names()
    return load_manifest(root, categories)


def create_extractor(cfg: RunConfig) -> FeatureExtractor:
    return FeatureExtractor(create_backend(cfg.encoder), cfg.encoder, cfg.performance.num_workers, cache_dir())


def load_images(entries: Sequence[ImageEntry]) -> List[Image]:
    return [Image(load_image(e.path).pixels, e.image_id) for e in entries]


def training_entries(manifest: DatasetManifest, categories: Sequence[str], fewshot_k: Optional[int] = None) -> List[ImageEntry]:
    """Normal training images; the first k per category in few-shot mode"""
    entries = []
    for category in categories:
        chosen = manifest.select("train", [category])
        if fewshot_k is not None:
            chosen = chosen[:fewshot_k]
        if not chosen:
            raise DataError(f"category {category} has no training images")
        entries.extend(chosen)
    return entries


def build_banks(cfg: RunConfig, grids: Sequence[PatchFeatureGrid], categories: Sequence[str]) -> Dict[Optional[str], PrototypeBank]:
    """One global bank, or one per category when bank.per_category is set"""
    seed = derive_seed(cfg.seed, "bank")
    bc = cfg.bank
    if not bc.per_category:
        return {None: build_bank(grids, bc.size, seed, bc.coreset_mode, bc.projection_dim)}
    banks = {}
    for category in sorted(set(categories)):
        subset = [g for g, c in zip(grids, categories) if c == category]
        banks[category] = build_bank(subset, bc.size, seed, bc.coreset_mode, bc.projection_dim)
    return banks


def train_model(
    cfg: RunConfig,
    extractor: FeatureExtractor,
    entries: Sequence[ImageEntry],
) -> TrainedModel:
    """Encode the training images, build the bank(s) and train the network"""
    images = load_images(entries)
    categories = [e.category for e in entries]
    grids = extractor.encode_many(images, desc="Encoding training images")
    banks = build_banks(cfg, grids, categories)

    network = build_network(cfg, grids[0].d)
    logger.info(f"Network has {network.num_parameters()} trainable parameters")
    trainer = Trainer(network, cfg, banks, extractor)
    keep_images = images if cfg.synthesis.mode == "pixel" else None
    trainer.fit(TrainingSet(grids, categories, keep_images))
    return TrainedModel(network, banks, trainer)


def evaluate_model(
    cfg: RunConfig,
    model: TrainedModel,
    extractor: FeatureExtractor,
    entries: Sequence[ImageEntry],
    pred_dir: Optional[Path] = None,
) -> List[EvalRecord]:
    """Score test entries and pair them with their ground truth"""
    loaded = [load_entry(e, cfg.encoder) for e in entries]
    grids = extractor.encode_many([image for image, _ in loaded], desc="Encoding test images")
    # a per-category bank is looked up by the image's category
    categories = [e.category if None not in model.banks else None for e in entries]
    maps = predict_grids(model.network, cfg, model.banks, grids, categories)
    if pred_dir is not None:
        save_predictions(maps, [e.image_id for e in entries], pred_dir, cfg.encoder)

    records = []
    for entry, (_, mask), amap in zip(entries, loaded, maps):
        if mask.shape != amap.values.shape:
            raise DataError(f"mask {mask.shape} and anomaly map {amap.values.shape} differ for {entry.image_id}")
        records.append(
            EvalRecord(amap.image_score, amap.values, entry.label, mask, entry.category, entry.mask_missing)
        )
    return records


# Regimes


def run_key(train_categories: Sequence[str], test_categories: Sequence[str]) -> str:
    train = "+".join(sorted(train_categories))
    if sorted(train_categories) == sorted(test_categories):
        return train
    return f"{train}_to_{'+'.join(sorted(test_categories))}"


def plan_runs(cfg: RunConfig, categories: Sequence[str]) -> List[RunPlan]:
    """Train/test splits of the configured regime"""
    categories = sorted(categories)
    regime = cfg.regime
    if regime == "single":
        pairs = [([c], [c]) for c in categories]
    elif regime in ("multi", "fewshot"):
        pairs = [(categories, categories)]
    elif regime == "cross":
        if len(categories) < 2:
            raise ConfigError("cross regime requires at least 2 categories")
        pairs = [([o for o in categories if o != c], [c]) for c in categories]
    else:
        raise ConfigError(f"unknown regime {regime!r}")
    return [RunPlan(run_key(train, test), list(train), list(test)) for train, test in pairs]


def validate_regime(cfg: RunConfig, manifest: DatasetManifest, plans: Sequence[RunPlan]) -> None:
    """Reject regime/data mismatches before any compute"""
    if cfg.regime == "cross" and cfg.bank.per_category:
        raise ConfigError("cross regime cannot use per-category banks (the test category has none)")
    counts = manifest.counts()
    for plan in plans:
        for category in plan.train_categories:
            train = counts.get(category, {}).get("train", 0)
            if train == 0:
                raise DataError(f"category {category} has no training images")
            if cfg.regime == "fewshot" and train < cfg.run.fewshot_k:
                raise DataError(f"category {category} has {train} training images, fewshot_k={cfg.run.fewshot_k}")
        tests = manifest.select("test", plan.test_categories)
        if not tests:
            raise DataError(f"run {plan.key} has no test images")
        if len({e.label for e in tests}) < 2:
            raise DataError(f"run {plan.key} needs both normal and anomalous test images")


def execute_plan(
    cfg: RunConfig,
    plan: RunPlan,
    manifest: DatasetManifest,
    extractor: FeatureExtractor,
    run_dir: Path,
) -> Tuple[List[EvalRecord], EvaluationReport]:
    """Train, save the checkpoint, score the test split and write the run report"""
    logger.info(f"Run {plan.key}: train on {plan.train_categories}, test on {plan.test_categories}")
    fewshot_k = cfg.run.fewshot_k if cfg.regime == "fewshot" else None
    model = train_model(cfg, extractor, training_entries(manifest, plan.train_categories, fewshot_k))

    ckpt_dir = ensure_dir(run_dir / "checkpoint")
    save_checkpoint(ckpt_dir / MODEL_FILE, model.network, cfg, model.trainer)
    save_banks(model.banks, ckpt_dir)

    records = evaluate_model(cfg, model, extractor, manifest.select("test", plan.test_categories), run_dir / "predictions")
    report = evaluate(records, cfg.metrics).model_copy(update={"regime": cfg.regime, "runs": [plan.key]})
    write_report(report, run_dir / REPORT_FILE)
    return records, report


def write_report(report: EvaluationReport, path: Path) -> None:
    ensure_dir(path.parent)
    with open(path, "w") as f:
        json.dump(report.model_dump(mode="json"), f, indent=2, sort_keys=True)
    logger.info(f"Report written to {path}: mAD={report.mAD:.4f}")


def run_regime(cfg: RunConfig) -> EvaluationReport:
    """
    Run every train/test split of the configured regime

    Args:
        cfg: Run configuration

    Returns:
        Report over all test records of the regime, also written to
        <output_dir>/<regime>/report.json
    """
    manifest = prepare_dataset(cfg)
    plans = plan_runs(cfg, manifest.categories)
    validate_regime(cfg, manifest, plans)
    logger.info(f"Regime {cfg.regime}: {len(plans)} run(s), config {config_hash(cfg)[:12]}")

    extractor = create_extractor(cfg)
    regime_dir = ensure_dir(Path(cfg.run.output_dir) / cfg.regime)
    records: List[EvalRecord] = []
    for plan in plans:
        run_records, _ = execute_plan(cfg, plan, manifest, extractor, regime_dir / plan.key)
        records.extend(run_records)

    report = evaluate(records, cfg.metrics).model_copy(update={"regime": cfg.regime, "runs": [p.key for p in plans]})
    write_report(report, regime_dir / REPORT_FILE)
    return report


def summarize(report: EvaluationReport) -> Dict[str, Optional[float]]:
    """Flat metric dictionary for logging and the CLI"""
    keys = ("I_AUROC", "P_AUROC", "P_AP", "PRO", "mAD")
    return {k: (None if getattr(report, k) is None else float(np.round(getattr(report, k), 4))) for k in keys}
