"""
Command-line interface

    snarm synth     --config cfg.yaml [--out DIR] [--seed N]
    snarm bank build --config cfg.yaml --out ckpt/
    snarm train     --config cfg.yaml --out ckpt/
    snarm infer     --checkpoint ckpt/ --images DIR_OR_FILES... --out preds/
    snarm evaluate  --pred preds/ --gt DATA_ROOT --out report.json
    snarm run       --config cfg.yaml [--regime single|multi|cross|fewshot]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .core.bank import load_banks, save_banks
from .core.config import load_config
from .core.dataset import load_entry, load_manifest
from .core.encoder import Image, load_image
from .core.exceptions import DataError, SnarmError
from .core.inference import infer, load_prediction_geometry, load_predictions, save_predictions
from .core.metrics import EvalRecord, evaluate
from .core.pipeline import (
    MODEL_FILE,
    build_banks,
    create_extractor,
    load_images,
    prepare_dataset,
    run_regime,
    summarize,
    train_model,
    training_entries,
    write_report,
)
from .core.synthetic_dataset import generate_synthetic_dataset
from .core.trainer import load_checkpoint, save_checkpoint
from .schemas.config import RunConfig
from .schemas.dataset import SyntheticDatasetSpec
from .utils.helpers import ensure_dir, list_images
from .utils.logging import setup_logging

logger = logging.getLogger("snarm.cli")


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    setup_logging(cfg.logging)
    return cfg


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _config(args)
    spec = cfg.dataset.synthetic or SyntheticDatasetSpec()
    root = Path(args.out) if args.out else Path(cfg.dataset.root)
    seed = cfg.seed if args.seed is None else args.seed
    manifest = generate_synthetic_dataset(spec, root, seed)
    print(json.dumps(manifest.counts(), indent=2, sort_keys=True))
    return 0


def cmd_bank_build(args: argparse.Namespace) -> int:
    cfg = _config(args)
    manifest = prepare_dataset(cfg)
    entries = training_entries(manifest, manifest.categories)
    extractor = create_extractor(cfg)
    grids = extractor.encode_many(load_images(entries), desc="Encoding training images")
    banks = build_banks(cfg, grids, [e.category for e in entries])
    for path in save_banks(banks, ensure_dir(args.out)):
        logger.info(f"Wrote {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    manifest = prepare_dataset(cfg)
    extractor = create_extractor(cfg)
    model = train_model(cfg, extractor, training_entries(manifest, manifest.categories))
    out = ensure_dir(args.out)
    save_checkpoint(out / MODEL_FILE, model.network, cfg, model.trainer)
    save_banks(model.banks, out)
    return 0


def image_id_for(path: Path) -> str:
    """Manifest id (category/test/defect/stem) for files inside a dataset, else the stem"""
    parts = path.parts
    if len(parts) >= 4 and parts[-3] == "test":
        return f"{parts[-4]}/test/{parts[-2]}/{path.stem}"
    return path.stem


def _image_paths(items: Sequence[str]) -> List[Path]:
    paths: List[Path] = []
    for item in items:
        path = Path(item)
        paths.extend(list_images(path) if path.is_dir() else [path])
    if not paths:
        raise DataError("no input images found")
    return paths


def cmd_infer(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    given = load_config(args.config) if args.config else None
    network, cfg, _ = load_checkpoint(ckpt / MODEL_FILE, given)
    setup_logging(cfg.logging)
    banks = load_banks(ckpt)
    if network.feature_dim != next(iter(banks.values())).dim:
        raise DataError(f"bank dim does not match checkpoint feature dim {network.feature_dim}")
    if None not in banks and not args.category:
        raise DataError("checkpoint has per-category banks; pass --category")

    paths = _image_paths(args.images)
    ids = [image_id_for(p) for p in paths]
    images = [Image(load_image(p).pixels, i) for p, i in zip(paths, ids)]
    categories = [args.category] * len(images) if None not in banks else None
    maps = infer(network, cfg, banks, create_extractor(cfg), images, categories)
    save_predictions(maps, ids, args.out, cfg.encoder)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    predictions = load_predictions(args.pred)
    # masks follow the preprocessing that produced the maps, not the local config
    geometry = load_prediction_geometry(args.pred)
    encoder = cfg.encoder if geometry is None else cfg.encoder.model_copy(update=geometry.model_dump())
    manifest = load_manifest(args.gt)
    records = []
    for entry in manifest.select("test"):
        if entry.image_id not in predictions:
            continue
        score, values = predictions[entry.image_id]
        _, mask = load_entry(entry, encoder)
        if mask.shape != values.shape:
            raise DataError(f"mask {mask.shape} and prediction {values.shape} differ for {entry.image_id}")
        records.append(EvalRecord(score, values, entry.label, mask, entry.category, entry.mask_missing))
    if not records:
        raise DataError(f"no predictions in {args.pred} match test images under {args.gt}")

    report = evaluate(records, cfg.metrics)
    write_report(report, Path(args.out))
    print(json.dumps(summarize(report), indent=2))
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if args.regime:
        cfg = RunConfig.model_validate({**cfg.model_dump(), "run": {**cfg.run.model_dump(), "regime": args.regime}})
    report = run_regime(cfg)
    print(json.dumps(summarize(report), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snarm", description="Self-navigated residual anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser, required: bool = False) -> argparse.ArgumentParser:
        p.add_argument("--config", required=required, default=None, help="YAML run configuration")
        return p

    synth = with_config(sub.add_parser("synth", help="Generate the synthetic dataset"))
    synth.add_argument("--out", default=None, help="Output root (dataset.root by default)")
    synth.add_argument("--seed", type=int, default=None)
    synth.set_defaults(func=cmd_synth)

    bank = sub.add_parser("bank", help="Prototype bank commands")
    bank_sub = bank.add_subparsers(dest="bank_command", required=True)
    build = with_config(bank_sub.add_parser("build", help="Build the prototype bank(s)"))
    build.add_argument("--out", required=True)
    build.set_defaults(func=cmd_bank_build)

    train = with_config(sub.add_parser("train", help="Build banks and train the network"))
    train.add_argument("--out", required=True)
    train.set_defaults(func=cmd_train)

    inf = with_config(sub.add_parser("infer", help="Score images with a trained checkpoint"))
    inf.add_argument("--checkpoint", required=True, help="Directory holding model.pt and bank files")
    inf.add_argument("--images", required=True, nargs="+")
    inf.add_argument("--category", default=None, help="Category of the images (per-category banks)")
    inf.add_argument("--out", required=True)
    inf.set_defaults(func=cmd_infer)

    ev = with_config(sub.add_parser("evaluate", help="Compute metrics for saved predictions"))
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True, help="Dataset root with ground-truth masks")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_evaluate)

    run = with_config(sub.add_parser("run", help="Run a full experimental regime"))
    run.add_argument("--regime", choices=["single", "multi", "cross", "fewshot"], default=None)
    run.set_defaults(func=cmd_run)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SnarmError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
