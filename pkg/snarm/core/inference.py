"""
Inference: images -> anomaly maps and image scores
"""

import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
from pydantic import ValidationError
from tqdm import tqdm

from ..models.decoder import AnomalyMap, final_map
from ..models.network import SNARMNetwork
from ..schemas.config import EncoderConfig, RunConfig
from ..schemas.report import ImageScoreRow, PredictionGeometry
from ..utils.helpers import ensure_dir, sanitize_filename
from .bank import PrototypeBank, compute_inter_grid
from .encoder import FeatureExtractor, Image, PatchFeatureGrid
from .exceptions import DataError, NumericError
from .trainer import bank_for

logger = logging.getLogger(__name__)

SCORES_FILE = "scores.csv"
GEOMETRY_FILE = "preprocess.json"


@torch.no_grad()
def predict_grids(
    network: SNARMNetwork,
    cfg: RunConfig,
    banks: Dict[Optional[str], PrototypeBank],
    grids: Sequence[PatchFeatureGrid],
    categories: Sequence[Optional[str]],
    batch_size: Optional[int] = None,
) -> List[AnomalyMap]:
    """
    Anomaly maps for already-encoded grids

    Args:
        network: Trained network
        cfg: Run configuration (theta, k, image-score reduction)
        banks: Prototype bank(s)
        grids: Feature grids of the test images
        categories: Category of each grid (selects the per-category bank)
        batch_size: Images per forward pass (train.batch_size by default)

    Returns:
        One AnomalyMap per grid, at the preprocessed image resolution
    """
    network.eval()
    batch_size = batch_size or cfg.train.batch_size
    maps: List[AnomalyMap] = []
    for start in tqdm(range(0, len(grids), batch_size), desc="Inference", leave=False):
        chunk = grids[start : start + batch_size]
        cats = categories[start : start + batch_size]
        inter = [compute_inter_grid(g, bank_for(banks, c), cfg.bank.theta, cfg.inter_topk).residuals for g, c in zip(chunk, cats)]
        features = torch.as_tensor(np.stack([g.grid for g in chunk]), dtype=torch.float32)
        residuals = torch.as_tensor(np.stack(inter), dtype=torch.float32)
        geo = chunk[0].geometry

        out = network(features, residuals, (geo.image_h, geo.image_w))
        values = final_map(out.maps).double().numpy()
        if not np.all(np.isfinite(values)):
            raise NumericError("non-finite anomaly map")
        for v in values:
            maps.append(AnomalyMap.from_values(np.clip(v, 0.0, 1.0), cfg.decoder.reduction, cfg.decoder.top_q))
    return maps


def infer(
    network: SNARMNetwork,
    cfg: RunConfig,
    banks: Dict[Optional[str], PrototypeBank],
    extractor: FeatureExtractor,
    images: Sequence[Image],
    categories: Optional[Sequence[Optional[str]]] = None,
) -> List[AnomalyMap]:
    """extract -> fuse -> inter-match -> network -> ensemble -> image score"""
    if not images:
        raise DataError("no images to score")
    categories = list(categories) if categories is not None else [None] * len(images)
    grids = extractor.encode_many(list(images), desc="Encoding test images")
    return predict_grids(network, cfg, banks, grids, categories)


def save_predictions(
    maps: Sequence[AnomalyMap],
    image_ids: Sequence[str],
    out_dir: Union[str, Path],
    encoder: Optional[EncoderConfig] = None,
) -> Path:
    """
    Write one 16-bit PNG per map plus the scores.csv sidecar

    When the encoder section is given its resize/crop go to preprocess.json,
    so evaluation can bring masks to the map resolution without the config.

    Returns:
        Path of scores.csv
    """
    out_dir = ensure_dir(out_dir)
    rows = []
    for amap, image_id in zip(maps, image_ids):
        cv2.imwrite(str(out_dir / f"{sanitize_filename(image_id)}.png"), amap.to_png16())
        rows.append(ImageScoreRow(image_id=image_id, image_score=amap.image_score))

    scores_path = out_dir / SCORES_FILE
    with open(scores_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "image_score"])
        for row in rows:
            writer.writerow([row.image_id, repr(row.image_score)])
    if encoder is not None:
        geometry = PredictionGeometry(resize=encoder.resize, crop=encoder.crop)
        (out_dir / GEOMETRY_FILE).write_text(geometry.model_dump_json(indent=2))
    logger.info(f"Saved {len(rows)} anomaly maps to {out_dir}")
    return scores_path


def load_prediction_geometry(pred_dir: Union[str, Path]) -> Optional[PredictionGeometry]:
    """resize/crop stored next to the predictions, None for directories without preprocess.json"""
    path = Path(pred_dir) / GEOMETRY_FILE
    if not path.is_file():
        return None
    try:
        return PredictionGeometry.model_validate_json(path.read_text())
    except ValidationError as e:
        raise DataError(f"{path}: {e}") from e


def load_predictions(pred_dir: Union[str, Path]) -> Dict[str, Tuple[float, np.ndarray]]:
    """
    Read maps written by save_predictions

    Returns:
        image_id -> (image score, H x W map in [0, 1])
    """
    pred_dir = Path(pred_dir)
    scores_path = pred_dir / SCORES_FILE
    if not scores_path.is_file():
        raise DataError(f"{scores_path} not found")

    out = {}
    with open(scores_path, newline="") as f:
        for record in csv.DictReader(f):
            row = ImageScoreRow(image_id=record["image_id"], image_score=float(record["image_score"]))
            png = pred_dir / f"{sanitize_filename(row.image_id)}.png"
            values = cv2.imread(str(png), cv2.IMREAD_UNCHANGED)
            if values is None:
                raise DataError(f"cannot read anomaly map {png}")
            out[row.image_id] = (row.image_score, values.astype(np.float64) / 65535.0)
    return out
