"""
Patch feature extraction
Multi-layer features from a pluggable backbone, fused into one patch grid
(mean of early layers || mean of late layers, then 3x3 neighbourhood pooling)
"""

import hashlib
import json
import logging
import os
import struct
import tempfile
import threading
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import uniform_filter
from tqdm import tqdm

from ..schemas.config import EncoderConfig
from .exceptions import BackendError, ConfigError, DataError

logger = logging.getLogger(__name__)

GRID_HEADER = struct.Struct("<III")


@dataclass(frozen=True)
class Image:
    """RGB image with values in [0, 1]"""

    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"image {self.source_id!r} must be HxWx3, got {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise DataError(f"image {self.source_id!r} is empty")
        if not np.all(np.isfinite(px)):
            raise DataError(f"image {self.source_id!r} has non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise DataError(f"image {self.source_id!r} has pixels outside [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PatchGeometry:
    """Maps patch-grid cells to image-pixel rectangles"""

    grid_h: int
    grid_w: int
    image_h: int
    image_w: int

    def rect(self, i: int, j: int) -> Tuple[int, int, int, int]:
        """(top, left, bottom, right) of cell (i, j); bottom/right exclusive"""
        top = -(-i * self.image_h // self.grid_h)
        bottom = -(-(i + 1) * self.image_h // self.grid_h)
        left = -(-j * self.image_w // self.grid_w)
        right = -(-(j + 1) * self.image_w // self.grid_w)
        return top, left, bottom, right

    def to_pixel_mask(self, patch_mask: np.ndarray) -> np.ndarray:
        """
        Map a grid-level boolean mask to an image-level 0/1 mask

        Args:
            patch_mask: grid_h x grid_w booleans

        Returns:
            image_h x image_w uint8 mask
        """
        if patch_mask.shape != (self.grid_h, self.grid_w):
            raise DataError(f"patch mask shape {patch_mask.shape} != grid {(self.grid_h, self.grid_w)}")
        rows = (np.arange(self.image_h) * self.grid_h) // self.image_h
        cols = (np.arange(self.image_w) * self.grid_w) // self.image_w
        return patch_mask[np.ix_(rows, cols)].astype(np.uint8)


@dataclass
class LayerFeatureStack:
    """Ordered per-layer feature grids (h_f x w_f x d each)"""

    layers: List[np.ndarray]
    image_size: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if len(self.layers) < 2:
            raise DataError(f"need at least 2 layers, got {len(self.layers)}")
        shape = self.layers[0].shape
        if len(shape) != 3:
            raise DataError(f"layer grids must be h x w x d, got {shape}")
        for idx, layer in enumerate(self.layers):
            if layer.shape != shape:
                raise DataError(f"layer {idx} has shape {layer.shape}, expected {shape}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.layers[0].shape


@dataclass
class PatchFeatureGrid:
    """Fused patch descriptors (h_f x w_f x d_f) with their pixel footprint"""

    grid: np.ndarray
    geometry: PatchGeometry = None

    def __post_init__(self):
        if self.grid.ndim != 3:
            raise DataError(f"feature grid must be h x w x d, got {self.grid.shape}")
        if self.geometry is None:
            h, w = self.grid.shape[:2]
            self.geometry = PatchGeometry(h, w, h, w)

    @property
    def h(self) -> int:
        return self.grid.shape[0]

    @property
    def w(self) -> int:
        return self.grid.shape[1]

    @property
    def d(self) -> int:
        return self.grid.shape[2]

    @property
    def num_patches(self) -> int:
        return self.h * self.w

    def descriptors(self) -> np.ndarray:
        """Row-major M x d_f view"""
        return self.grid.reshape(-1, self.d)


# Backends


class EncoderBackend(ABC):
    """
    Interface of a multi-layer patch encoder

    Implementations must be deterministic. Backends that are not safe to call
    from several threads set ``thread_safe = False``; the extractor then
    serialises calls.
    """

    name: str = "abstract"
    thread_safe: bool = True

    def __init__(self, resize: int, crop: int, patch_size: int):
        self.resize = resize
        self.crop = crop
        self.patch_size = patch_size

    @property
    def preprocess_spec(self) -> Dict[str, int]:
        return {"resize": self.resize, "crop": self.crop, "patch_size": self.patch_size}

    @abstractmethod
    def forward_layers(self, pixels: np.ndarray) -> List[np.ndarray]:
        """Preprocessed HxWx3 pixels -> list of L grids (h_f x w_f x d)"""


class SyntheticEncoder(EncoderBackend):
    """
    Deterministic stand-in for a foundation-model encoder

    Each layer is a fixed-seed random projection of the non-overlapping
    patch pixels followed by tanh. The second half of the layers sees the
    patch pixels averaged with their 3x3 neighbourhood, giving them a wider
    (more "semantic") receptive field than the first half.
    """

    name = "synthetic"
    thread_safe = True

    def __init__(
        self,
        resize: int = 448,
        crop: int = 392,
        patch_size: int = 14,
        layers: int = 8,
        layer_dim: int = 32,
        seed: int = 0,
    ):
        super().__init__(resize, crop, patch_size)
        self.num_layers = layers
        self.layer_dim = layer_dim
        self.seed = seed

        in_dim = patch_size * patch_size * 3
        rng = np.random.default_rng(seed)
        scale = 2.0 / np.sqrt(in_dim)
        self.weights = [rng.normal(0.0, scale, size=(in_dim, layer_dim)) for _ in range(layers)]
        self.biases = [rng.normal(0.0, 0.1, size=layer_dim) for _ in range(layers)]

    def _patchify(self, pixels: np.ndarray) -> np.ndarray:
        p = self.patch_size
        gh, gw = pixels.shape[0] // p, pixels.shape[1] // p
        if gh == 0 or gw == 0:
            raise DataError(f"image {pixels.shape[:2]} smaller than one {p}x{p} patch")
        cropped = pixels[: gh * p, : gw * p].astype(np.float64) - 0.5
        patches = cropped.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4)
        return patches.reshape(gh, gw, p * p * 3)

    def forward_layers(self, pixels: np.ndarray) -> List[np.ndarray]:
        local = self._patchify(pixels)
        context = uniform_filter(local, size=(3, 3, 1), mode="reflect")
        half = self.num_layers // 2
        out = []
        for l in range(self.num_layers):
            inputs = local if l < half else context
            out.append(np.tanh(inputs @ self.weights[l] + self.biases[l]).astype(np.float32))
        return out


class DinoV2Backend(EncoderBackend):
    """
    Adapter for DINOv2 ViT-B/14 (with registers) loaded through torch.hub

    Returns the outputs of the first L transformer blocks. Needs network access
    on first use and is never exercised by the test-suite.
    """

    name = "dinov2"
    thread_safe = False

    IMAGENET_MEAN = (0.485, 0.456, 0.406)
    IMAGENET_STD = (0.229, 0.224, 0.225)

    def __init__(
        self,
        resize: int = 448,
        crop: int = 392,
        patch_size: int = 14,
        layers: int = 8,
        model_name: str = "dinov2_vitb14_reg",
        device: str = "cpu",
        **_: object,
    ):
        super().__init__(resize, crop, patch_size)
        self.num_layers = layers
        self.model_name = model_name
        self.device = torch.device(device)
        self._model = None

    def _load(self):
        if self._model is None:
            logger.info(f"Loading {self.model_name} through torch.hub")
            model = torch.hub.load("facebookresearch/dinov2", self.model_name)
            self._model = model.eval().to(self.device)
        return self._model

    def forward_layers(self, pixels: np.ndarray) -> List[np.ndarray]:
        model = self._load()
        mean = np.asarray(self.IMAGENET_MEAN)
        std = np.asarray(self.IMAGENET_STD)
        x = torch.from_numpy(((pixels - mean) / std).transpose(2, 0, 1)).float()[None].to(self.device)
        with torch.no_grad():
            outs = model.get_intermediate_layers(x, n=list(range(self.num_layers)), reshape=True)
        return [o[0].permute(1, 2, 0).cpu().numpy().astype(np.float32) for o in outs]


_BACKENDS: Dict[str, Callable[..., EncoderBackend]] = {}


def register_backend(name: str, factory: Callable[..., EncoderBackend]) -> None:
    """Make a backend available under ``encoder.backend: <name>``"""
    _BACKENDS[name] = factory


def get_backend(name: str, **options) -> EncoderBackend:
    """
    Instantiate a registered backend

    Args:
        name: Registered backend name
        options: Constructor keyword arguments

    Returns:
        Backend instance
    """
    if name not in _BACKENDS:
        raise ConfigError(f"unknown encoder backend '{name}' (registered: {sorted(_BACKENDS)})")
    return _BACKENDS[name](**options)


def create_backend(cfg: EncoderConfig) -> EncoderBackend:
    options = dict(resize=cfg.resize, crop=cfg.crop, patch_size=cfg.patch_size, layers=cfg.layers)
    if cfg.backend == "synthetic":
        options.update(layer_dim=cfg.layer_dim, seed=cfg.seed)
    elif cfg.backend == "dinov2":
        options.update(model_name=cfg.model_name)
    return get_backend(cfg.backend, **options)


register_backend(SyntheticEncoder.name, SyntheticEncoder)
register_backend(DinoV2Backend.name, DinoV2Backend)


# Operations


def _resize_bilinear(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an HxWxC array (align_corners=False), float64"""
    if array.shape[:2] == (out_h, out_w):
        return array.astype(np.float64, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float64)).permute(2, 0, 1)[None]
    resized = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return resized[0].permute(1, 2, 0).numpy()


def _center_crop_offsets(size: int, crop: int) -> int:
    return (size - crop) // 2


def preprocess(image: Image, resize: int, crop: int) -> Image:
    """
    Bilinear resize to resize x resize, then center crop to crop x crop

    Args:
        image: Input image
        resize: Side after resizing
        crop: Side after center cropping

    Returns:
        crop x crop image
    """
    if not resize >= crop > 0:
        raise ConfigError(f"need resize >= crop > 0, got resize={resize}, crop={crop}")
    if image.height < 2 or image.width < 2:
        raise DataError(f"image {image.source_id!r} is smaller than 2x2")

    resized = _resize_bilinear(image.pixels, resize, resize)
    off = _center_crop_offsets(resize, crop)
    cropped = resized[off : off + crop, off : off + crop]
    return Image(np.clip(cropped, 0.0, 1.0), image.source_id)


def preprocess_mask(mask: np.ndarray, resize: int, crop: int) -> np.ndarray:
    """Nearest-neighbour version of preprocess for binary masks"""
    resized = cv2.resize(mask.astype(np.uint8), (resize, resize), interpolation=cv2.INTER_NEAREST)
    off = _center_crop_offsets(resize, crop)
    return resized[off : off + crop, off : off + crop]


def extract(image: Image, backend: EncoderBackend) -> LayerFeatureStack:
    """
    Run the backend on a preprocessed image

    Raises:
        BackendError: Whatever the backend raised, tagged with its name
    """
    try:
        layers = backend.forward_layers(image.pixels)
    except Exception as e:
        raise BackendError(backend.name, str(e), e) from e
    return LayerFeatureStack(list(layers), image_size=(image.height, image.width))


def fuse(stack: LayerFeatureStack, pooling: bool = True) -> PatchFeatureGrid:
    """
    Concatenate the mean of the early half and the mean of the late half

    Args:
        stack: L layer grids, L even
        pooling: Apply 3x3 stride-1 mean pooling with reflect padding

    Returns:
        PatchFeatureGrid with 2 x per-layer channels
    """
    num = stack.num_layers
    if num % 2:
        raise DataError(f"fuse needs an even number of layers, got {num}")
    half = num // 2
    layers = np.stack(stack.layers).astype(np.float64)
    fused = np.concatenate([layers[:half].mean(axis=0), layers[half:].mean(axis=0)], axis=-1)
    if pooling:
        fused = uniform_filter(fused, size=(3, 3, 1), mode="reflect")

    h, w = fused.shape[:2]
    image_h, image_w = stack.image_size or (h, w)
    return PatchFeatureGrid(fused.astype(np.float32), PatchGeometry(h, w, image_h, image_w))


def upsample_grid(grid: PatchFeatureGrid, target_h: int, target_w: int) -> PatchFeatureGrid:
    """Bilinear Up(F) to target_h x target_w, keeping the pixel footprint"""
    if target_h < grid.h or target_w < grid.w:
        raise DataError(f"target {(target_h, target_w)} smaller than grid {(grid.h, grid.w)}")
    up = _resize_bilinear(grid.grid, target_h, target_w).astype(np.float32)
    geo = grid.geometry
    return PatchFeatureGrid(up, PatchGeometry(target_h, target_w, geo.image_h, geo.image_w))


def flatten_features(grid: PatchFeatureGrid, target_h: int, target_w: int) -> np.ndarray:
    """
    Flatten(Up(F)): bilinear upsample then row-major flatten

    Returns:
        (target_h * target_w) x d_f descriptors
    """
    if (target_h, target_w) == (grid.h, grid.w):
        return grid.descriptors().copy()
    return upsample_grid(grid, target_h, target_w).descriptors()


def unflatten_features(descriptors: np.ndarray, h: int, w: int) -> np.ndarray:
    if descriptors.shape[0] != h * w:
        raise DataError(f"{descriptors.shape[0]} descriptors cannot form a {h}x{w} grid")
    return descriptors.reshape(h, w, -1)


def encode(image: Image, backend: EncoderBackend, cfg: EncoderConfig) -> PatchFeatureGrid:
    """preprocess -> extract -> fuse (-> Up when encoder.feature_size is set)"""
    pre = preprocess(image, cfg.resize, cfg.crop)
    grid = fuse(extract(pre, backend), pooling=cfg.pooling)
    if cfg.feature_size is not None:
        grid = upsample_grid(grid, *cfg.feature_size)
    return grid


# Serialization


def save_feature_grid(grid: PatchFeatureGrid, path: Union[str, Path]) -> None:
    """
    Little-endian u32 (h, w, d) header followed by row-major float32

    Written to a temporary file in the target directory and moved into place,
    so a concurrent reader sees either no file or the complete grid.
    """
    path = Path(path)
    with tempfile.NamedTemporaryFile(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp", delete=False) as f:
        tmp = Path(f.name)
        try:
            f.write(GRID_HEADER.pack(grid.h, grid.w, grid.d))
            f.write(np.ascontiguousarray(grid.grid, dtype="<f4").tobytes())
        except BaseException:
            f.close()
            tmp.unlink(missing_ok=True)
            raise
    os.replace(tmp, path)


def load_feature_grid(path: Union[str, Path], geometry: Optional[PatchGeometry] = None) -> PatchFeatureGrid:
    data = Path(path).read_bytes()
    if len(data) < GRID_HEADER.size:
        raise DataError(f"{path}: truncated feature grid header")
    h, w, d = GRID_HEADER.unpack_from(data)
    body = np.frombuffer(data, dtype="<f4", offset=GRID_HEADER.size)
    if body.size != h * w * d:
        raise DataError(f"{path}: expected {h * w * d} floats, found {body.size}")
    return PatchFeatureGrid(body.reshape(h, w, d).astype(np.float32), geometry)


# Image I/O


def load_image(path: Union[str, Path]) -> Image:
    """Read an image file as RGB in [0, 1]"""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DataError(f"cannot read image: {path}")
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    return Image(rgb.astype(np.float64) / 255.0, str(path))


def load_mask(path: Union[str, Path]) -> np.ndarray:
    """Read an 8-bit mask and binarise at 128"""
    mask = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if mask is None:
        raise DataError(f"cannot read mask: {path}")
    return (mask >= 128).astype(np.uint8)


@dataclass
class FeatureExtractor:
    """
    Encodes many images with an optional on-disk cache and a worker pool

    The cache key covers the image bytes, backend name and encoder config, so
    a config change never reuses stale grids.
    """

    backend: EncoderBackend
    cfg: EncoderConfig
    num_workers: int = 1
    cache: Optional[Path] = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _cache_path(self, image: Image) -> Optional[Path]:
        if self.cache is None:
            return None
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(image.pixels).tobytes())
        digest.update(str(image.pixels.shape).encode())
        digest.update(self.backend.name.encode())
        digest.update(json.dumps(self.cfg.model_dump(mode="json"), sort_keys=True).encode())
        return self.cache / f"{digest.hexdigest()}.grid"

    def _geometry(self, h: int, w: int) -> PatchGeometry:
        return PatchGeometry(h, w, self.cfg.crop, self.cfg.crop)

    def encode_one(self, image: Image) -> PatchFeatureGrid:
        cached = self._cache_path(image)
        if cached is not None and cached.is_file():
            grid = load_feature_grid(cached)
            return PatchFeatureGrid(grid.grid, self._geometry(grid.h, grid.w))

        if self.backend.thread_safe:
            grid = encode(image, self.backend, self.cfg)
        else:
            with self._lock:
                grid = encode(image, self.backend, self.cfg)

        if cached is not None:
            save_feature_grid(grid, cached)
        return grid

    def encode_many(self, images: Sequence[Image], desc: str = "Encoding") -> List[PatchFeatureGrid]:
        """Encode in input order; parallel when num_workers > 1"""
        if self.num_workers <= 1 or len(images) <= 1:
            return [self.encode_one(img) for img in tqdm(images, desc=desc, leave=False)]
        with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
            return list(tqdm(pool.map(self.encode_one, images), total=len(images), desc=desc, leave=False))
