"""
Prototype bank for inter-matching
Builds the raw feature pool from normal training grids, reduces it with greedy
k-center coreset selection, and answers exact nearest / top-k queries.
Distances are always accumulated in float64; ties go to the lowest index.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.random_projection import SparseRandomProjection
from tqdm import tqdm

from .encoder import PatchFeatureGrid
from .exceptions import ConfigError, DataError

logger = logging.getLogger(__name__)

BANK_MAGIC = b"SNRMBANK"
BANK_VERSION = 1
BANK_HEADER = struct.Struct("<8sHIIQ")

# Elements of the (queries x prototypes x dim) difference block per chunk
_CHUNK_ELEMENTS = 1 << 22

ResidualKind = Literal["inter", "intra", "hybrid"]


@dataclass
class RawFeaturePool:
    """All training patch descriptors with (image index, patch index) origins"""

    vectors: np.ndarray
    origins: np.ndarray

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class PrototypeBank:
    """
    T prototypes copied from the raw pool

    Arrays are made read-only on construction so a bank can be shared by
    concurrent readers.
    """

    prototypes: np.ndarray
    selected_indices: np.ndarray
    build_seed: int = 0

    def __post_init__(self):
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] == 0:
            raise DataError(f"bank needs a non-empty T x d array, got {self.prototypes.shape}")
        if self.selected_indices.shape[0] != self.prototypes.shape[0]:
            raise DataError("selected_indices must have one entry per prototype")
        if np.unique(self.selected_indices).size != self.selected_indices.size:
            raise DataError("selected_indices contains duplicates")
        self.prototypes = np.ascontiguousarray(self.prototypes, dtype=np.float32)
        self.selected_indices = np.ascontiguousarray(self.selected_indices, dtype=np.int64)
        self.prototypes.setflags(write=False)
        self.selected_indices.setflags(write=False)

    def __len__(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def stats(self) -> Dict:
        return {
            "size": len(self),
            "dim": self.dim,
            "build_seed": self.build_seed,
            "min_index": int(self.selected_indices.min()),
            "max_index": int(self.selected_indices.max()),
        }

    def save(self, filepath: Union[str, Path]) -> None:
        """
        Write the bank file: header (magic, version u16, T u32, d u32, seed u64),
        row-major float32 prototypes, u32 selected indices; little-endian
        """
        with open(filepath, "wb") as f:
            f.write(BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, len(self), self.dim, self.build_seed))
            f.write(np.ascontiguousarray(self.prototypes, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(self.selected_indices, dtype="<u4").tobytes())
        logger.info(f"Saved prototype bank ({len(self)} x {self.dim}) to {filepath}")

    @classmethod
    def load(cls, filepath: Union[str, Path]) -> "PrototypeBank":
        data = Path(filepath).read_bytes()
        if len(data) < BANK_HEADER.size:
            raise DataError(f"{filepath}: truncated bank header")
        magic, version, size, dim, seed = BANK_HEADER.unpack_from(data)
        if magic != BANK_MAGIC:
            raise DataError(f"{filepath}: not a bank file")
        if version != BANK_VERSION:
            raise DataError(f"{filepath}: unsupported bank version {version}")
        offset = BANK_HEADER.size
        expected = offset + 4 * size * dim + 4 * size
        if len(data) != expected:
            raise DataError(f"{filepath}: expected {expected} bytes, found {len(data)}")
        protos = np.frombuffer(data, dtype="<f4", count=size * dim, offset=offset).reshape(size, dim)
        indices = np.frombuffer(data, dtype="<u4", count=size, offset=offset + 4 * size * dim)
        return cls(protos.astype(np.float32), indices.astype(np.int64), int(seed))


def _check_finite(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise DataError(f"{what} contains non-finite values")


def build_raw_pool(training_grids: Sequence[PatchFeatureGrid]) -> RawFeaturePool:
    """
    Collect every patch descriptor of the training grids

    Args:
        training_grids: Fused grids of normal training images

    Returns:
        RawFeaturePool of size N_trn * M with provenance
    """
    if len(training_grids) == 0:
        raise DataError("cannot build a feature pool from zero grids")
    dim = training_grids[0].d
    vectors, origins = [], []
    for image_idx, grid in enumerate(training_grids):
        if grid.d != dim:
            raise DataError(f"grid {image_idx} has d_f={grid.d}, expected {dim}")
        desc = grid.descriptors()
        _check_finite(desc, f"training grid {image_idx}")
        vectors.append(desc)
        origins.append(np.stack([np.full(len(desc), image_idx), np.arange(len(desc))], axis=1))
    return RawFeaturePool(
        np.concatenate(vectors).astype(np.float32),
        np.concatenate(origins).astype(np.int64),
    )


def _sq_dists_to(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = points - center
    return np.einsum("ij,ij->i", diff, diff)


def greedy_k_center(
    points: np.ndarray, count: int, start_index: int, progress: bool = False
) -> np.ndarray:
    """
    Farthest-point selection: each new point maximises its distance to the
    already-selected set (lowest index on ties)

    Args:
        points: N x d array (converted to float64)
        count: Number of points to select
        start_index: First selected point

    Returns:
        Selected indices in selection order
    """
    points = np.asarray(points, dtype=np.float64)
    selected = np.empty(count, dtype=np.int64)
    selected[0] = start_index
    min_dist = _sq_dists_to(points, points[start_index])
    min_dist[start_index] = -1.0

    steps = range(1, count)
    for step in tqdm(steps, desc="Coreset", leave=False) if progress else steps:
        nxt = int(np.argmax(min_dist))
        selected[step] = nxt
        np.minimum(min_dist, _sq_dists_to(points, points[nxt]), out=min_dist)
        min_dist[selected[: step + 1]] = -1.0
    return selected


def coreset_select(
    pool: RawFeaturePool,
    T: int,
    seed: int,
    start_index: Optional[int] = None,
    mode: Literal["exact", "projected"] = "exact",
    projection_dim: int = 128,
) -> PrototypeBank:
    """
    Greedy k-center coreset of the raw pool

    Args:
        pool: Raw feature pool
        T: Number of prototypes
        seed: Chooses the first element (and the projection in projected mode)
        start_index: Explicit first element, overrides the seeded choice
        mode: "exact" runs on the raw vectors; "projected" runs on a sparse
            random projection and is approximate
        projection_dim: Target dimension of the projection

    Returns:
        PrototypeBank whose prototypes are exact copies of pool vectors
    """
    size = len(pool)
    if not 1 <= T <= size:
        raise ConfigError(f"coreset size T={T} must be within [1, {size}]")
    _check_finite(pool.vectors, "feature pool")

    rng = np.random.default_rng(seed)
    first = int(rng.integers(size)) if start_index is None else int(start_index)
    if not 0 <= first < size:
        raise ConfigError(f"start_index {first} outside the pool")

    points = pool.vectors
    if mode == "projected" and projection_dim < pool.dim:
        projector = SparseRandomProjection(n_components=projection_dim, random_state=seed)
        points = projector.fit_transform(pool.vectors.astype(np.float64))

    logger.info(f"Selecting {T} prototypes from {size} patches ({mode})")
    selected = greedy_k_center(points, T, first, progress=T > 1000)
    return PrototypeBank(pool.vectors[selected].copy(), selected, seed)


def covering_radius(pool: RawFeaturePool, bank: PrototypeBank) -> float:
    """Largest distance from a pool vector to its nearest prototype"""
    _, dists = nearest_batch(pool.vectors, bank)
    return float(dists.max())


def _sq_dist_matrix(queries: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Exact float64 squared distances, evaluated in chunks of queries"""
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(prototypes, dtype=np.float64)
    out = np.empty((q.shape[0], p.shape[0]), dtype=np.float64)
    rows = max(1, _CHUNK_ELEMENTS // max(1, p.shape[0] * p.shape[1]))
    for start in range(0, q.shape[0], rows):
        block = q[start : start + rows, None, :] - p[None, :, :]
        out[start : start + rows] = np.einsum("qtd,qtd->qt", block, block)
    return out


def _as_queries(query: np.ndarray, dim: int) -> np.ndarray:
    q = np.atleast_2d(np.asarray(query))
    if q.shape[1] != dim:
        raise DataError(f"query dim {q.shape[1]} != bank dim {dim}")
    _check_finite(q, "query")
    return q


def nearest_batch(queries: np.ndarray, bank: PrototypeBank) -> Tuple[np.ndarray, np.ndarray]:
    """Indices and L2 distances of the nearest prototype for each query row"""
    sq = _sq_dist_matrix(_as_queries(queries, bank.dim), bank.prototypes)
    idx = np.argmin(sq, axis=1)
    return idx, np.sqrt(sq[np.arange(len(idx)), idx])


def nearest(query: np.ndarray, bank: PrototypeBank) -> Tuple[int, float]:
    """
    Nearest prototype by L2 distance

    Returns:
        (index, distance); ties resolved to the lowest index
    """
    idx, dist = nearest_batch(query, bank)
    return int(idx[0]), float(dist[0])


def topk_indices(queries: np.ndarray, references: np.ndarray, k: int) -> np.ndarray:
    """Stable k-nearest indices (queries x k) by float64 L2"""
    sq = _sq_dist_matrix(queries, references)
    return np.argsort(sq, axis=1, kind="stable")[:, :k]


def topk_batch(queries: np.ndarray, bank: PrototypeBank, k: int) -> np.ndarray:
    """Mean of the k nearest prototypes for each query row"""
    if not 1 <= k <= len(bank):
        raise ConfigError(f"k={k} must be within [1, {len(bank)}]")
    q = _as_queries(queries, bank.dim)
    idx = topk_indices(q, bank.prototypes, k)
    return bank.prototypes.astype(np.float64)[idx].mean(axis=1)


def topk_reference(query: np.ndarray, bank: PrototypeBank, k: int) -> np.ndarray:
    """Arithmetic mean of the k nearest prototypes (top-k averaging)"""
    return topk_batch(query, bank, k)[0]


def inter_residual(query: np.ndarray, reference: np.ndarray, theta: int) -> np.ndarray:
    """Elementwise |query - reference| ** theta, theta in {1, 2}"""
    if theta not in (1, 2):
        raise ConfigError(f"theta must be 1 or 2, got {theta}")
    diff = np.abs(np.asarray(query, dtype=np.float64) - np.asarray(reference, dtype=np.float64))
    return diff if theta == 1 else diff * diff


@dataclass
class ResidualGrid:
    """Per-patch residuals; hybrid grids carry inter then intra channels"""

    residuals: np.ndarray
    theta: int
    kind: ResidualKind

    def __post_init__(self):
        if self.residuals.ndim != 3:
            raise DataError(f"residual grid must be h x w x c, got {self.residuals.shape}")
        if self.theta not in (1, 2):
            raise ConfigError(f"theta must be 1 or 2, got {self.theta}")
        if self.kind not in ("inter", "intra", "hybrid"):
            raise DataError(f"unknown residual kind {self.kind!r}")
        if np.any(self.residuals < 0):
            raise DataError("residuals must be non-negative")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.residuals.shape


def compute_inter_grid(grid: PatchFeatureGrid, bank: PrototypeBank, theta: int, k: int) -> ResidualGrid:
    """
    Inter-residual of every patch against its top-k bank reference

    Args:
        grid: Test feature grid
        bank: Prototype bank
        theta: Residual exponent
        k: Top-k averaging (k=1 is the plain nearest neighbour)

    Returns:
        ResidualGrid of kind "inter"
    """
    desc = grid.descriptors()
    _check_finite(desc, "feature grid")
    refs = topk_batch(desc, bank, k)
    res = inter_residual(desc, refs, theta)
    return ResidualGrid(res.reshape(grid.h, grid.w, grid.d), theta, "inter")


def build_bank(
    grids: Sequence[PatchFeatureGrid],
    T: int,
    seed: int,
    mode: Literal["exact", "projected"] = "exact",
    projection_dim: int = 128,
) -> PrototypeBank:
    """Raw pool + coreset in one call; T larger than the pool is clamped"""
    pool = build_raw_pool(grids)
    size = min(T, len(pool))
    if size < T:
        logger.warning(f"Bank size {T} exceeds pool of {len(pool)} patches; using {size}")
    bank = coreset_select(pool, size, seed, mode=mode, projection_dim=projection_dim)
    logger.info(f"Prototype bank built: {bank.stats()}")
    return bank


def bank_file_name(category: Optional[str] = None) -> str:
    return "bank.bin" if category is None else f"bank_{category}.bin"


def save_banks(banks: Dict[Optional[str], PrototypeBank], directory: Path) -> List[Path]:
    paths = []
    for category, bank in banks.items():
        path = Path(directory) / bank_file_name(category)
        bank.save(path)
        paths.append(path)
    return paths


def load_banks(directory: Path) -> Dict[Optional[str], PrototypeBank]:
    """Load bank.bin or every bank_<category>.bin of a checkpoint directory"""
    directory = Path(directory)
    single = directory / bank_file_name()
    if single.is_file():
        return {None: PrototypeBank.load(single)}
    banks = {}
    for path in sorted(directory.glob("bank_*.bin")):
        banks[path.stem[len("bank_"):]] = PrototypeBank.load(path)
    if not banks:
        raise DataError(f"no bank file in {directory}")
    return banks
