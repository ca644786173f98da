"""
Training dataset container: generation, binary format and readers.

File layout (all little-endian):
    64-byte header   struct "<8sIIIIII": magic b"GMNDATA1", version, count,
                     P (context length), H (horizon), S (patch size),
                     record size in bytes; zero padded
    count records    float32 fields, in order:
                     context (P+1, S, S), goal (S, S), actions (H, 2),
                     dist_label, start_pose (x, y, theta),
                     expert positions (H, 2), map index

A JSON metadata file with the same stem sits next to the binary file and
records the generation parameters and the seed of every map used, so held-out
benchmark maps can be checked for disjointness.

Generation is parallel across maps with a thread pool; results are merged in
map order so the same seed always yields byte-identical files.
"""

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch.utils.data import Dataset

from .config import Config
from .expert import (
    CONTEXT,
    D_MAX,
    D_NORM,
    D_STEP_MAX,
    HORIZON,
    JITTER,
    TrainingSample,
    build_trajectory,
    plan_expert_path,
    replay_sample,
    slice_samples,
)
from .logger import logger
from .world import PATCH_SIZE, GridMap, MapParams, Pose, generate_map, sample_cell_pair


MAGIC = b"GMNDATA1"
VERSION = 1
HEADER_FORMAT = "<8sIIIIII"
HEADER_SIZE = 64
MAP_SEED_STRIDE = 100_000


class DatasetError(Exception):
    """Base exception for dataset operations."""
    pass


class DatasetFormatError(DatasetError):
    """Raised when a dataset file is malformed."""
    pass


class SampleValidationError(DatasetError):
    """Raised when a sample violates a dataset invariant."""
    pass


@dataclass(frozen=True)
class DatasetConfig:
    n_maps: int = 100
    trajs_per_map: int = 8
    seed: int = 0
    context: int = CONTEXT
    horizon: int = HORIZON
    patch_size: int = PATCH_SIZE
    d_max: int = D_MAX
    d_norm: float = D_NORM
    min_separation: int = 25
    jitter: float = JITTER

    def validate(self) -> None:
        if self.n_maps < 1 or self.trajs_per_map < 1:
            raise DatasetError("n_maps and trajs_per_map must be positive")
        if self.d_max < 1 or self.d_norm <= 0:
            raise DatasetError("d_max and d_norm must be positive")


@dataclass
class DatasetInfo:
    path: Path
    metadata_path: Path
    count: int
    dropped: int
    map_seeds: List[int] = field(default_factory=list)


def record_dtype(P: int, H: int, S: int) -> np.dtype:
    return np.dtype([
        ("context", "<f4", (P + 1, S, S)),
        ("goal", "<f4", (S, S)),
        ("actions", "<f4", (H, 2)),
        ("dist_label", "<f4"),
        ("start_pose", "<f4", (3,)),
        ("expert", "<f4", (H, 2)),
        ("map_index", "<f4"),
    ])


def metadata_path_for(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def map_seed(data_seed: int, index: int) -> int:
    return data_seed * MAP_SEED_STRIDE + index


def samples_to_records(samples: List[TrainingSample], P: int, H: int, S: int) -> np.ndarray:
    records = np.zeros(len(samples), dtype=record_dtype(P, H, S))
    for i, s in enumerate(samples):
        records[i]["context"] = s.obs_context
        records[i]["goal"] = s.goal_obs
        records[i]["actions"] = s.actions
        records[i]["dist_label"] = s.dist_label
        records[i]["start_pose"] = (s.start_pose.x, s.start_pose.y, s.start_pose.theta)
        records[i]["expert"] = s.expert_positions
        records[i]["map_index"] = s.map_index
    return records


def record_pose(record) -> Pose:
    x, y, theta = (float(v) for v in record["start_pose"])
    return Pose(x, y, theta)


def validate_record(grid: Optional[GridMap], record, d_norm: float = D_NORM) -> None:
    """Check value ranges and, when the map is given, the replay invariant."""
    actions = np.asarray(record["actions"], dtype=np.float64)
    if np.any(np.abs(actions) > 1.0):
        raise SampleValidationError("normalized actions outside [-1, 1]")
    if np.any(np.linalg.norm(actions * d_norm, axis=1) > D_STEP_MAX + 1e-6):
        raise SampleValidationError(f"waypoint step longer than {D_STEP_MAX} cells")
    label = float(record["dist_label"])
    if not 0.0 <= label <= 1.0:
        raise SampleValidationError(f"dist_label {label} outside [0, 1]")
    if label == 0.0 and not np.array_equal(record["goal"], record["context"][-1]):
        raise SampleValidationError("dist_label 0 but goal differs from the current observation")
    for name in ("context", "goal"):
        values = np.asarray(record[name])
        if not np.all((values == 0) | (values == 1)):
            raise SampleValidationError(f"{name} patch is not binary")
    if grid is not None and not replay_sample(grid, actions, record_pose(record), record["expert"], d_norm):
        raise SampleValidationError("replayed actions diverge from the expert or collide")


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def generate_map_samples(config: DatasetConfig, params: MapParams, index: int) -> Tuple[np.ndarray, int]:
    """All validated records for map `index`, plus the number dropped by validation."""
    seed = map_seed(config.seed, index)
    grid = generate_map(seed, params)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
    samples: List[TrainingSample] = []
    for _ in range(config.trajs_per_map):
        start, goal, _ = sample_cell_pair(grid, rng, config.min_separation)
        path = plan_expert_path(grid, start, goal, int(rng.integers(2**31)), config.jitter)
        traj = build_trajectory(grid, path, rng, config.patch_size)
        samples.extend(slice_samples(traj, config.context, config.horizon, config.d_max, rng,
                                     config.d_norm, map_index=index))

    records = samples_to_records(samples, config.context, config.horizon, config.patch_size)
    valid = np.ones(len(records), dtype=bool)
    for i, record in enumerate(records):
        try:
            validate_record(grid, record, config.d_norm)
        except SampleValidationError as e:
            logger.warning(f"Dropping sample {i} on map seed {seed}: {e}")
            valid[i] = False
    return records[valid], int((~valid).sum())


def write_dataset(path: Union[str, Path], records: np.ndarray, P: int, H: int, S: int,
                  metadata: Dict) -> Path:
    path = Path(path)
    header = struct.pack(HEADER_FORMAT, MAGIC, VERSION, len(records), P, H, S,
                         record_dtype(P, H, S).itemsize)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(header.ljust(HEADER_SIZE, b"\0"))
            f.write(records.astype(record_dtype(P, H, S), copy=False).tobytes())
        meta_path = metadata_path_for(path)
        meta_path.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetError(f"Failed to write dataset {path}: {e}") from e
    return meta_path


def build_dataset(path: Union[str, Path], config: Optional[DatasetConfig] = None,
                  params: Optional[MapParams] = None, workers: Optional[int] = None) -> DatasetInfo:
    """Generate expert data on `config.n_maps` seeded maps and write the dataset file."""
    config = config or DatasetConfig()
    params = params or MapParams()
    config.validate()
    workers = workers or Config.WORKERS

    logger.info(f"Generating dataset: {config.n_maps} maps x {config.trajs_per_map} trajectories, seed {config.seed}")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = list(executor.map(lambda i: generate_map_samples(config, params, i), range(config.n_maps)))

    records = np.concatenate([r for r, _ in results]) if results else \
        np.zeros(0, dtype=record_dtype(config.context, config.horizon, config.patch_size))
    dropped = sum(d for _, d in results)
    seeds = [map_seed(config.seed, i) for i in range(config.n_maps)]
    metadata = {
        "format": "goalmask-nav dataset",
        "version": VERSION,
        "count": int(len(records)),
        "dropped": int(dropped),
        "dataset": asdict(config),
        "map_params": asdict(params),
        "map_seeds": seeds,
    }
    meta_path = write_dataset(path, records, config.context, config.horizon, config.patch_size, metadata)
    logger.info(f"Dataset written to {path}: {len(records)} samples, {dropped} dropped")
    return DatasetInfo(Path(path), meta_path, int(len(records)), int(dropped), seeds)


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------

def read_header(path: Union[str, Path]) -> Tuple[int, int, int, int]:
    """Return (count, P, H, S) from a dataset file header."""
    try:
        with open(path, "rb") as f:
            raw = f.read(HEADER_SIZE)
    except FileNotFoundError:
        raise DatasetError(f"Dataset file not found: {path}")
    if len(raw) < HEADER_SIZE:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, count, P, H, S, size = struct.unpack_from(HEADER_FORMAT, raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    if size != record_dtype(P, H, S).itemsize:
        raise DatasetFormatError(f"{path}: record size {size} does not match P={P} H={H} S={S}")
    expected = HEADER_SIZE + count * size
    actual = Path(path).stat().st_size
    if actual != expected:
        raise DatasetFormatError(f"{path}: size {actual} bytes, expected {expected}")
    return count, P, H, S


def read_dataset(path: Union[str, Path]) -> np.ndarray:
    """Memory-map the records of a dataset file (read-only)."""
    count, P, H, S = read_header(path)
    if count == 0:
        return np.zeros(0, dtype=record_dtype(P, H, S))
    return np.memmap(path, dtype=record_dtype(P, H, S), mode="r", offset=HEADER_SIZE, shape=(count,))


def read_metadata(path: Union[str, Path]) -> Dict:
    meta_path = metadata_path_for(path)
    try:
        return json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"Dataset metadata not found: {meta_path}")
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{meta_path}: {e}") from e


@dataclass
class Batch:
    context: torch.Tensor      # (B, P+1, S, S)
    goal: torch.Tensor         # (B, S, S)
    actions: torch.Tensor      # (B, H, 2)
    dist_label: torch.Tensor   # (B,)

    def __len__(self) -> int:
        return self.context.shape[0]


class SampleDataset(Dataset):
    """Torch view over dataset records (memmap-backed or in memory)."""

    def __init__(self, records: np.ndarray, d_norm: float = D_NORM, metadata: Optional[Dict] = None):
        self.records = records
        self.d_norm = d_norm
        self.metadata = metadata or {}

    @classmethod
    def open(cls, path: Union[str, Path]) -> "SampleDataset":
        metadata = read_metadata(path)
        d_norm = float(metadata.get("dataset", {}).get("d_norm", D_NORM))
        return cls(read_dataset(path), d_norm, metadata)

    @classmethod
    def from_samples(cls, samples: List[TrainingSample], P: int = CONTEXT, H: int = HORIZON,
                     S: int = PATCH_SIZE, d_norm: float = D_NORM) -> "SampleDataset":
        return cls(samples_to_records(samples, P, H, S), d_norm)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        r = self.records[index]
        return {
            "context": torch.from_numpy(np.array(r["context"])),
            "goal": torch.from_numpy(np.array(r["goal"])),
            "actions": torch.from_numpy(np.array(r["actions"])),
            "dist_label": torch.tensor(float(r["dist_label"])),
        }

    @property
    def context_length(self) -> int:
        return self.records.dtype["context"].shape[0] - 1

    @property
    def horizon(self) -> int:
        return self.records.dtype["actions"].shape[0]

    @property
    def patch_size(self) -> int:
        return self.records.dtype["goal"].shape[0]

    def batch(self, indices, dtype: Optional[torch.dtype] = None) -> Batch:
        """Gather records into tensors of the current default dtype."""
        dtype = dtype or torch.get_default_dtype()
        rows = self.records[np.asarray(indices)]
        return Batch(
            context=torch.as_tensor(np.array(rows["context"]), dtype=dtype),
            goal=torch.as_tensor(np.array(rows["goal"]), dtype=dtype),
            actions=torch.as_tensor(np.array(rows["actions"]), dtype=dtype),
            dist_label=torch.as_tensor(np.array(rows["dist_label"]), dtype=dtype),
        )

    def map_indices(self) -> np.ndarray:
        return np.asarray(self.records["map_index"]).astype(np.int64)


def split_holdout(dataset: SampleDataset, fraction: float, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Split sample indices by map so held-out samples come from unseen maps."""
    if not 0.0 < fraction < 1.0:
        raise DatasetError(f"holdout fraction {fraction} outside (0, 1)")
    maps = dataset.map_indices()
    unique = np.unique(maps)
    rng = np.random.default_rng(seed)
    n_hold = max(1, int(round(len(unique) * fraction))) if len(unique) > 1 else 0
    held = rng.permutation(unique)[:n_hold]
    mask = np.isin(maps, held)
    if not mask.any():
        # Single-map datasets fall back to a sample-level split.
        order = rng.permutation(len(maps))
        cut = max(1, int(round(len(maps) * fraction)))
        mask = np.zeros(len(maps), dtype=bool)
        mask[order[:cut]] = True
    return np.nonzero(~mask)[0], np.nonzero(mask)[0]


def validate_dataset(path: Union[str, Path], params: Optional[MapParams] = None) -> int:
    """Validate every record of a dataset file, replaying against regenerated maps. Returns the count."""
    metadata = read_metadata(path)
    records = read_dataset(path)
    if params is None:
        params = MapParams(**metadata["map_params"])
    seeds = metadata["map_seeds"]
    d_norm = float(metadata["dataset"]["d_norm"])
    maps: Dict[int, GridMap] = {}
    for record in records:
        index = int(record["map_index"])
        if index not in maps:
            maps[index] = generate_map(seeds[index], params)
        validate_record(maps[index], record, d_norm)
    return len(records)
