"""
Benchmark harness: exploration and navigation episodes on held-out maps.

For every method and held-out map the harness runs one exploration episode
and, reusing the graph built there, one navigation episode toward the image
of a node created around the middle of the exploration. Methods:

    unified     p_m = 0.5 diffusion model, explores and navigates
    explore     p_m = 1 model; explores, with the unified model supplying
                distances and goal-conditioned samples; no navigation
    goal        p_m = 0 model; navigates on a graph rebuilt with its own
                distance head along the unified model's exploration route
    regression  point-estimate head, explores and navigates

Every episode is written as JSON under <out>/episodes/<method>/; the results
table is a reduction over those files and can be recomputed from them alone.
"""

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import stats

from .checkpoint import MissingCheckpointError, load_checkpoint
from .config import Config
from .dataset import read_metadata
from .logger import logger
from .navigator import (
    EpisodeResult,
    NavigatorConfig,
    TopoGraph,
    build_graph_from_route,
    explore_episode,
    navigate_episode,
    route_from_result,
)
from .policy import PolicyModel
from .world import GridMap, MapParams, Pose, generate_map, render_observation, sample_cell_pair


HELDOUT_SEED_START = 900_000
METHODS = ("unified", "explore", "goal", "regression")
CSV_FIELDS = [
    "method", "params",
    "explore_episodes", "explore_success", "explore_low", "explore_high", "explore_collisions",
    "navigate_episodes", "navigate_success", "navigate_low", "navigate_high", "navigate_collisions",
]


class BenchmarkError(Exception):
    """Base exception for benchmark runs."""
    pass


@dataclass(frozen=True)
class BenchmarkConfig:
    n_maps: int = 20
    map_seed_start: int = HELDOUT_SEED_START
    episodes_per_map: int = 1
    min_separation: int = 25
    unified: str = "checkpoints/unified.ckpt"
    explore: str = "checkpoints/explore.ckpt"
    goal: str = "checkpoints/goal.ckpt"
    regression: str = "checkpoints/regression.ckpt"
    dataset: str = "data/dataset.bin"
    out_dir: str = "benchmark"
    seed: int = 0
    workers: int = 0

    def validate(self) -> None:
        if self.n_maps < 1 or self.episodes_per_map < 1:
            raise BenchmarkError("benchmark needs at least one map and one episode per map")
        if not self.unified:
            raise BenchmarkError("the unified checkpoint is required")

    @property
    def map_seeds(self) -> List[int]:
        return [self.map_seed_start + i for i in range(self.n_maps)]

    def checkpoint_paths(self) -> Dict[str, str]:
        return {m: getattr(self, m) for m in METHODS if getattr(self, m)}


@dataclass
class MethodRow:
    method: str
    params: int
    explore_episodes: int = 0
    explore_success: float = float("nan")
    explore_low: float = float("nan")
    explore_high: float = float("nan")
    explore_collisions: float = float("nan")
    navigate_episodes: int = 0
    navigate_success: float = float("nan")
    navigate_low: float = float("nan")
    navigate_high: float = float("nan")
    navigate_collisions: float = float("nan")


@dataclass
class ResultsTable:
    rows: List[MethodRow] = field(default_factory=list)

    def row(self, method: str) -> MethodRow:
        for row in self.rows:
            if row.method == method:
                return row
        raise KeyError(method)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for row in self.rows:
            values = asdict(row)
            writer.writerow([_format(values[name]) for name in CSV_FIELDS])
        return buffer.getvalue()

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path


def _format(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else f"{value:.4f}"
    return str(value)


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return float("nan"), float("nan")
    z = float(stats.norm.ppf(0.5 + confidence / 2))
    p = successes / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def aggregate(method: str, params: int, explore: List[EpisodeResult], navigate: List[EpisodeResult]) -> MethodRow:
    row = MethodRow(method=method, params=params)
    if explore:
        wins = sum(r.success for r in explore)
        row.explore_episodes = len(explore)
        row.explore_success = wins / len(explore)
        row.explore_low, row.explore_high = wilson_interval(wins, len(explore))
        row.explore_collisions = float(np.mean([r.collisions for r in explore]))
    if navigate:
        wins = sum(r.success for r in navigate)
        row.navigate_episodes = len(navigate)
        row.navigate_success = wins / len(navigate)
        row.navigate_low, row.navigate_high = wilson_interval(wins, len(navigate))
        row.navigate_collisions = float(np.mean([r.collisions for r in navigate]))
    return row


# ---------------------------------------------------------------------------
# Episode setup
# ---------------------------------------------------------------------------

@dataclass
class EpisodeSetup:
    map_seed: int
    index: int
    start: Pose
    goal_cell: Tuple[int, int]
    goal_obs: np.ndarray
    seed: int


def episode_setups(grid: GridMap, config: BenchmarkConfig, patch_size: int) -> List[EpisodeSetup]:
    setups = []
    for e in range(config.episodes_per_map):
        rng = np.random.default_rng([config.seed, grid.seed, e])
        start_cell, goal_cell, _ = sample_cell_pair(grid, rng, config.min_separation)
        start = Pose.at_cell(start_cell, float(rng.uniform(-math.pi, math.pi)))
        goal_pose = Pose.at_cell(goal_cell, float(rng.uniform(-math.pi, math.pi)))
        setups.append(EpisodeSetup(grid.seed, e, start, goal_cell, render_observation(grid, goal_pose, patch_size),
                                   int(rng.integers(2**31))))
    return setups


def navigation_goal(graph: TopoGraph, exploration: EpisodeResult, start: Pose,
                    radius: float) -> Optional[Tuple[Tuple[int, int], np.ndarray]]:
    """Goal cell and image of the node created closest to mid-exploration, away from the start."""
    middle = exploration.steps / 2
    candidates = [n for n in graph.nodes if n.pose is not None
                  and math.hypot(n.pose.x - start.x, n.pose.y - start.y) > radius]
    if not candidates:
        return None
    node = min(candidates, key=lambda n: (abs(n.created_step - middle), n.id))
    return node.pose.cell, node.observation


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

def load_models(config: BenchmarkConfig) -> Dict[str, PolicyModel]:
    paths = config.checkpoint_paths()
    missing = [p for p in paths.values() if not Path(p).exists()]
    if missing:
        raise MissingCheckpointError(f"Missing checkpoint(s): {', '.join(missing)}")
    modes = {"unified": None, "explore": "undirected", "goal": "goal", "regression": None}
    return {name: load_checkpoint(path, modes[name]) for name, path in paths.items()}


def check_disjoint(config: BenchmarkConfig) -> None:
    if not config.dataset:
        return
    if not Path(config.dataset).exists():
        logger.warning(f"{config.dataset} not found, held-out seed check skipped")
        return
    used = set(read_metadata(config.dataset).get("map_seeds", []))
    overlap = sorted(used.intersection(config.map_seeds))
    if overlap:
        raise BenchmarkError(f"held-out map seeds overlap the training data: {overlap[:5]}")


def _episode_path(out_dir: Path, method: str, setup: EpisodeSetup, phase: str) -> Path:
    return out_dir / "episodes" / method / f"{setup.map_seed}-{setup.index}-{phase}.json"


def _save(result: EpisodeResult, path: Path, method: str, phase: str) -> None:
    result.method, result.phase = method, phase
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(result.to_json())


def run_map(grid: GridMap, models: Dict[str, PolicyModel], config: BenchmarkConfig,
            nav_config: NavigatorConfig, out_dir: Path) -> None:
    unified = models["unified"]
    graphs_dir = out_dir / "graphs"
    for setup in episode_setups(grid, config, unified.config.patch_size):
        unified_run: Optional[Tuple[EpisodeResult, TopoGraph]] = None
        for method, model in models.items():
            if method == "goal":
                continue
            result, graph = explore_episode(grid, model, setup.start, setup.goal_cell, setup.goal_obs, nav_config,
                                            setup.seed,
                                            distance_model=unified if method == "explore" else model)
            _save(result, _episode_path(out_dir, method, setup, "explore"), method, "explore")
            (graphs_dir / method).mkdir(parents=True, exist_ok=True)
            graph.dump(graphs_dir / method / f"{setup.map_seed}-{setup.index}.graph")
            if method == "unified":
                unified_run = (result, graph)
            if method == "explore":
                continue
            _navigate(grid, graph, result, model, method, setup, nav_config, out_dir)

        if "goal" in models and unified_run is not None:
            poses, steps = route_from_result(unified_run[0])
            graph = build_graph_from_route(grid, models["goal"], poses, nav_config, steps)
            (graphs_dir / "goal").mkdir(parents=True, exist_ok=True)
            graph.dump(graphs_dir / "goal" / f"{setup.map_seed}-{setup.index}.graph")
            _navigate(grid, graph, unified_run[0], models["goal"], "goal", setup, nav_config, out_dir)


def _navigate(grid: GridMap, graph: TopoGraph, exploration: EpisodeResult, model: PolicyModel, method: str,
              setup: EpisodeSetup, nav_config: NavigatorConfig, out_dir: Path) -> None:
    target = navigation_goal(graph, exploration, setup.start, nav_config.success_radius)
    if target is None:
        logger.warning(f"{method} on map {setup.map_seed}: no graph node away from the start, navigation skipped")
        return
    goal_cell, goal_obs = target
    result = navigate_episode(grid, graph, model, setup.start, goal_cell, goal_obs, nav_config, setup.seed + 1)
    _save(result, _episode_path(out_dir, method, setup, "navigate"), method, "navigate")


def run_benchmark(config: BenchmarkConfig, nav_config: Optional[NavigatorConfig] = None,
                  params: Optional[MapParams] = None) -> ResultsTable:
    """Run every method on every held-out map and write records plus results.csv."""
    config.validate()
    nav_config = nav_config or NavigatorConfig()
    params = params or MapParams()
    check_disjoint(config)
    models = load_models(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    run_params = {
        "parameters": {name: model.parameter_count() for name, model in models.items()},
        "map_seeds": config.map_seeds,
        "episodes_per_map": config.episodes_per_map,
    }
    (out_dir / "params.json").write_text(json.dumps(run_params, indent=2, sort_keys=True) + "\n")

    logger.info(f"Benchmark: {len(models)} methods on {config.n_maps} held-out maps from seed {config.map_seed_start}")
    workers = config.workers or Config.WORKERS
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(run_map, generate_map(s, params), models, config, nav_config, out_dir)
                   for s in config.map_seeds]
        for future in futures:
            future.result()
    return recompute_results(out_dir, config)


def recompute_results(out_dir: Union[str, Path], config: Optional[BenchmarkConfig] = None) -> ResultsTable:
    """Rebuild the results table from the episode records on disk and rewrite results.csv.

    Only episodes of the run's held-out maps count: those of `config` when
    given, otherwise the ones listed in params.json. Records left over from a
    run over other maps are ignored.
    """
    out_dir = Path(out_dir)
    params_path = out_dir / "params.json"
    if not params_path.exists():
        raise BenchmarkError(f"{params_path} not found; run the benchmark first")
    try:
        run_params = json.loads(params_path.read_text())
        counts = run_params["parameters"]
        seeds = config.map_seeds if config is not None else run_params["map_seeds"]
        episodes = config.episodes_per_map if config is not None else run_params["episodes_per_map"]
    except (ValueError, KeyError, TypeError) as e:
        raise BenchmarkError(f"{params_path} is malformed: {e}")
    wanted = {f"{seed}-{index}" for seed in seeds for index in range(int(episodes))}

    table = ResultsTable()
    for method in METHODS:
        if method not in counts:
            continue
        records = sorted(p for p in (out_dir / "episodes" / method).glob("*.json")
                         if p.stem.rsplit("-", 1)[0] in wanted)
        loaded = [EpisodeResult.load(p) for p in records]
        explore = [r for r in loaded if r.phase == "explore"]
        navigate = [r for r in loaded if r.phase == "navigate"]
        row = aggregate(method, int(counts[method]), explore, navigate)
        table.rows.append(row)
        logger.info(f"{method}: explore {row.explore_success:.3f} ({row.explore_episodes}), "
                    f"navigate {row.navigate_success:.3f} ({row.navigate_episodes})")
    table.write(out_dir / "results.csv")
    return table


def generate_heldout_maps(config: BenchmarkConfig, out_dir: Union[str, Path],
                          params: Optional[MapParams] = None) -> Path:
    """Write every held-out map as a gridmap file plus an index listing seed and file name."""
    params = params or MapParams()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for seed in config.map_seeds:
        name = f"map-{seed}.txt"
        generate_map(seed, params).save(out_dir / name)
        lines.append(f"{seed} {name}")
    index = out_dir / "index.txt"
    index.write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote {len(lines)} held-out maps to {out_dir}")
    return index
