"""
Multimodality probe at a T-junction.

The robot stands in the stem of a T-junction facing the cross corridor. The
probe draws undirected samples plus goal-conditioned samples for a goal image
at the end of each branch, classifies every sample by the sign of its summed
lateral displacement (positive = left branch), rolls each one out in the
simulator to count collisions, and renders the three fans side by side.
"""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .logger import logger
from .policy import PolicyModel, sample_actions
from .render import DIRECTED_COLOR, UNDIRECTED_COLOR, render_fans
from .world import GridMap, Pose, junction_cells, render_observation, step_waypoints, t_junction_map


# Junction probe geometry on t_junction_map
PROBE_POSE = Pose(15.5, 17.5, math.pi / 2)
LEFT_GOAL = Pose(5.5, 21.5, math.pi)
RIGHT_GOAL = Pose(26.5, 21.5, 0.0)
LATERAL_DEADBAND = 0.5


class ProbeError(Exception):
    """Raised when a probe map or pose cannot support the probe."""
    pass


@dataclass(frozen=True)
class ProbeConfig:
    checkpoint: str = "checkpoints/unified.ckpt"
    map: str = ""
    n_samples: int = 100
    out_dir: str = "probe"
    seed: int = 0


@dataclass
class FanStats:
    left: float
    right: float
    collision_rate: float


@dataclass
class ProbeReport:
    n_samples: int
    undirected: FanStats
    goal_left: FanStats
    goal_right: FanStats
    image: str = ""

    def to_dict(self) -> Dict:
        return asdict(self)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def branch_of(sample: np.ndarray, deadband: float = LATERAL_DEADBAND) -> int:
    """+1 for the left branch, -1 for the right, 0 when the lateral drift is inside the deadband."""
    lateral = float(np.asarray(sample)[:, 1].sum())
    if lateral > deadband:
        return 1
    if lateral < -deadband:
        return -1
    return 0


def fan_stats(grid: GridMap, pose: Pose, samples: np.ndarray) -> FanStats:
    branches = np.array([branch_of(s) for s in samples])
    collided = [step_waypoints(grid, pose, s).collisions > 0 for s in samples]
    n = len(samples)
    return FanStats(
        left=float(np.sum(branches > 0) / n),
        right=float(np.sum(branches < 0) / n),
        collision_rate=float(np.mean(collided)),
    )


def stem_context(grid: GridMap, pose: Pose, frames: int, patch_size: int) -> np.ndarray:
    """Observations along the straight approach to `pose`, oldest first."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    context = []
    for back in range(frames - 1, -1, -1):
        p = Pose(pose.x - back * c, pose.y - back * s, pose.theta)
        context.append(render_observation(grid, p if grid.is_free(p.cell) else pose, patch_size))
    return np.stack(context)


def probe_multimodality(model: PolicyModel, grid: Optional[GridMap] = None, n_samples: int = 100,
                        seed: int = 0, out_dir: Optional[Union[str, Path]] = None,
                        pose: Pose = PROBE_POSE, goals: Tuple[Pose, Pose] = (LEFT_GOAL, RIGHT_GOAL)) -> ProbeReport:
    grid = t_junction_map() if grid is None else grid
    if len(junction_cells(grid)) == 0:
        raise ProbeError(f"probe map (seed {grid.seed}) has no junction cell")
    for p in (pose, *goals):
        if not grid.is_free(p.cell):
            raise ProbeError(f"probe pose ({p.x}, {p.y}) is not on a free cell")

    size = model.config.patch_size
    context = stem_context(grid, pose, model.config.context + 1, size)
    generator = torch.Generator().manual_seed(seed)
    undirected = sample_actions(model, context, None, 1, n_samples, generator)
    left_goal, right_goal = (render_observation(grid, g, size) for g in goals)
    toward_left = sample_actions(model, context, left_goal, 0, n_samples, generator)
    toward_right = sample_actions(model, context, right_goal, 0, n_samples, generator)

    report = ProbeReport(
        n_samples=n_samples,
        undirected=fan_stats(grid, pose, undirected),
        goal_left=fan_stats(grid, pose, toward_left),
        goal_right=fan_stats(grid, pose, toward_right),
    )
    logger.info(f"Probe: undirected left/right {report.undirected.left:.2f}/{report.undirected.right:.2f}, "
                f"goal-left on branch {report.goal_left.left:.2f}, goal-right on branch {report.goal_right.right:.2f}")

    if out_dir is not None:
        out_dir = Path(out_dir)
        image = render_fans(grid, pose, [
            ("undirected", undirected, UNDIRECTED_COLOR),
            ("goal: left branch", toward_left, DIRECTED_COLOR),
            ("goal: right branch", toward_right, DIRECTED_COLOR),
        ], out_dir / "probe-fans.svg")
        report.image = str(image)
        report.write(out_dir / "probe.json")
    return report


def run_probe(config: ProbeConfig) -> ProbeReport:
    model = load_checkpoint(config.checkpoint)
    grid = GridMap.load(config.map) if config.map else t_junction_map()
    return probe_multimodality(model, grid, config.n_samples, config.seed, config.out_dir)
