"""
Expert demonstrations on grid maps.

An expert plans a jittered shortest path between two free cells, turns it into
a sub-cell trajectory (one smoothing pass at corners, arc-length resampling at
roughly one cell per step) and renders an egocentric observation at every
pose. Trajectories are sliced into supervised samples: an observation context,
a hindsight goal drawn from later in the same trajectory, the next H waypoint
offsets in the current pose's frame and the normalized temporal distance.

Per-cell jitter makes distinct seeds choose distinct near-optimal routes, which
is where the multimodality of the action data comes from.
"""

import heapq
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .logger import logger
from .world import (
    Cell,
    GridMap,
    Pose,
    render_observation,
    segment_contact,
    step_waypoints,
    PATCH_SIZE,
)


CONTEXT = 3
HORIZON = 8
D_MAX = 20
D_NORM = 2.0
D_STEP_MAX = 2.0
JITTER = 0.3
STEP_RANGE = (0.8, 1.2)
REPLAY_TOLERANCE = 1e-3


class ExpertError(Exception):
    """Base exception for expert demonstrations."""
    pass


class UnreachableGoalError(ExpertError):
    """Raised when the goal cell cannot be reached from the start cell."""
    pass


@dataclass
class Trajectory:
    positions: np.ndarray       # (L, 2) float64
    headings: np.ndarray        # (L,)
    observations: np.ndarray    # (L, S, S) uint8
    map_seed: int = 0
    path: List[Cell] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.positions)

    def pose(self, i: int) -> Pose:
        return Pose(float(self.positions[i, 0]), float(self.positions[i, 1]), float(self.headings[i]))

    @property
    def poses(self) -> List[Pose]:
        return [self.pose(i) for i in range(len(self))]


@dataclass
class TrainingSample:
    obs_context: np.ndarray      # (P+1, S, S) uint8, oldest first
    goal_obs: np.ndarray         # (S, S) uint8
    actions: np.ndarray          # (H, 2) normalized egocentric deltas
    dist_label: float
    start_pose: Pose
    expert_positions: np.ndarray  # (H, 2) world positions the actions should reach
    map_index: int = 0
    index: int = 0
    goal_index: int = 0


def normalize_actions(deltas: np.ndarray, d_norm: float = D_NORM) -> np.ndarray:
    return np.asarray(deltas, dtype=np.float64) / d_norm


def denormalize_actions(actions: np.ndarray, d_norm: float = D_NORM) -> np.ndarray:
    return np.asarray(actions, dtype=np.float64) * d_norm


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

def plan_expert_path(grid: GridMap, start: Cell, goal: Cell, jitter_seed: int,
                     jitter: float = JITTER) -> List[Cell]:
    """Dijkstra over free cells with entry cost 1 + U[0, jitter] per cell."""
    for cell in (start, goal):
        if not grid.is_free(cell):
            raise ExpertError(f"Cell {cell} is occupied or outside the map")
    start, goal = (int(start[0]), int(start[1])), (int(goal[0]), int(goal[1]))
    if start == goal:
        return [start]

    rng = np.random.default_rng(jitter_seed)
    cost = 1.0 + rng.uniform(0.0, jitter, size=(grid.height, grid.width)) if jitter > 0 \
        else np.ones((grid.height, grid.width))

    best = {start: 0.0}
    parent = {start: None}
    heap = [(0.0, start)]
    while heap:
        d, cell = heapq.heappop(heap)
        if cell == goal:
            break
        if d > best[cell]:
            continue
        x, y = cell
        for nxt in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if not grid.is_free(nxt):
                continue
            nd = d + cost[nxt[1], nxt[0]]
            if nd < best.get(nxt, math.inf):
                best[nxt] = nd
                parent[nxt] = cell
                heapq.heappush(heap, (nd, nxt))

    if goal not in parent:
        raise UnreachableGoalError(f"Goal {goal} unreachable from {start} on map seed {grid.seed}")
    path = [goal]
    while path[-1] != start:
        path.append(parent[path[-1]])
    return path[::-1]


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def _polyline_collides(grid: GridMap, points: np.ndarray, i: int) -> bool:
    return segment_contact(grid, points[i], points[i + 1]) is not None


def smooth_path(grid: GridMap, points: np.ndarray) -> np.ndarray:
    """One midpoint-averaging pass; points whose new segments collide keep their original position."""
    smoothed = points.copy()
    if len(points) > 2:
        smoothed[1:-1] = 0.5 * points[1:-1] + 0.25 * (points[:-2] + points[2:])
    reverted = 0
    while True:
        bad = [i for i in range(len(smoothed) - 1) if _polyline_collides(grid, smoothed, i)]
        if not bad:
            break
        for i in bad:
            for j in (i, i + 1):
                if not np.array_equal(smoothed[j], points[j]):
                    smoothed[j] = points[j]
                    reverted += 1
    if reverted:
        logger.warning(f"Smoothing reverted {reverted} points on map seed {grid.seed}")
    return smoothed


def resample_polyline(grid: GridMap, points: np.ndarray, step: float) -> np.ndarray:
    """Resample at arc-length `step`, keeping polyline vertices where a chord would collide."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 0])
    points, seg = points[keep], seg[seg > 0]
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = float(arc[-1])
    if total == 0.0:
        return points[:1].copy()

    stations = list(np.arange(0.0, total, step))
    if total - stations[-1] < 0.3 * step and len(stations) > 1:
        stations[-1] = total
    else:
        stations.append(total)

    def at(s: float) -> np.ndarray:
        k = min(int(np.searchsorted(arc, s, side="right")) - 1, len(seg) - 1)
        return points[k] + (points[k + 1] - points[k]) * ((s - arc[k]) / seg[k])

    out = [points[0]]
    for s_prev, s_next in zip(stations[:-1], stations[1:]):
        target = at(s_next)
        if segment_contact(grid, out[-1], target) is not None:
            inner = np.nonzero((arc > s_prev) & (arc < s_next))[0]
            out.extend(points[k] for k in inner)
        out.append(target)
    return np.array(out)


def build_trajectory(grid: GridMap, path: Sequence[Cell], rng: np.random.Generator,
                     patch_size: int = PATCH_SIZE) -> Trajectory:
    """Turn a 4-connected cell path into a smoothed, resampled trajectory with observations."""
    if len(path) < 2:
        raise ExpertError("A trajectory needs a path of at least two cells")
    centers = np.array([(x + 0.5, y + 0.5) for x, y in path], dtype=np.float64)
    smoothed = smooth_path(grid, centers)
    step = float(rng.uniform(*STEP_RANGE))
    positions = resample_polyline(grid, smoothed, step)

    diffs = np.diff(positions, axis=0)
    headings = np.empty(len(positions))
    headings[1:] = np.arctan2(diffs[:, 1], diffs[:, 0])
    headings[0] = headings[1]
    headings = (headings + np.pi) % (2 * np.pi) - np.pi

    observations = np.stack([
        render_observation(grid, Pose(p[0], p[1], h), patch_size) for p, h in zip(positions, headings)
    ])
    return Trajectory(positions, headings, observations, grid.seed, list(path))


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

def egocentric_deltas(positions: np.ndarray, theta: float) -> np.ndarray:
    """Per-step world deltas of `positions` (first row is the origin) rotated by -theta."""
    world = np.diff(positions, axis=0)
    c, s = math.cos(theta), math.sin(theta)
    return np.stack([c * world[:, 0] + s * world[:, 1], -s * world[:, 0] + c * world[:, 1]], axis=1)


def slice_samples(traj: Trajectory, P: int = CONTEXT, H: int = HORIZON, d_max: int = D_MAX,
                  rng: Optional[np.random.Generator] = None, d_norm: float = D_NORM,
                  map_index: int = 0) -> List[TrainingSample]:
    """One sample per t in [P, L-H-1] with a hindsight goal in [t, min(t+d_max, L-1)]."""
    rng = rng if rng is not None else np.random.default_rng(0)
    L = len(traj)
    if L < P + H + 1:
        return []
    samples = []
    for t in range(P, L - H):
        context = [max(0, t - P + j) for j in range(P + 1)]
        g = int(rng.integers(t, min(t + d_max, L - 1) + 1))
        deltas = egocentric_deltas(traj.positions[t:t + H + 1], float(traj.headings[t]))
        samples.append(TrainingSample(
            obs_context=traj.observations[context],
            goal_obs=traj.observations[g],
            actions=normalize_actions(deltas, d_norm),
            dist_label=(g - t) / d_max,
            start_pose=traj.pose(t),
            expert_positions=traj.positions[t + 1:t + H + 1].copy(),
            map_index=map_index,
            index=t,
            goal_index=g,
        ))
    return samples


def replay_sample(grid: GridMap, actions: np.ndarray, start_pose: Pose, expected: np.ndarray,
                  d_norm: float = D_NORM, tolerance: float = REPLAY_TOLERANCE) -> bool:
    """Replay denormalized actions from `start_pose`; True when collision-free and on the expert's poses."""
    deltas = denormalize_actions(actions, d_norm)
    result = step_waypoints(grid, start_pose, deltas)
    if result.collisions or len(result.trace) != len(expected):
        return False
    return bool(np.max(np.abs(result.trace - np.asarray(expected))) <= tolerance)


def lateral_first_steps(trajectories: Sequence[Trajectory], t: int, horizon: int = HORIZON) -> np.ndarray:
    """Lateral component of the summed egocentric offsets over the first `horizon` steps from index t."""
    lateral = []
    for traj in trajectories:
        end = min(len(traj) - 1, t + horizon)
        deltas = egocentric_deltas(traj.positions[t:end + 1], float(traj.headings[t]))
        lateral.append(float(deltas[:, 1].sum()))
    return np.array(lateral)
