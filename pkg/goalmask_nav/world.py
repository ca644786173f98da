"""
Deterministic 2D occupancy-grid worlds and robot kinematics.

A GridMap is a binary occupancy grid indexed [row, column] = [y, x]; cell (x, y)
covers [x, x+1) x [y, y+1) in continuous cell units. Maps are generated from
rooms joined by corridors with sparse interior clutter, always with an occupied
border and a single 4-connected free component.

The robot is a point with a heading. Observations are egocentric occupancy
patches: robot at the patch centre, patch column index increasing along the
heading and row index increasing to the robot's left. Cells outside the map
render as occupied.

Actions are sequences of per-step waypoint offsets in the frame of the pose the
sequence starts from. step_waypoints follows straight segments between
waypoints; the first segment that touches an occupied cell stops 0.1 cells
short of the contact point, counts one collision and drops the remaining
waypoints. Collisions are recorded, never raised.

Map text format:
    gridmap v1 <width> <height> <seed>
    <height rows of '0'/'1' characters, row y=0 first>
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .logger import logger


PATCH_SIZE = 24
CONTACT_MARGIN = 0.1
MAX_GENERATION_ATTEMPTS = 100
FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])

Cell = Tuple[int, int]
Observation = np.ndarray


class WorldError(Exception):
    """Base exception for world simulation errors."""
    pass


class MapGenerationError(WorldError):
    """Raised when a seed cannot produce a valid map."""
    pass


class InvalidPoseError(WorldError):
    """Raised when a pose or cell lies in occupied space or outside the map."""
    pass


class MapFormatError(WorldError):
    """Raised when a map file does not follow the gridmap v1 format."""
    pass


def wrap_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    return (theta + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True)
class MapParams:
    width: int = 64
    height: int = 64
    room_count: int = 6
    corridor_width: int = 2
    obstacle_density: float = 0.02
    min_room: int = 6
    max_room: int = 14

    def validate(self) -> None:
        if not (16 <= self.width <= 256 and 16 <= self.height <= 256):
            raise WorldError(f"Map size {self.width}x{self.height} outside [16, 256]")
        if not 1 <= self.room_count <= 16:
            raise WorldError(f"room_count {self.room_count} outside [1, 16]")
        if not 1 <= self.corridor_width <= 4:
            raise WorldError(f"corridor_width {self.corridor_width} outside [1, 4]")
        if not 0.0 <= self.obstacle_density <= 0.1:
            raise WorldError(f"obstacle_density {self.obstacle_density} outside [0, 0.1]")
        if not 3 <= self.min_room <= self.max_room <= min(self.width, self.height) - 2:
            raise WorldError(f"room size range [{self.min_room}, {self.max_room}] invalid for map size")


@dataclass(frozen=True, eq=False)
class GridMap:
    width: int
    height: int
    occupancy: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.occupancy.shape != (self.height, self.width):
            raise MapFormatError(f"occupancy shape {self.occupancy.shape} != ({self.height}, {self.width})")
        self.occupancy.setflags(write=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GridMap):
            return NotImplemented
        return (self.width, self.height, self.seed) == (other.width, other.height, other.seed) and \
            np.array_equal(self.occupancy, other.occupancy)

    def __hash__(self) -> int:
        return hash((self.width, self.height, self.seed, self.occupancy.tobytes()))

    def in_bounds(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and self.occupancy[cell[1], cell[0]] == 0

    def free_cells(self) -> np.ndarray:
        """Free cells as an (N, 2) array of (x, y), row-major order."""
        ys, xs = np.nonzero(self.occupancy == 0)
        return np.stack([xs, ys], axis=1)

    @classmethod
    def from_rows(cls, rows: Sequence[str], seed: int = 0) -> "GridMap":
        """Build a map from strings of '0'/'1' (or '.'/'#'), row y=0 first."""
        table = str.maketrans({".": "0", "#": "1"})
        rows = [r.translate(table) for r in rows]
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise MapFormatError("rows must be non-empty and of equal length")
        if any(ch not in "01" for r in rows for ch in r):
            raise MapFormatError("rows may only contain '0'/'1' characters")
        grid = np.array([[int(ch) for ch in r] for r in rows], dtype=np.uint8)
        return cls(width=grid.shape[1], height=grid.shape[0], occupancy=grid, seed=seed)

    def to_text(self) -> str:
        lines = [f"gridmap v1 {self.width} {self.height} {self.seed}"]
        lines.extend("".join(str(int(v)) for v in row) for row in self.occupancy)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GridMap":
        lines = text.splitlines()
        if not lines:
            raise MapFormatError("empty map file")
        header = lines[0].split()
        if len(header) != 5 or header[:2] != ["gridmap", "v1"]:
            raise MapFormatError(f"bad header line: {lines[0]!r}")
        try:
            width, height, seed = int(header[2]), int(header[3]), int(header[4])
        except ValueError as exc:
            raise MapFormatError(f"bad header numbers: {lines[0]!r}") from exc
        rows = lines[1:1 + height]
        if len(rows) != height or any(len(r) != width for r in rows):
            raise MapFormatError(f"expected {height} rows of width {width}")
        grid = cls.from_rows(rows, seed=seed)
        return grid

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GridMap":
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise MapFormatError(f"Map file not found: {path}")
        return cls.from_text(text)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float = 0.0

    @property
    def cell(self) -> Cell:
        return int(math.floor(self.x)), int(math.floor(self.y))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @classmethod
    def at_cell(cls, cell: Cell, theta: float = 0.0) -> "Pose":
        return cls(cell[0] + 0.5, cell[1] + 0.5, wrap_angle(theta))


@dataclass
class StepResult:
    pose: Pose
    collisions: int
    distance_traveled: float
    trace: np.ndarray  # (n_executed, 2) positions after each executed waypoint


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _carve_corridor(grid: np.ndarray, a: Cell, b: Cell, width: int, horizontal_first: bool) -> None:
    h, w = grid.shape
    (ax, ay), (bx, by) = a, b
    corner = (bx, ay) if horizontal_first else (ax, by)
    for (sx, sy), (ex, ey) in ((a, corner), (corner, b)):
        x_lo, x_hi = min(sx, ex), max(sx, ex)
        y_lo, y_hi = min(sy, ey), max(sy, ey)
        if sy == ey:
            y_hi = y_lo + width - 1
        else:
            x_hi = x_lo + width - 1
        grid[max(1, y_lo):min(h - 1, y_hi + 1), max(1, x_lo):min(w - 1, x_hi + 1)] = 0


def _carve(rng: np.random.Generator, params: MapParams) -> np.ndarray:
    h, w = params.height, params.width
    grid = np.ones((h, w), dtype=np.uint8)
    rooms: List[Tuple[int, int, int, int]] = []
    for _ in range(params.room_count * 20):
        if len(rooms) == params.room_count:
            break
        rw = int(rng.integers(params.min_room, params.max_room + 1))
        rh = int(rng.integers(params.min_room, params.max_room + 1))
        x0 = int(rng.integers(1, w - rw))
        y0 = int(rng.integers(1, h - rh))
        overlaps = any(x0 < ox + ow + 1 and ox < x0 + rw + 1 and y0 < oy + oh + 1 and oy < y0 + rh + 1
                       for ox, oy, ow, oh in rooms)
        if overlaps:
            continue
        rooms.append((x0, y0, rw, rh))
        grid[y0:y0 + rh, x0:x0 + rw] = 0

    centers = [(x0 + rw // 2, y0 + rh // 2) for x0, y0, rw, rh in rooms]
    links = list(zip(centers[:-1], centers[1:]))
    if len(centers) > 2:
        # One extra link closes a loop so some places offer two routes.
        i, j = rng.choice(len(centers), size=2, replace=False)
        links.append((centers[int(i)], centers[int(j)]))
    for a, b in links:
        _carve_corridor(grid, a, b, params.corridor_width, bool(rng.integers(0, 2)))

    if params.obstacle_density > 0:
        free = grid == 0
        open_interior = ndimage.binary_erosion(free, structure=np.ones((3, 3)), border_value=0)
        clutter = open_interior & (rng.random(grid.shape) < params.obstacle_density)
        grid[clutter] = 1
    return grid


def is_connected(occupancy: np.ndarray) -> bool:
    _, count = ndimage.label(occupancy == 0, structure=FOUR_CONNECTED)
    return count == 1


def junction_cells(grid: GridMap) -> np.ndarray:
    """Free cells with at least three free 4-neighbours, as (N, 2) (x, y)."""
    free = (grid.occupancy == 0).astype(np.int32)
    padded = np.pad(free, 1)
    neighbours = padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:]
    ys, xs = np.nonzero((free == 1) & (neighbours >= 3))
    return np.stack([xs, ys], axis=1)


def generate_map(seed: int, params: Optional[MapParams] = None) -> GridMap:
    """Generate a connected room-and-corridor map with at least one junction, deterministic per seed."""
    params = params or MapParams()
    params.validate()
    disconnected = no_junction = 0
    for attempt in range(MAX_GENERATION_ATTEMPTS):
        rng = np.random.default_rng([seed, attempt])
        occupancy = _carve(rng, params)
        if not is_connected(occupancy):
            disconnected += 1
            logger.debug(f"Map seed {seed} attempt {attempt} disconnected, retrying")
            continue
        grid = GridMap(params.width, params.height, occupancy, seed)
        if len(junction_cells(grid)) == 0:
            no_junction += 1
            logger.debug(f"Map seed {seed} attempt {attempt} has no junction cell, retrying")
            continue
        return grid
    raise MapGenerationError(f"Map generation for seed {seed} failed after {MAX_GENERATION_ATTEMPTS} attempts: "
                             f"{disconnected} disconnected, {no_junction} without a junction cell")


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------

def _require_free_pose(grid: GridMap, pose: Pose) -> None:
    if not grid.is_free(pose.cell):
        raise InvalidPoseError(f"Pose ({pose.x:.3f}, {pose.y:.3f}) lies in occupied or out-of-map cell {pose.cell}")


def render_observation(grid: GridMap, pose: Pose, size: int = PATCH_SIZE) -> Observation:
    """Egocentric S x S occupancy patch, nearest-cell sampling on the rotated grid."""
    _require_free_pose(grid, pose)
    offsets = np.arange(size) - size // 2
    forward = offsets[None, :].astype(np.float64)
    left = offsets[:, None].astype(np.float64)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    wx = np.floor(pose.x + forward * c - left * s).astype(np.int64)
    wy = np.floor(pose.y + forward * s + left * c).astype(np.int64)
    inside = (wx >= 0) & (wx < grid.width) & (wy >= 0) & (wy < grid.height)
    patch = np.ones((size, size), dtype=np.uint8)
    patch[inside] = grid.occupancy[wy[inside], wx[inside]]
    return patch


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def segment_contact(grid: GridMap, start: Sequence[float], end: Sequence[float]) -> Optional[float]:
    """Fraction t in [0, 1] where the segment first enters an occupied cell, or None.

    Grid traversal in the Amanatides-Woo style. Passing exactly through a cell
    corner counts as contact when any of the three cells beyond it is occupied.
    """
    x0, y0 = float(start[0]), float(start[1])
    dx, dy = float(end[0]) - x0, float(end[1]) - y0
    cx, cy = int(math.floor(x0)), int(math.floor(y0))
    if not grid.is_free((cx, cy)):
        return 0.0
    if dx == 0.0 and dy == 0.0:
        return None

    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    t_max_x = ((cx + (dx > 0)) - x0) / dx if dx != 0 else math.inf
    t_max_y = ((cy + (dy > 0)) - y0) / dy if dy != 0 else math.inf
    t_delta_x = abs(1.0 / dx) if dx != 0 else math.inf
    t_delta_y = abs(1.0 / dy) if dy != 0 else math.inf

    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            if t > 1.0:
                return None
            cx += step_x
            t_max_x += t_delta_x
        elif t_max_y < t_max_x:
            t = t_max_y
            if t > 1.0:
                return None
            cy += step_y
            t_max_y += t_delta_y
        else:
            t = t_max_x
            if t > 1.0:
                return None
            if not (grid.is_free((cx + step_x, cy)) and grid.is_free((cx, cy + step_y))):
                return t
            cx += step_x
            cy += step_y
            t_max_x += t_delta_x
            t_max_y += t_delta_y
        if not grid.is_free((cx, cy)):
            return t


def step_waypoints(grid: GridMap, pose: Pose, deltas, margin: float = CONTACT_MARGIN) -> StepResult:
    """Execute per-step waypoint offsets given in the frame of `pose`."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 2)
    if len(deltas) == 0:
        raise WorldError("step_waypoints needs at least one waypoint")
    _require_free_pose(grid, pose)

    c, s = math.cos(pose.theta), math.sin(pose.theta)
    position = np.array([pose.x, pose.y], dtype=np.float64)
    heading = pose.theta
    collisions, travelled = 0, 0.0
    trace: List[np.ndarray] = []

    for du, dv in deltas:
        world = np.array([du * c - dv * s, du * s + dv * c])
        length = float(math.hypot(world[0], world[1]))
        if length == 0.0:
            trace.append(position.copy())
            continue
        contact = segment_contact(grid, position, position + world)
        if contact is None:
            position = position + world
            travelled += length
            heading = math.atan2(world[1], world[0])
            trace.append(position.copy())
            continue
        stop = max(0.0, contact * length - margin)
        if stop > 0.0:
            position = position + world * (stop / length)
            travelled += stop
            heading = math.atan2(world[1], world[0])
        collisions += 1
        trace.append(position.copy())
        break

    return StepResult(
        pose=Pose(float(position[0]), float(position[1]), wrap_angle(heading)),
        collisions=collisions,
        distance_traveled=travelled,
        trace=np.array(trace).reshape(-1, 2),
    )


# ---------------------------------------------------------------------------
# Geodesics
# ---------------------------------------------------------------------------

def _require_free_cell(grid: GridMap, cell: Cell) -> None:
    if not grid.is_free(cell):
        raise InvalidPoseError(f"Cell {cell} is occupied or outside the map")


def distance_field(grid: GridMap, source: Cell) -> np.ndarray:
    """4-connected BFS distances from `source`; -1 marks unreachable or occupied cells."""
    _require_free_cell(grid, source)
    dist = np.full((grid.height, grid.width), -1, dtype=np.int64)
    sx, sy = source
    dist[sy, sx] = 0
    queue = deque([(sx, sy)])
    occ = grid.occupancy
    while queue:
        x, y = queue.popleft()
        d = dist[y, x] + 1
        for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if 0 <= nx < grid.width and 0 <= ny < grid.height and occ[ny, nx] == 0 and dist[ny, nx] < 0:
                dist[ny, nx] = d
                queue.append((nx, ny))
    return dist


def geodesic_distance(grid: GridMap, a: Cell, b: Cell) -> Optional[int]:
    """Shortest 4-connected path length in cells, or None when unreachable."""
    _require_free_cell(grid, a)
    _require_free_cell(grid, b)
    d = distance_field(grid, a)[b[1], b[0]]
    return None if d < 0 else int(d)


def sample_cell_pair(grid: GridMap, rng: np.random.Generator, min_separation: int,
                     attempts: int = 50) -> Tuple[Cell, Cell, int]:
    """Draw (start, goal) free cells at least `min_separation` geodesic cells apart."""
    free = grid.free_cells()
    for _ in range(attempts):
        sx, sy = free[int(rng.integers(len(free)))]
        field = distance_field(grid, (int(sx), int(sy)))
        ys, xs = np.nonzero(field >= min_separation)
        if len(xs) == 0:
            continue
        i = int(rng.integers(len(xs)))
        return (int(sx), int(sy)), (int(xs[i]), int(ys[i])), int(field[ys[i], xs[i]])
    raise WorldError(f"No cell pair {min_separation} cells apart found on map seed {grid.seed}")


# ---------------------------------------------------------------------------
# Fixture maps
# ---------------------------------------------------------------------------

def open_map(width: int = 32, height: int = 32, seed: int = 0) -> GridMap:
    grid = np.zeros((height, width), dtype=np.uint8)
    grid[0, :] = grid[-1, :] = 1
    grid[:, 0] = grid[:, -1] = 1
    return GridMap(width, height, grid, seed)


def t_junction_map(seed: int = 0) -> GridMap:
    """32 x 32 T-junction: a 3-wide stem rising from y=4 into a 3-wide cross corridor at y=20..22."""
    grid = np.ones((32, 32), dtype=np.uint8)
    grid[20:23, 4:28] = 0
    grid[4:23, 14:17] = 0
    return GridMap(32, 32, grid, seed)


def two_corridor_map(seed: int = 0) -> GridMap:
    """Start (2, 6) and goal (21, 6) joined by equally long top and bottom corridors."""
    grid = np.ones((13, 24), dtype=np.uint8)
    grid[2:11, 2] = 0
    grid[2:11, 21] = 0
    grid[2, 2:22] = 0
    grid[10, 2:22] = 0
    return GridMap(24, 13, grid, seed)
