"""
SVG rendering of episode rollouts and action-sample fans.

Color semantics:
    goldenrod   undirected samples (mode 1)
    green       goal-directed samples (mode 0)
    blue        the action the planner selected; one polyline per trace step,
                with SVG id "selected-<step index>"

Figures are built with the object-oriented matplotlib API (no pyplot state) and
saved with a fixed hash salt and no date metadata, so identical inputs give
identical bytes.
"""

from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import matplotlib
from matplotlib.figure import Figure
import numpy as np

from .logger import logger
from .navigator import EpisodeResult, TopoGraph
from .world import GridMap, Pose


UNDIRECTED_COLOR = "goldenrod"
DIRECTED_COLOR = "green"
SELECTED_COLOR = "blue"
SVG_SETTINGS = {"svg.hashsalt": "goalmask-nav", "svg.fonttype": "path"}


class RenderError(Exception):
    """Raised when a record cannot be drawn on the given map."""
    pass


def fan_points(pose: Union[Pose, Sequence[float]], deltas: np.ndarray) -> np.ndarray:
    """World-frame polyline (H+1, 2) of per-step egocentric offsets starting at `pose`."""
    x, y, theta = (pose.x, pose.y, pose.theta) if isinstance(pose, Pose) else pose
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 2)
    c, s = np.cos(theta), np.sin(theta)
    world = np.stack([deltas[:, 0] * c - deltas[:, 1] * s, deltas[:, 0] * s + deltas[:, 1] * c], axis=1)
    return np.vstack([[x, y], np.array([x, y]) + np.cumsum(world, axis=0)])


def _map_axes(fig: Figure, grid: GridMap, position: Tuple[int, int, int] = (1, 1, 1)):
    ax = fig.add_subplot(*position)
    ax.imshow(grid.occupancy, cmap="Greys", origin="lower", interpolation="nearest",
              extent=(0, grid.width, 0, grid.height), vmin=0, vmax=1)
    ax.set_xlim(0, grid.width)
    ax.set_ylim(0, grid.height)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    return ax


def _save(fig: Figure, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(SVG_SETTINGS):
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def _check_record(record: EpisodeResult, grid: GridMap) -> None:
    if record.map_seed != grid.seed:
        raise RenderError(f"record is for map seed {record.map_seed}, map has seed {grid.seed}")
    for step in record.trace:
        x, y = step.pose[0], step.pose[1]
        if not (0 <= x < grid.width and 0 <= y < grid.height):
            raise RenderError(f"trace step {step.step} at ({x:.2f}, {y:.2f}) lies outside the "
                              f"{grid.width}x{grid.height} map")


def render_rollout(record: EpisodeResult, grid: GridMap, graph: Optional[TopoGraph],
                   path: Union[str, Path]) -> Path:
    _check_record(record, grid)
    fig = Figure(figsize=(6, 6 * grid.height / grid.width))
    ax = _map_axes(fig, grid)
    ax.set_title(f"{record.method or 'episode'} {record.phase} map {record.map_seed}: "
                 f"{'success' if record.success else 'failure'}, {record.steps} steps, {record.collisions} collisions",
                 fontsize=8)

    if graph is not None:
        located = {n.id: n.pose for n in graph.nodes if n.pose is not None}
        for a, b, _ in graph.edges():
            if a in located and b in located:
                ax.plot([located[a].x, located[b].x], [located[a].y, located[b].y],
                        color="gray", linewidth=0.6, zorder=2)
        if located:
            ids = sorted(located)
            ax.scatter([located[i].x for i in ids], [located[i].y for i in ids], s=10, color="black", zorder=3)

    for i, step in enumerate(record.trace):
        color = UNDIRECTED_COLOR if step.mode == 1 else DIRECTED_COLOR
        for sample in step.samples:
            points = fan_points(step.pose, np.asarray(sample))
            ax.plot(points[:, 0], points[:, 1], color=color, linewidth=0.5, alpha=0.6, zorder=4)
        chosen = fan_points(step.pose, np.asarray(step.samples[step.chosen]))
        line, = ax.plot(chosen[:, 0], chosen[:, 1], color=SELECTED_COLOR, linewidth=1.0, zorder=5)
        line.set_gid(f"selected-{i}")

    if record.trace:
        route = [record.trace[0].pose[:2]]
        for step in record.trace:
            route.extend(step.executed)
        route = np.asarray(route)
        ax.plot(route[:, 0], route[:, 1], color="red", linewidth=1.2, zorder=6)

    ax.plot(record.start[0], record.start[1], marker="o", color="red", zorder=7)
    ax.plot(record.goal_cell[0] + 0.5, record.goal_cell[1] + 0.5, marker="*", markersize=10, color="green", zorder=7)
    out = _save(fig, path)
    logger.info(f"Rendered {len(record.trace)} steps of map {record.map_seed} to {out}")
    return out


def render_fans(grid: GridMap, pose: Pose, panels: Sequence[Tuple[str, np.ndarray, str]],
                path: Union[str, Path]) -> Path:
    """Side-by-side sample fans from one pose; each panel is (title, samples (n, H, 2), color)."""
    fig = Figure(figsize=(4 * len(panels), 4))
    for k, (title, samples, color) in enumerate(panels):
        ax = _map_axes(fig, grid, (1, len(panels), k + 1))
        for sample in samples:
            points = fan_points(pose, sample)
            ax.plot(points[:, 0], points[:, 1], color=color, linewidth=0.6, alpha=0.7)
        ax.plot(pose.x, pose.y, marker="o", color="red")
        ax.set_title(title, fontsize=9)
    return _save(fig, path)
