"""
Topological memory and the exploration / navigation loops around the policy.

The graph stores one observation per node; edges carry predicted temporal
distances. Localization, node creation, subgoal advancement and goal detection
all go through the policy's goal-conditioned distance head. Simulator poses are
kept on nodes and in episode traces for metrics and rendering only; no
planning decision reads them.

Exploration, per decision:
  1. render the observation and update the graph
  2. predicted distance to the goal below detect_threshold: goal-conditioned
     sampling on the goal image
  3. otherwise pick the frontier node; when it is not the current node, head
     for the next hop of the shortest path to it (undirected samples scored
     against a goal-conditioned reference for that hop)
  4. otherwise sample undirected and pick the least-visited heading sector
  5. execute the first exec_steps waypoints

Graph text format:
    topograph v1 <nodes> <edges> <current>
    node <id> <created> <visits> <x> <y> <theta> <sector counts,...> <packed observation hex>
    edge <a> <b> <weight>
Nodes without a stored pose write "-" for x, y and theta.
"""

import heapq
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import torch

from .logger import logger
from .policy import PolicyModel, predict_pair_distances, sample_actions
from .world import GridMap, Pose, render_observation, step_waypoints


class NavigationError(Exception):
    """Base exception for navigation errors."""
    pass


class EmptyGraphError(NavigationError):
    """Raised when navigation is attempted without a topological graph."""
    pass


class EmptySampleSetError(NavigationError):
    """Raised when candidate selection receives no samples."""
    pass


class GraphFormatError(NavigationError):
    """Raised when a graph dump cannot be parsed."""
    pass


@dataclass(frozen=True)
class NavigatorConfig:
    add_threshold: float = 5.0
    edge_threshold: float = 8.0
    detect_threshold: float = 10.0
    waypoint_threshold: float = 3.0
    exec_steps: int = 4
    n_samples: int = 8
    budget: int = 500
    success_radius: float = 3.0
    sectors: int = 8
    min_edge_weight: float = 1e-3
    store_poses: bool = True


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------

@dataclass
class TopoNode:
    id: int
    observation: np.ndarray
    created_step: int
    visits: int = 1
    pose: Optional[Pose] = None
    sectors: np.ndarray = field(default_factory=lambda: np.zeros(8, dtype=np.int64))

    def __post_init__(self):
        self.observation = np.array(self.observation, dtype=np.uint8)
        self.observation.setflags(write=False)


class TopoGraph:
    """Undirected weighted graph of observation nodes on top of networkx."""

    def __init__(self, sectors: int = 8):
        self.graph = nx.Graph()
        self.current: Optional[int] = None
        self.sectors = sectors
        self._next_id = 0

    def __len__(self) -> int:
        return self.graph.number_of_nodes()

    def add_node(self, observation: np.ndarray, step: int, pose: Optional[Pose] = None) -> int:
        node = TopoNode(self._next_id, observation, step, pose=pose, sectors=np.zeros(self.sectors, dtype=np.int64))
        self.graph.add_node(node.id, node=node)
        self._next_id += 1
        return node.id

    def add_edge(self, a: int, b: int, weight: float) -> None:
        self.graph.add_edge(a, b, weight=float(weight))

    def node(self, node_id: int) -> TopoNode:
        return self.graph.nodes[node_id]["node"]

    @property
    def node_ids(self) -> List[int]:
        return sorted(self.graph.nodes)

    @property
    def nodes(self) -> List[TopoNode]:
        return [self.node(i) for i in self.node_ids]

    def observations(self) -> np.ndarray:
        return np.stack([n.observation for n in self.nodes])

    def edges(self) -> List[Tuple[int, int, float]]:
        return sorted((min(a, b), max(a, b), d["weight"]) for a, b, d in self.graph.edges(data=True))

    def is_connected(self) -> bool:
        return len(self) > 0 and nx.is_connected(self.graph)

    def strip_poses(self) -> None:
        for node in self.nodes:
            node.pose = None

    # Dump / load

    def to_text(self) -> str:
        lines = [f"topograph v1 {len(self)} {self.graph.number_of_edges()} "
                 f"{-1 if self.current is None else self.current}"]
        for n in self.nodes:
            pose = "- - -" if n.pose is None else f"{n.pose.x:.17g} {n.pose.y:.17g} {n.pose.theta:.17g}"
            sectors = ",".join(str(int(v)) for v in n.sectors)
            packed = np.packbits(n.observation.reshape(-1)).tobytes().hex()
            lines.append(f"node {n.id} {n.created_step} {n.visits} {pose} {sectors} {n.observation.shape[0]}:{packed}")
        for a, b, w in self.edges():
            lines.append(f"edge {a} {b} {w:.17g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TopoGraph":
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines:
            raise GraphFormatError("empty graph dump")
        head = lines[0].split()
        if len(head) != 5 or head[:2] != ["topograph", "v1"]:
            raise GraphFormatError(f"bad header line: {lines[0]!r}")
        try:
            n_nodes, n_edges, current = int(head[2]), int(head[3]), int(head[4])
            graph = None
            for line in lines[1:]:
                parts = line.split()
                if parts[0] == "node":
                    node_id, created, visits = int(parts[1]), int(parts[2]), int(parts[3])
                    pose = None if parts[4] == "-" else Pose(float(parts[4]), float(parts[5]), float(parts[6]))
                    sectors = np.array([int(v) for v in parts[7].split(",")], dtype=np.int64)
                    size, packed = parts[8].split(":")
                    size = int(size)
                    bits = np.unpackbits(np.frombuffer(bytes.fromhex(packed), dtype=np.uint8))[:size * size]
                    if graph is None:
                        graph = cls(sectors=len(sectors))
                    node = TopoNode(node_id, bits.reshape(size, size), created, visits, pose, sectors)
                    graph.graph.add_node(node_id, node=node)
                    graph._next_id = max(graph._next_id, node_id + 1)
                elif parts[0] == "edge":
                    if graph is None:
                        raise GraphFormatError("edge line before any node line")
                    graph.add_edge(int(parts[1]), int(parts[2]), float(parts[3]))
                else:
                    raise GraphFormatError(f"unknown line kind {parts[0]!r}")
        except (ValueError, IndexError) as e:
            raise GraphFormatError(f"malformed graph dump: {e}") from e
        graph = graph or cls()
        if len(graph) != n_nodes or graph.graph.number_of_edges() != n_edges:
            raise GraphFormatError(f"header declares {n_nodes} nodes / {n_edges} edges, found {len(graph)} / "
                                   f"{graph.graph.number_of_edges()}")
        graph.current = None if current < 0 else current
        return graph

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TopoGraph":
        try:
            return cls.from_text(Path(path).read_text())
        except FileNotFoundError:
            raise GraphFormatError(f"Graph file not found: {path}")


def shortest_path(graph: TopoGraph, src: int, dst: int) -> Tuple[Optional[List[int]], float]:
    """Minimum-weight path; equal weights resolve to the lexicographically smallest id sequence.

    Returns (None, inf) when dst is unreachable.
    """
    if src not in graph.graph or dst not in graph.graph:
        raise NavigationError(f"unknown node in shortest_path({src}, {dst})")
    heap: List[Tuple[float, Tuple[int, ...]]] = [(0.0, (src,))]
    settled = set()
    while heap:
        dist, path = heapq.heappop(heap)
        node = path[-1]
        if node in settled:
            continue
        settled.add(node)
        if node == dst:
            return list(path), dist
        for nxt, data in graph.graph.adj[node].items():
            if nxt not in settled:
                heapq.heappush(heap, (dist + data["weight"], path + (nxt,)))
    return None, math.inf


def select_frontier(graph: TopoGraph) -> int:
    """Least-visited node; ties go to the most recently created, then the highest id."""
    if len(graph) == 0:
        raise EmptyGraphError("cannot select a frontier on an empty graph")
    return min(graph.nodes, key=lambda n: (n.visits, -n.created_step, -n.id)).id


def endpoint_sector(endpoint: np.ndarray, sectors: int = 8) -> int:
    angle = math.atan2(float(endpoint[1]), float(endpoint[0]))
    return int(math.floor((angle + math.pi) / (2 * math.pi) * sectors)) % sectors


def select_action_candidate(samples: np.ndarray, mode: str, reference: Optional[np.ndarray] = None,
                            histogram: Optional[np.ndarray] = None) -> int:
    """Pick one of the sampled action sequences.

    directed: endpoint nearest to the reference sequence's endpoint.
    free: endpoint in the least-visited heading sector, ties by largest displacement.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or len(samples) == 0:
        raise EmptySampleSetError("no action samples to select from")
    endpoints = samples.sum(axis=1)
    if mode == "directed":
        if reference is None:
            raise NavigationError("directed selection needs a reference sequence")
        target = np.asarray(reference, dtype=np.float64).reshape(-1, 2).sum(axis=0)
        return int(np.argmin(np.linalg.norm(endpoints - target, axis=1)))
    if mode == "free":
        histogram = np.zeros(8, dtype=np.int64) if histogram is None else np.asarray(histogram)
        displacement = np.linalg.norm(endpoints, axis=1)
        keys = [(int(histogram[endpoint_sector(e, len(histogram))]), -float(d), i)
                for i, (e, d) in enumerate(zip(endpoints, displacement))]
        return min(keys)[2]
    raise NavigationError(f"unknown selection mode '{mode}'")


# ---------------------------------------------------------------------------
# Distances and graph updates
# ---------------------------------------------------------------------------

def predict_pair_distance(model: PolicyModel, obs_context: np.ndarray, node_obs: np.ndarray) -> float:
    """Predicted temporal distance in timesteps, clamped at 0."""
    return float(distances_to(model, obs_context, np.asarray(node_obs)[None])[0])


def distances_to(model: PolicyModel, obs_context: np.ndarray, observations: np.ndarray) -> np.ndarray:
    normalized = predict_pair_distances(model, obs_context, observations)
    return np.maximum(normalized, 0.0) * model.config.d_max


def node_distances_to_goal(model: PolicyModel, graph: TopoGraph, goal_obs: np.ndarray) -> np.ndarray:
    """Predicted distance from each stored node observation (as a repeated context) to the goal."""
    P1 = model.config.context + 1
    out = []
    for node in graph.nodes:
        context = np.repeat(node.observation[None], P1, axis=0)
        out.append(distances_to(model, context, np.asarray(goal_obs)[None])[0])
    return np.array(out)


@dataclass
class GraphUpdate:
    node: int
    created: bool
    distance: float


def update_graph(graph: TopoGraph, model: PolicyModel, obs_context: np.ndarray, step: int,
                 config: NavigatorConfig, pose: Optional[Pose] = None) -> GraphUpdate:
    """Localize against every node; add a node when nothing is within add_threshold."""
    ids = graph.node_ids
    current_obs = np.asarray(obs_context)[-1]
    stored_pose = pose if config.store_poses else None
    if not ids:
        graph.current = graph.add_node(current_obs, step, stored_pose)
        return GraphUpdate(graph.current, True, 0.0)

    distances = distances_to(model, obs_context, graph.observations())
    best = int(np.argmin(distances))
    if distances[best] > config.add_threshold:
        previous = graph.current
        new_id = graph.add_node(current_obs, step, stored_pose)
        clamp = lambda d: min(max(float(d), config.min_edge_weight), config.edge_threshold)
        if previous is not None:
            graph.add_edge(new_id, previous, clamp(distances[ids.index(previous)]))
        for node_id, d in zip(ids, distances):
            if node_id != previous and d <= config.edge_threshold:
                graph.add_edge(new_id, node_id, clamp(d))
        graph.current = new_id
        logger.debug(f"Graph node {new_id} added at step {step} (nearest {distances[best]:.2f})")
        return GraphUpdate(new_id, True, float(distances[best]))

    graph.current = ids[best]
    graph.node(ids[best]).visits += 1
    return GraphUpdate(ids[best], False, float(distances[best]))


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    pose: Tuple[float, float, float]
    mode: int
    chosen: int
    node: int
    subgoal: int
    samples: List
    executed: List
    collisions: int


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    collisions: int
    distance_traveled: float
    trace: List[StepRecord] = field(default_factory=list)
    method: str = ""
    phase: str = ""
    map_seed: int = 0
    start: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    goal_cell: Tuple[int, int] = (0, 0)
    graph_nodes: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict) -> "EpisodeResult":
        data = dict(data)
        data["trace"] = [StepRecord(**{**s, "pose": tuple(s["pose"])}) for s in data.get("trace", [])]
        data["start"] = tuple(data.get("start", (0.0, 0.0, 0.0)))
        data["goal_cell"] = tuple(data.get("goal_cell", (0, 0)))
        return cls(**data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EpisodeResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


class _Episode:
    """Shared bookkeeping for one episode: pose, context window, counters and trace."""

    def __init__(self, grid: GridMap, model: PolicyModel, start: Pose, goal_cell: Tuple[int, int],
                 config: NavigatorConfig, seed: int, goal_model: Optional[PolicyModel] = None):
        self.grid = grid
        self.model = model
        self.goal_model = model if model.supports_goal else (goal_model or model)
        self.config = config
        self.pose = start
        self.goal_cell = goal_cell
        self.generator = torch.Generator().manual_seed(seed)
        self.history: deque = deque(maxlen=model.config.context + 1)
        self.steps = 0
        self.collisions = 0
        self.travelled = 0.0
        self.trace: List[StepRecord] = []

    def reached(self) -> bool:
        gx, gy = self.goal_cell[0] + 0.5, self.goal_cell[1] + 0.5
        return math.hypot(self.pose.x - gx, self.pose.y - gy) <= self.config.success_radius

    def exhausted(self) -> bool:
        return self.steps >= self.config.budget

    def observe(self) -> np.ndarray:
        obs = render_observation(self.grid, self.pose, self.model.config.patch_size)
        if not self.history:
            self.history.extend([obs] * self.history.maxlen)
        else:
            self.history.append(obs)
        return np.stack(self.history)

    def sample(self, context: np.ndarray, goal: Optional[np.ndarray], mask: int) -> np.ndarray:
        model = self.model if mask else self.goal_model
        return sample_actions(model, context, goal, mask, self.config.n_samples, self.generator)

    def execute(self, samples: np.ndarray, chosen: int, mode: int, node: int, subgoal: int) -> None:
        count = min(self.config.exec_steps, self.config.budget - self.steps)
        deltas = samples[chosen][:count]
        result = step_waypoints(self.grid, self.pose, deltas)
        self.trace.append(StepRecord(
            step=self.steps,
            pose=(self.pose.x, self.pose.y, self.pose.theta),
            mode=mode,
            chosen=chosen,
            node=node,
            subgoal=subgoal,
            samples=samples.tolist(),
            executed=result.trace.tolist(),
            collisions=result.collisions,
        ))
        self.steps += count
        self.collisions += result.collisions
        self.travelled += result.distance_traveled
        self.pose = result.pose

    def result(self, success: bool, graph: Optional[TopoGraph], start: Pose) -> EpisodeResult:
        return EpisodeResult(
            success=success,
            steps=self.steps,
            collisions=self.collisions,
            distance_traveled=self.travelled,
            trace=self.trace,
            map_seed=self.grid.seed,
            start=(start.x, start.y, start.theta),
            goal_cell=tuple(self.goal_cell),
            graph_nodes=len(graph) if graph is not None else 0,
        )


def nearest_to_mean(samples: np.ndarray) -> int:
    return select_action_candidate(samples, "directed", samples.mean(axis=0))


def explore_episode(grid: GridMap, model: PolicyModel, start: Pose, goal_cell: Tuple[int, int],
                    goal_obs: np.ndarray, config: Optional[NavigatorConfig] = None, seed: int = 0,
                    distance_model: Optional[PolicyModel] = None) -> Tuple[EpisodeResult, TopoGraph]:
    """Explore with a growing topological graph until the goal image is reached or the budget runs out."""
    config = config or NavigatorConfig()
    distance_model = distance_model or model
    model.require_mode(1)
    episode = _Episode(grid, model, start, goal_cell, config, seed, distance_model)
    graph = TopoGraph(config.sectors)

    while True:
        if episode.reached():
            success = True
            break
        if episode.exhausted():
            success = False
            break
        context = episode.observe()
        update = update_graph(graph, distance_model, context, episode.steps, config, episode.pose)
        goal_distance = predict_pair_distance(distance_model, context, goal_obs)

        if goal_distance < config.detect_threshold:
            samples = episode.sample(context, goal_obs, 0)
            episode.execute(samples, nearest_to_mean(samples), 0, update.node, -1)
            continue

        frontier = select_frontier(graph)
        path, _ = shortest_path(graph, graph.current, frontier) if frontier != graph.current else (None, 0.0)
        if path is not None and len(path) > 1:
            hop = path[1]
            reference = episode.sample(context, graph.node(hop).observation, 0).mean(axis=0)
            samples = episode.sample(context, None, 1)
            chosen = select_action_candidate(samples, "directed", reference)
            episode.execute(samples, chosen, 0, update.node, hop)
        else:
            samples = episode.sample(context, None, 1)
            node = graph.node(graph.current)
            chosen = select_action_candidate(samples, "free", histogram=node.sectors)
            node.sectors[endpoint_sector(samples[chosen].sum(axis=0), len(node.sectors))] += 1
            episode.execute(samples, chosen, 1, update.node, -1)

    result = episode.result(success, graph, start)
    logger.info(f"Exploration on map {grid.seed}: success={success}, steps={result.steps}, "
                f"collisions={result.collisions}, nodes={len(graph)}")
    return result, graph


def navigate_episode(grid: GridMap, graph: TopoGraph, model: PolicyModel, start: Pose, goal_cell: Tuple[int, int],
                     goal_obs: np.ndarray, config: Optional[NavigatorConfig] = None, seed: int = 0,
                     distance_model: Optional[PolicyModel] = None) -> EpisodeResult:
    """Reach a goal image through subgoals planned on a previously built graph.

    The graph is only read; its `current` node is left as it was.
    """
    config = config or NavigatorConfig()
    distance_model = distance_model or model
    if graph is None or len(graph) == 0:
        raise EmptyGraphError("navigation needs a non-empty topological graph")
    model.require_mode(0)
    episode = _Episode(grid, model, start, goal_cell, config, seed, distance_model)
    ids = graph.node_ids
    chain: List[int] = []
    current = -1
    planned = False

    while True:
        if episode.reached():
            success = True
            break
        if episode.exhausted():
            success = False
            break
        context = episode.observe()
        if not planned:
            here = ids[int(np.argmin(distances_to(distance_model, context, graph.observations())))]
            target = ids[int(np.argmin(node_distances_to_goal(distance_model, graph, goal_obs)))]
            path, _ = shortest_path(graph, here, target)
            chain = list(path[1:]) if path else []
            current = here
            planned = True
            logger.debug(f"Navigation plan on map {grid.seed}: {[here] + chain}")

        while chain and predict_pair_distance(distance_model, context, graph.node(chain[0]).observation) \
                < config.waypoint_threshold:
            current = chain.pop(0)

        subgoal = chain[0] if chain else -1
        condition = graph.node(subgoal).observation if chain else goal_obs
        samples = episode.sample(context, condition, 0)
        episode.execute(samples, nearest_to_mean(samples), 0, current, subgoal)

    result = episode.result(success, graph, start)
    logger.info(f"Navigation on map {grid.seed}: success={success}, steps={result.steps}, "
                f"collisions={result.collisions}")
    return result


def build_graph_from_route(grid: GridMap, model: PolicyModel, route: Sequence[Pose],
                           config: Optional[NavigatorConfig] = None, steps: Optional[Sequence[int]] = None) -> TopoGraph:
    """Rebuild a topological graph along recorded poses with `model`'s distance head."""
    config = config or NavigatorConfig()
    graph = TopoGraph(config.sectors)
    history: deque = deque(maxlen=model.config.context + 1)
    for i, pose in enumerate(route):
        obs = render_observation(grid, pose, model.config.patch_size)
        if not history:
            history.extend([obs] * history.maxlen)
        else:
            history.append(obs)
        update_graph(graph, model, np.stack(history), steps[i] if steps is not None else i, config, pose)
    return graph


def route_from_result(result: EpisodeResult) -> Tuple[List[Pose], List[int]]:
    """Decision poses and their step indices from an episode trace."""
    poses = [Pose(*record.pose) for record in result.trace]
    return poses, [record.step for record in result.trace]
