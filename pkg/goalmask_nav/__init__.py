"""
goalmask-nav - one diffusion policy for both exploration and goal-reaching.

A transformer encodes recent egocentric observations together with an
optional goal image; masking the goal token switches the same network
between undirected exploration and goal-conditioned navigation. A 1D
conditional U-Net denoises waypoint sequences from that context, and a
topological graph planner drives frontier exploration and subgoal
navigation in simulated occupancy-grid worlds.
"""

from .config import Config
from .policy import PolicyConfig, PolicyModel, build_policy, sample_actions
from .world import GridMap, MapParams, Pose, generate_map

__version__ = "0.1.0"
__all__ = [
    "Config",
    "GridMap",
    "MapParams",
    "PolicyConfig",
    "PolicyModel",
    "Pose",
    "build_policy",
    "generate_map",
    "sample_actions",
]
