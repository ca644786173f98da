"""
Tests for map generation, observation rendering and waypoint kinematics.
"""

import math

import numpy as np
import pytest

from goalmask_nav import world
from goalmask_nav.world import (
    CONTACT_MARGIN,
    GridMap,
    InvalidPoseError,
    MapFormatError,
    MapGenerationError,
    MapParams,
    Pose,
    WorldError,
    distance_field,
    generate_map,
    geodesic_distance,
    is_connected,
    junction_cells,
    open_map,
    render_observation,
    sample_cell_pair,
    segment_contact,
    step_waypoints,
    t_junction_map,
    two_corridor_map,
    wrap_angle,
)


class TestGeneration:
    def test_same_seed_same_map(self):
        assert generate_map(5) == generate_map(5)

    def test_different_seeds_differ(self):
        assert generate_map(5) != generate_map(6)

    def test_failure_names_the_condition(self, monkeypatch):
        monkeypatch.setattr(world, "MAX_GENERATION_ATTEMPTS", 3)
        monkeypatch.setattr(world, "is_connected", lambda occupancy: True)
        monkeypatch.setattr(world, "junction_cells", lambda grid: np.zeros((0, 2), dtype=int))
        with pytest.raises(MapGenerationError, match="0 disconnected, 3 without a junction cell"):
            generate_map(5)
        monkeypatch.setattr(world, "is_connected", lambda occupancy: False)
        with pytest.raises(MapGenerationError, match="3 disconnected, 0 without a junction cell"):
            generate_map(5)

    def test_border_connectivity_and_junctions(self, small_map):
        occ = small_map.occupancy
        assert occ[0, :].all() and occ[-1, :].all() and occ[:, 0].all() and occ[:, -1].all()
        assert is_connected(occ)
        assert len(junction_cells(small_map)) > 0

    def test_occupancy_is_read_only(self, small_map):
        with pytest.raises(ValueError):
            small_map.occupancy[1, 1] = 1

    def test_invalid_params(self):
        with pytest.raises(WorldError):
            generate_map(0, MapParams(width=8))
        with pytest.raises(WorldError):
            generate_map(0, MapParams(min_room=12, max_room=6))

    def test_small_params(self):
        params = MapParams(width=32, height=32, room_count=3, min_room=5, max_room=9)
        grid = generate_map(3, params)
        assert (grid.width, grid.height) == (32, 32)
        assert is_connected(grid.occupancy)


class TestMapText:
    def test_text_round_trip(self, small_map, tmp_path):
        path = tmp_path / "map.txt"
        small_map.save(path)
        assert GridMap.load(path) == small_map
        assert path.read_text().startswith(f"gridmap v1 64 64 {small_map.seed}\n")

    def test_from_rows_accepts_symbols(self):
        grid = GridMap.from_rows(["###", "#.#", "###"])
        assert grid.is_free((1, 1))
        assert not grid.is_free((0, 1))
        assert not grid.is_free((5, 5))

    def test_bad_header(self):
        with pytest.raises(MapFormatError):
            GridMap.from_text("gridmap v2 3 3 0\n111\n101\n111\n")

    def test_ragged_rows(self):
        with pytest.raises(MapFormatError):
            GridMap.from_rows(["111", "10", "111"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(MapFormatError):
            GridMap.load(tmp_path / "nope.txt")


class TestObservation:
    def test_patch_shape_and_values(self, small_map):
        cell = tuple(int(v) for v in small_map.free_cells()[0])
        patch = render_observation(small_map, Pose.at_cell(cell, 0.3))
        assert patch.shape == (24, 24)
        assert set(np.unique(patch)) <= {0, 1}

    def test_centre_is_robot_cell(self, empty_map):
        patch = render_observation(empty_map, Pose(16.5, 16.5, 0.0), 24)
        assert patch[12, 12] == 0

    def test_heading_alignment(self, empty_map):
        # wall at x = 31 lies 14.5 cells ahead when facing +x from x = 16.5
        east = render_observation(empty_map, Pose(16.5, 16.5, 0.0), 32)
        assert east[16, 16 + 15] == 1
        assert east[16, 16 + 14] == 0
        # facing +y the top wall at y = 31 is the same distance ahead
        north = render_observation(empty_map, Pose(16.5, 16.5, math.pi / 2), 32)
        assert north[16, 16 + 15] == 1
        assert north[16, 16 + 14] == 0

    def test_left_is_increasing_row(self):
        grid = GridMap.from_rows([
            "11111",
            "10001",
            "10001",
            "10001",
            "11111",
        ])
        patch = render_observation(grid, Pose(2.5, 2.5, 0.0), 5)
        # facing +x, left is +y; row 4 of the patch samples world y = 4 (wall)
        assert patch[4, 2] == 1
        assert patch[3, 2] == 0

    def test_outside_renders_occupied(self, empty_map):
        patch = render_observation(empty_map, Pose(1.5, 1.5, 0.0), 24)
        assert patch[12, 0] == 1

    def test_occupied_pose_rejected(self, empty_map):
        with pytest.raises(InvalidPoseError):
            render_observation(empty_map, Pose(0.5, 0.5, 0.0))

    def test_pure(self, small_map):
        cell = tuple(int(v) for v in small_map.free_cells()[10])
        pose = Pose.at_cell(cell, 1.0)
        assert np.array_equal(render_observation(small_map, pose), render_observation(small_map, pose))


class TestKinematics:
    def test_free_motion(self, empty_map):
        result = step_waypoints(empty_map, Pose(10.5, 10.5, 0.0), [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert result.collisions == 0
        assert result.distance_traveled == pytest.approx(3.0)
        assert result.pose.x == pytest.approx(12.5)
        assert result.pose.y == pytest.approx(11.5)
        assert result.pose.theta == pytest.approx(math.pi / 2)
        assert result.trace.shape == (3, 2)

    def test_deltas_are_in_start_frame(self, empty_map):
        result = step_waypoints(empty_map, Pose(10.5, 10.5, math.pi / 2), [[1.0, 0.0], [1.0, 0.0]])
        assert result.pose.x == pytest.approx(10.5)
        assert result.pose.y == pytest.approx(12.5)

    def test_contact_stops_short_and_truncates(self, empty_map):
        result = step_waypoints(empty_map, Pose(29.5, 10.5, 0.0), [[2.0, 0.0], [1.0, 0.0]])
        assert result.collisions == 1
        assert len(result.trace) == 1
        assert result.pose.x == pytest.approx(31.0 - CONTACT_MARGIN)
        assert empty_map.is_free(result.pose.cell)

    def test_empty_deltas(self, empty_map):
        with pytest.raises(WorldError):
            step_waypoints(empty_map, Pose(10.5, 10.5, 0.0), np.zeros((0, 2)))

    def test_zero_step_keeps_heading(self, empty_map):
        result = step_waypoints(empty_map, Pose(10.5, 10.5, 0.7), [[0.0, 0.0]])
        assert result.pose.theta == pytest.approx(0.7)
        assert result.distance_traveled == 0.0

    def test_segment_contact_corner(self):
        grid = GridMap.from_rows([
            "1111",
            "1001",
            "1011",
            "1111",
        ])
        # diagonal through the shared corner of (1,1), (2,1), (1,2), (2,2); (2,2) is occupied
        assert segment_contact(grid, (1.5, 1.5), (2.5, 2.5)) == pytest.approx(0.5)
        assert segment_contact(grid, (1.5, 1.5), (2.5, 1.5)) is None


class TestGeodesics:
    def test_distance_field(self, empty_map):
        field = distance_field(empty_map, (1, 1))
        assert field[1, 1] == 0
        assert field[1, 5] == 4
        assert field[0, 0] == -1

    def test_two_corridors_are_equal(self):
        grid = two_corridor_map()
        assert geodesic_distance(grid, (2, 6), (21, 6)) == 4 + 19 + 4

    def test_unreachable(self):
        grid = GridMap.from_rows(["11111", "10101", "11111"])
        assert geodesic_distance(grid, (1, 1), (3, 1)) is None

    def test_sample_pair_respects_separation(self, small_map, rng):
        start, goal, dist = sample_cell_pair(small_map, rng, 20)
        assert dist >= 20
        assert geodesic_distance(small_map, start, goal) == dist

    def test_sample_pair_impossible(self, rng):
        grid = GridMap.from_rows(["1111", "1001", "1111"])
        with pytest.raises(WorldError):
            sample_cell_pair(grid, rng, 5, attempts=3)


class TestFixtures:
    def test_open_map(self):
        grid = open_map(20, 10)
        assert (grid.width, grid.height) == (20, 10)
        assert int(grid.occupancy.sum()) == 2 * 20 + 2 * 10 - 4
        assert is_connected(grid.occupancy)

    def test_t_junction(self):
        grid = t_junction_map()
        assert is_connected(grid.occupancy)
        assert len(junction_cells(grid)) > 0
        assert grid.is_free((15, 17)) and grid.is_free((5, 21)) and grid.is_free((26, 21))

    def test_wrap_angle(self):
        assert wrap_angle(math.pi) == pytest.approx(-math.pi)
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
        assert wrap_angle(0.25) == pytest.approx(0.25)
