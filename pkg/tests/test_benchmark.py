"""
Tests for the benchmark harness: intervals, aggregation, the results table
and a tiny end-to-end run with untrained miniature checkpoints.
"""

import json
import math

import numpy as np
import pytest

from goalmask_nav.benchmark import (
    CSV_FIELDS,
    HELDOUT_SEED_START,
    BenchmarkConfig,
    BenchmarkError,
    ResultsTable,
    aggregate,
    check_disjoint,
    episode_setups,
    generate_heldout_maps,
    load_models,
    navigation_goal,
    recompute_results,
    run_benchmark,
    wilson_interval,
)
from goalmask_nav.checkpoint import MissingCheckpointError, save_checkpoint
from goalmask_nav.navigator import EpisodeResult, NavigatorConfig, TopoGraph
from goalmask_nav.policy import PolicyConfig, build_policy
from goalmask_nav.world import GridMap, MapParams, Pose


SMALL_MAPS = MapParams(width=32, height=32, room_count=3, min_room=5, max_room=9)


def _result(success, collisions=0, phase="explore", steps=10):
    return EpisodeResult(success=success, steps=steps, collisions=collisions, distance_traveled=1.0, phase=phase)


class TestStatistics:
    def test_wilson_known_value(self):
        low, high = wilson_interval(5, 10)
        assert low == pytest.approx(0.2366, abs=1e-4)
        assert high == pytest.approx(0.7634, abs=1e-4)

    def test_wilson_edges(self):
        low, high = wilson_interval(0, 10)
        assert low == pytest.approx(0.0, abs=1e-12) and 0.0 < high < 0.35
        low, high = wilson_interval(10, 10)
        assert high == pytest.approx(1.0) and low > 0.65
        assert all(math.isnan(v) for v in wilson_interval(0, 0))

    def test_aggregate(self):
        row = aggregate("unified", 123, [_result(True, 2), _result(False, 0)], [_result(True, 1, "navigate")])
        assert row.explore_episodes == 2
        assert row.explore_success == 0.5
        assert row.explore_collisions == 1.0
        assert row.navigate_success == 1.0
        assert row.navigate_low < 0.9
        assert row.navigate_high == pytest.approx(1.0)

    def test_csv_blanks_missing_phases(self):
        table = ResultsTable([aggregate("explore", 7, [_result(True)], [])])
        lines = table.to_csv().splitlines()
        assert lines[0] == ",".join(CSV_FIELDS)
        cells = lines[1].split(",")
        assert cells[:4] == ["explore", "7", "1", "1.0000"]
        assert cells[CSV_FIELDS.index("navigate_episodes")] == "0"
        assert cells[CSV_FIELDS.index("navigate_success")] == ""


class TestSetup:
    def test_config_validation(self):
        with pytest.raises(BenchmarkError):
            BenchmarkConfig(n_maps=0).validate()
        assert BenchmarkConfig(n_maps=3).map_seeds == [HELDOUT_SEED_START + i for i in range(3)]

    def test_episode_setups_are_seeded(self, small_map):
        config = BenchmarkConfig(episodes_per_map=2, min_separation=15)
        a = episode_setups(small_map, config, 12)
        b = episode_setups(small_map, config, 12)
        assert len(a) == 2
        assert [(s.start, s.goal_cell, s.seed) for s in a] == [(s.start, s.goal_cell, s.seed) for s in b]
        assert a[0].goal_obs.shape == (12, 12)
        assert small_map.is_free(a[0].start.cell) and small_map.is_free(a[0].goal_cell)

    def test_navigation_goal_picks_mid_exploration_node(self):
        graph = TopoGraph()
        obs = np.zeros((4, 4), dtype=np.uint8)
        graph.add_node(obs, 0, Pose(5.5, 5.5))
        graph.add_node(obs, 4, Pose(6.5, 5.5))
        graph.add_node(obs, 9, Pose(15.5, 5.5))
        graph.add_node(obs, 20, Pose(25.5, 5.5))
        cell, image = navigation_goal(graph, _result(False, steps=20), Pose(5.5, 5.5), 3.0)
        assert cell == (15, 5)
        assert image.shape == (4, 4)

    def test_navigation_goal_none_near_start(self):
        graph = TopoGraph()
        graph.add_node(np.zeros((4, 4), dtype=np.uint8), 0, Pose(5.5, 5.5))
        assert navigation_goal(graph, _result(False), Pose(5.5, 5.5), 3.0) is None

    def test_missing_checkpoints_are_listed(self, tmp_path):
        config = BenchmarkConfig(unified=str(tmp_path / "u.ckpt"), explore=str(tmp_path / "x.ckpt"),
                                 goal="", regression="")
        with pytest.raises(MissingCheckpointError) as exc:
            load_models(config)
        assert "u.ckpt" in str(exc.value) and "x.ckpt" in str(exc.value)

    def test_overlapping_seeds_rejected(self, tmp_path):
        data = tmp_path / "dataset.bin"
        data.write_bytes(b"")
        data.with_suffix(".json").write_text(json.dumps({"map_seeds": [HELDOUT_SEED_START + 1]}))
        with pytest.raises(BenchmarkError):
            check_disjoint(BenchmarkConfig(n_maps=2, dataset=str(data)))
        check_disjoint(BenchmarkConfig(n_maps=1, dataset=str(data)))

    def test_heldout_maps(self, tmp_path):
        config = BenchmarkConfig(n_maps=2)
        index = generate_heldout_maps(config, tmp_path, SMALL_MAPS)
        lines = index.read_text().splitlines()
        assert lines == [f"{s} map-{s}.txt" for s in config.map_seeds]
        grid = GridMap.load(tmp_path / lines[0].split()[1])
        assert grid.seed == HELDOUT_SEED_START


class TestResults:
    def _params(self, tmp_path, seeds=(1,), episodes=1, parameters=None):
        run_params = {"parameters": parameters or {"unified": 10, "goal": 20}, "map_seeds": list(seeds),
                      "episodes_per_map": episodes}
        (tmp_path / "params.json").write_text(json.dumps(run_params))

    def _record(self, tmp_path, method, name, result):
        path = tmp_path / "episodes" / method / f"{name}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(result.to_json())

    def test_recompute_needs_params(self, tmp_path):
        with pytest.raises(BenchmarkError):
            recompute_results(tmp_path)
        (tmp_path / "params.json").write_text(json.dumps({"unified": 10}))
        with pytest.raises(BenchmarkError):
            recompute_results(tmp_path)

    def test_recompute_from_records(self, tmp_path):
        self._params(tmp_path)
        self._record(tmp_path, "unified", "1-0-explore", _result(True))
        self._record(tmp_path, "unified", "1-0-navigate", _result(False, 3, "navigate"))
        self._record(tmp_path, "goal", "1-0-navigate", _result(True, 0, "navigate"))
        table = recompute_results(tmp_path)
        assert [r.method for r in table.rows] == ["unified", "goal"]
        assert table.row("unified").navigate_collisions == 3.0
        assert table.row("goal").explore_episodes == 0
        assert (tmp_path / "results.csv").read_text() == table.to_csv()

    def test_records_from_other_runs_are_ignored(self, tmp_path):
        self._params(tmp_path, seeds=(1, 2), episodes=1, parameters={"unified": 10})
        self._record(tmp_path, "unified", "1-0-explore", _result(True))
        self._record(tmp_path, "unified", "2-0-explore", _result(True))
        self._record(tmp_path, "unified", "3-0-explore", _result(False))
        self._record(tmp_path, "unified", "1-1-explore", _result(False))
        table = recompute_results(tmp_path)
        assert table.row("unified").explore_episodes == 2
        assert table.row("unified").explore_success == 1.0
        config = BenchmarkConfig(n_maps=1, map_seed_start=3)
        assert recompute_results(tmp_path, config).row("unified").explore_success == 0.0


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpt")
    config = PolicyConfig.miniature()
    paths = {
        "unified": save_checkpoint(build_policy(config, mask_prob=0.5), root / "unified.ckpt"),
        "explore": save_checkpoint(build_policy(config, mask_prob=1.0), root / "explore.ckpt"),
        "goal": save_checkpoint(build_policy(config, mask_prob=0.0), root / "goal.ckpt"),
        "regression": save_checkpoint(build_policy(PolicyConfig.miniature(head_type="regression"), mask_prob=0.5),
                                      root / "regression.ckpt"),
    }
    return {name: str(path) for name, path in paths.items()}


def test_end_to_end_tiny_run(checkpoints, tmp_path):
    config = BenchmarkConfig(n_maps=1, min_separation=14, dataset="", out_dir=str(tmp_path), workers=1,
                             **checkpoints)
    nav = NavigatorConfig(budget=8, n_samples=2, exec_steps=4)
    table = run_benchmark(config, nav, SMALL_MAPS)
    assert [r.method for r in table.rows] == ["unified", "explore", "goal", "regression"]
    assert table.row("unified").explore_episodes == 1
    assert table.row("explore").navigate_episodes == 0
    assert table.row("goal").explore_episodes == 0
    assert table.row("goal").navigate_episodes <= 1
    seed = config.map_seeds[0]
    assert (tmp_path / "graphs" / "unified" / f"{seed}-0.graph").exists()
    assert (tmp_path / "episodes" / "unified" / f"{seed}-0-explore.json").exists()
    again = recompute_results(tmp_path)
    assert again.to_csv() == table.to_csv()
