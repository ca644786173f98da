"""
Tests for dataset generation, the binary file format and the torch view.
"""

import numpy as np
import pytest
import torch

from goalmask_nav.dataset import (
    HEADER_SIZE,
    DatasetConfig,
    DatasetError,
    DatasetFormatError,
    SampleDataset,
    SampleValidationError,
    build_dataset,
    map_seed,
    read_dataset,
    read_header,
    read_metadata,
    split_holdout,
    validate_dataset,
    validate_record,
)
from goalmask_nav.world import MapParams, generate_map


SMALL_MAPS = MapParams(width=32, height=32, room_count=3, min_room=5, max_room=9)
SMALL_DATA = DatasetConfig(n_maps=3, trajs_per_map=2, seed=1, patch_size=12, min_separation=14)


@pytest.fixture(scope="module")
def dataset_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "dataset.bin"
    build_dataset(path, SMALL_DATA, SMALL_MAPS, workers=2)
    return path


class TestGeneration:
    @pytest.mark.slow
    def test_default_scale_sample_count(self, tmp_path):
        info = build_dataset(tmp_path / "dataset.bin")
        assert len(info.map_seeds) == DatasetConfig().n_maps
        assert info.count >= 30_000
        assert len(read_dataset(info.path)) == info.count

    def test_header_and_metadata(self, dataset_file):
        count, P, H, S = read_header(dataset_file)
        assert (P, H, S) == (3, 8, 12)
        assert count > 0
        meta = read_metadata(dataset_file)
        assert meta["count"] == count
        assert meta["map_seeds"] == [map_seed(1, i) for i in range(3)]
        assert meta["dataset"]["patch_size"] == 12

    def test_deterministic_across_worker_counts(self, dataset_file, tmp_path):
        other = tmp_path / "again.bin"
        build_dataset(other, SMALL_DATA, SMALL_MAPS, workers=1)
        assert other.read_bytes() == dataset_file.read_bytes()
        assert other.with_suffix(".json").read_text() == dataset_file.with_suffix(".json").read_text()

    def test_every_record_validates(self, dataset_file):
        assert validate_dataset(dataset_file, SMALL_MAPS) == read_header(dataset_file)[0]

    def test_records_are_binary_and_bounded(self, dataset_file):
        records = read_dataset(dataset_file)
        assert set(np.unique(records["context"])) <= {0.0, 1.0}
        assert np.abs(records["actions"]).max() <= 1.0
        assert records["dist_label"].min() >= 0.0 and records["dist_label"].max() <= 1.0

    def test_invalid_config(self):
        with pytest.raises(DatasetError):
            DatasetConfig(n_maps=0).validate()


class TestFormat:
    def test_bad_magic(self, dataset_file, tmp_path):
        broken = tmp_path / "broken.bin"
        raw = bytearray(dataset_file.read_bytes())
        raw[:8] = b"XXXXXXXX"
        broken.write_bytes(bytes(raw))
        with pytest.raises(DatasetFormatError):
            read_header(broken)

    def test_truncated(self, dataset_file, tmp_path):
        broken = tmp_path / "short.bin"
        broken.write_bytes(dataset_file.read_bytes()[:-7])
        with pytest.raises(DatasetFormatError):
            read_dataset(broken)

    def test_header_only_file(self, tmp_path):
        broken = tmp_path / "tiny.bin"
        broken.write_bytes(b"GMNDATA1")
        with pytest.raises(DatasetFormatError):
            read_header(broken)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            read_header(tmp_path / "missing.bin")

    def test_payload_offset(self, dataset_file):
        count, P, H, S = read_header(dataset_file)
        records = read_dataset(dataset_file)
        assert dataset_file.stat().st_size == HEADER_SIZE + count * records.dtype.itemsize


class TestValidation:
    def _record(self, dataset_file):
        return np.array(read_dataset(dataset_file)[:1])[0]

    def test_label_out_of_range(self, dataset_file):
        record = self._record(dataset_file)
        record["dist_label"] = 1.5
        with pytest.raises(SampleValidationError):
            validate_record(None, record)

    def test_zero_label_needs_current_goal(self, dataset_file):
        record = self._record(dataset_file)
        record["dist_label"] = 0.0
        record["goal"] = 1.0 - record["context"][-1]
        with pytest.raises(SampleValidationError):
            validate_record(None, record)

    def test_non_binary_patch(self, dataset_file):
        record = self._record(dataset_file)
        record["goal"][0, 0] = 0.5
        with pytest.raises(SampleValidationError):
            validate_record(None, record)

    def test_replay_mismatch(self, dataset_file):
        record = self._record(dataset_file)
        grid = generate_map(read_metadata(dataset_file)["map_seeds"][int(record["map_index"])], SMALL_MAPS)
        validate_record(grid, record)
        record["expert"][-1] += 0.5
        with pytest.raises(SampleValidationError):
            validate_record(grid, record)


class TestSampleDataset:
    def test_item_and_batch(self, dataset_file):
        dataset = SampleDataset.open(dataset_file)
        assert (dataset.context_length, dataset.horizon, dataset.patch_size) == (3, 8, 12)
        item = dataset[0]
        assert item["context"].shape == (4, 12, 12)
        assert item["actions"].shape == (8, 2)
        batch = dataset.batch([0, 1, 2], dtype=torch.float64)
        assert len(batch) == 3
        assert batch.goal.dtype == torch.float64
        assert batch.dist_label.shape == (3,)

    def test_holdout_split_is_by_map(self, dataset_file):
        dataset = SampleDataset.open(dataset_file)
        train_idx, held_idx = split_holdout(dataset, 0.34, seed=0)
        assert len(train_idx) + len(held_idx) == len(dataset)
        maps = dataset.map_indices()
        assert not set(maps[train_idx]) & set(maps[held_idx])
        assert len(held_idx) > 0

    def test_holdout_fraction_range(self, dataset_file):
        with pytest.raises(DatasetError):
            split_holdout(SampleDataset.open(dataset_file), 1.0)
