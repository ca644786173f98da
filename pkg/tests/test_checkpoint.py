import json

import pytest
import torch

from goalmask_nav.checkpoint import (
    MAGIC,
    CheckpointFormatError,
    MissingCheckpointError,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
)
from goalmask_nav.policy import CapabilityError, PolicyConfig, build_policy


def test_round_trip_restores_parameters(mini_model, tmp_path):
    path = save_checkpoint(mini_model, tmp_path / "m.ckpt", {"name": "unit"})
    loaded = load_checkpoint(path)
    assert loaded.config == mini_model.config
    assert loaded.mask_prob == 0.5
    for (name, a), (_, b) in zip(mini_model.named_parameters(), loaded.named_parameters()):
        assert torch.equal(a.float(), b.float()), name


def test_saving_is_byte_stable(mini_model, tmp_path):
    a = save_checkpoint(mini_model, tmp_path / "a.ckpt", {"epoch": 1})
    b = save_checkpoint(load_checkpoint(a), tmp_path / "b.ckpt", {"epoch": 1})
    assert a.read_bytes() == b.read_bytes()


def test_header_is_self_describing(mini_model, tmp_path):
    path = save_checkpoint(mini_model, tmp_path / "m.ckpt")
    assert path.read_bytes().startswith(MAGIC + b"\n")
    header = read_checkpoint_header(path)
    assert header["config"]["token_dim"] == 8
    assert len(header["schedule"]["alpha_bar"]) == mini_model.config.diffusion_steps + 1
    assert sum(e["count"] for e in header["parameters"]) == mini_model.parameter_count()


def test_missing(tmp_path):
    with pytest.raises(MissingCheckpointError):
        load_checkpoint(tmp_path / "none.ckpt")


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT\n2\n{}")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_truncated_payload(mini_model, tmp_path):
    path = save_checkpoint(mini_model, tmp_path / "m.ckpt")
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def _rewrite_header(path, edit):
    raw = path.read_bytes()
    first = raw.index(b"\n")
    second = raw.index(b"\n", first + 1)
    length = int(raw[first + 1:second])
    header = json.loads(raw[second + 1:second + 1 + length])
    edit(header)
    text = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(MAGIC + b"\n" + str(len(text)).encode() + b"\n" + text + raw[second + 1 + length:])


def test_schedule_mismatch(mini_model, tmp_path):
    path = save_checkpoint(mini_model, tmp_path / "m.ckpt")
    _rewrite_header(path, lambda h: h["schedule"]["alpha_bar"].__setitem__(1, h["schedule"]["alpha_bar"][1] + 0.01))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_architecture_mismatch(mini_model, tmp_path):
    path = save_checkpoint(mini_model, tmp_path / "m.ckpt")
    _rewrite_header(path, lambda h: h["config"].__setitem__("head_type", "regression"))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_regression_checkpoint(tmp_path):
    path = save_checkpoint(build_policy(PolicyConfig.miniature(head_type="regression")), tmp_path / "r.ckpt")
    assert load_checkpoint(path).noise_net is None


def test_mode_checks_capability(mini_config, tmp_path):
    explore_only = save_checkpoint(build_policy(mini_config, mask_prob=1.0), tmp_path / "x.ckpt")
    goal_only = save_checkpoint(build_policy(mini_config, mask_prob=0.0), tmp_path / "g.ckpt")
    load_checkpoint(explore_only, mode="undirected")
    load_checkpoint(goal_only, mode="goal")
    with pytest.raises(CapabilityError):
        load_checkpoint(explore_only, mode="goal")
    with pytest.raises(CapabilityError):
        load_checkpoint(goal_only, mode="undirected")
