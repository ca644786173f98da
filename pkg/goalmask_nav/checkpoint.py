"""
Self-describing policy checkpoints.

Layout:
    line 1   b"GMNCKPT1"
    line 2   header length in bytes (decimal ASCII)
    header   JSON (sorted keys): format version, PolicyConfig, noise schedule,
             training mask probability, free-form metadata and one entry per
             parameter with name, shape, element offset and count
    payload  every parameter as little-endian float32, in header order

Saving the same parameters with the same metadata always produces the same
bytes.
"""

import json
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch

from .logger import logger
from .policy import CapabilityError, PolicyConfig, PolicyModel, build_policy


MAGIC = b"GMNCKPT1"
VERSION = 1


class CheckpointError(Exception):
    """Base exception for checkpoint I/O."""
    pass


class CheckpointFormatError(CheckpointError):
    """Raised when a checkpoint file is malformed or inconsistent."""
    pass


class MissingCheckpointError(CheckpointError, FileNotFoundError):
    """Raised when a checkpoint path does not exist."""
    pass


def save_checkpoint(model: PolicyModel, path: Union[str, Path], metadata: Optional[Dict] = None) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, param in model.named_parameters():
        data = param.detach().cpu().to(torch.float64).numpy().astype("<f4")
        entries.append({"name": name, "shape": list(param.shape), "offset": offset, "count": int(data.size)})
        chunks.append(data.tobytes())
        offset += int(data.size)

    header = {
        "format": "goalmask-nav checkpoint",
        "version": VERSION,
        "config": model.config.to_dict(),
        "schedule": model.schedule.to_dict(),
        "mask_prob": model.mask_prob,
        "metadata": metadata or {},
        "parameters": entries,
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC + b"\n")
            f.write(str(len(text)).encode("ascii") + b"\n")
            f.write(text)
            for chunk in chunks:
                f.write(chunk)
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint saved to {path} ({offset} parameters)")
    return path


def read_checkpoint_header(path: Union[str, Path]) -> Dict:
    header, _ = _read(path)
    return header


def _read(path: Union[str, Path]):
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    first = raw.find(b"\n")
    if first < 0 or raw[:first] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a goalmask-nav checkpoint")
    second = raw.find(b"\n", first + 1)
    try:
        length = int(raw[first + 1:second])
        start = second + 1
        header = json.loads(raw[start:start + length].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable header: {e}") from e
    if header.get("version") != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {header.get('version')}")
    return header, raw[start + length:]


def load_checkpoint(path: Union[str, Path], mode: Optional[str] = None) -> PolicyModel:
    """Rebuild a PolicyModel from disk.

    `mode` ("undirected" or "goal") rejects checkpoints whose training mask
    probability does not support that use.
    """
    header, payload = _read(path)
    try:
        config = PolicyConfig.from_dict(header["config"])
    except (KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: bad config: {e}") from e
    model = build_policy(config, mask_prob=header.get("mask_prob"))

    stored = np.asarray(header["schedule"]["alpha_bar"], dtype=np.float64)
    if stored.shape != model.schedule.alpha_bar.shape or np.max(np.abs(stored - model.schedule.alpha_bar)) > 1e-12:
        raise CheckpointFormatError(f"{path}: stored noise schedule does not match its config")

    values = np.frombuffer(payload, dtype="<f4")
    params = dict(model.named_parameters())
    entries = header["parameters"]
    if {e["name"] for e in entries} != set(params):
        raise CheckpointFormatError(f"{path}: parameter names do not match the model architecture")
    with torch.no_grad():
        for entry in entries:
            param = params[entry["name"]]
            if list(param.shape) != entry["shape"]:
                raise CheckpointFormatError(f"{path}: {entry['name']} shape {entry['shape']} != {list(param.shape)}")
            end = entry["offset"] + entry["count"]
            if end > values.size:
                raise CheckpointFormatError(f"{path}: payload truncated at {entry['name']}")
            chunk = values[entry["offset"]:end].reshape(entry["shape"])
            if not np.all(np.isfinite(chunk)):
                raise CheckpointFormatError(f"{path}: non-finite values in {entry['name']}")
            param.copy_(torch.from_numpy(chunk.astype(np.float64)).to(param.dtype))

    if mode == "undirected" and not model.supports_undirected:
        raise CapabilityError(f"{path}: trained with p_m = {model.mask_prob}, cannot be used for undirected exploration")
    if mode == "goal" and not model.supports_goal:
        raise CapabilityError(f"{path}: trained with p_m = {model.mask_prob}, cannot be used for goal-conditioned navigation")
    logger.info(f"Loaded {path}: {model.summary()}")
    return model
