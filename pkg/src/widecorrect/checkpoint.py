"""Model checkpoints: length-prefixed JSON manifest + raw float32 payload."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, MSUnet

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "model_from_checkpoint"]

FORMAT_VERSION = 1


class CheckpointError(Exception):
    """A checkpoint file is missing, truncated, or inconsistent."""


def _config_to_dict(config: ModelConfig) -> dict:
    d = dataclasses.asdict(config)
    d["stage_depths"] = list(d["stage_depths"])
    return d


def _config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d.pop("seg_classes", None)
    d.pop("flow_channels", None)
    d["stage_depths"] = tuple(d["stage_depths"])
    return ModelConfig(**d)


def save_checkpoint(path: str | os.PathLike, model: MSUnet) -> None:
    """Write config + parameters: 8-byte LE header length, UTF-8 JSON manifest
    (config, format version, name/shape/offset table), then the tensors as
    little-endian float32 in manifest order."""
    entries = []
    payloads = []
    offset = 0
    for name, param in model.state_dict().items():
        arr = param.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "config": _config_to_dict(model.config),
            "params": entries,
        }
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in payloads:
            f.write(chunk)


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelConfig, dict[str, torch.Tensor]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 8:
        raise CheckpointError(f"checkpoint {path} is truncated (no header length)")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + header_len:
        raise CheckpointError(f"checkpoint {path} is truncated (incomplete header)")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} has a malformed header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has unsupported format version {header.get('format_version')!r}"
        )
    try:
        config = _config_from_dict(header["config"])
        entries = header["params"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} has an invalid manifest: {exc}") from exc
    payload = raw[8 + header_len :]
    state: dict[str, torch.Tensor] = {}
    total = 0
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 4 * count
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise CheckpointError(
                f"checkpoint {path} is corrupt: tensor {entry['name']} exceeds payload"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.copy())
        total = max(total, start + nbytes)
    if total != len(payload):
        raise CheckpointError(
            f"checkpoint {path} is corrupt: payload has {len(payload)} bytes, manifest covers {total}"
        )
    return config, state


def model_from_checkpoint(path: str | os.PathLike) -> MSUnet:
    """Rebuild the model described by a checkpoint, in eval mode."""
    config, state = load_checkpoint(path)
    model = MSUnet(config)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not match its own config: {exc}") from exc
    model.eval()
    return model
