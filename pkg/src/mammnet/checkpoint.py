"""Versioned checkpoint files.

Layout (little endian)::

    offset 0   magic      12 bytes  b"MAMMNETCKPT\\x00"
    offset 12  version    uint32
    offset 16  length     uint64    payload byte count
    offset 24  sha256     32 bytes  digest of the payload
    offset 56  payload    torch.save() of a plain dict

The payload holds the model state dict, the step counter, the model/train
config snapshot and, optionally, optimizer state.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch

from .config import ModelConfig, TrainConfig, config_to_dict, model_config_from_dict, train_config_from_dict
from .errors import CheckpointError, ConfigError, ConfigMismatchError

MAGIC = b"MAMMNETCKPT\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<12sIQ32s")


@dataclass
class Checkpoint:
    state_dict: dict[str, torch.Tensor]
    step: int
    model_config: ModelConfig
    train_config: TrainConfig | None = None
    optimizer_state: dict[str, Any] | None = None
    extra: dict[str, Any] | None = None


def save_checkpoint(path, model, step: int, model_config: ModelConfig,
                    train_config: TrainConfig | None = None, optimizer=None,
                    extra: dict[str, Any] | None = None) -> Path:
    state = model.state_dict() if hasattr(model, "state_dict") else dict(model)
    payload = {
        "state_dict": {k: v.detach().cpu().clone() for k, v in state.items()},
        "step": int(step),
        "model_config": config_to_dict(model_config),
        "train_config": config_to_dict(train_config) if train_config is not None else None,
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(body), hashlib.sha256(body).digest())

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(body)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint.

    Raises :class:`CheckpointError` for truncated or corrupt files (the message
    carries the byte offset where reading failed), for a format version other
    than :data:`FORMAT_VERSION`, and :class:`ConfigMismatchError` when
    ``expected_config`` is given and differs from the stored snapshot.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    if len(raw) < _HEADER.size:
        raise CheckpointError(
            f"corrupt checkpoint {path}: truncated header at offset {len(raw)} "
            f"(need {_HEADER.size} bytes)"
        )
    magic, version, length, digest = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"corrupt checkpoint {path}: bad magic at offset 0")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version}; this build reads version {FORMAT_VERSION}"
        )
    body = raw[_HEADER.size:]
    if len(body) < length:
        raise CheckpointError(
            f"corrupt checkpoint {path}: truncated payload at offset {len(raw)} "
            f"(expected {length} payload bytes from offset {_HEADER.size}, found {len(body)})"
        )
    if len(body) > length:
        raise CheckpointError(
            f"corrupt checkpoint {path}: {len(body) - length} trailing bytes at offset {_HEADER.size + length}"
        )
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(
            f"corrupt checkpoint {path}: payload checksum mismatch in bytes "
            f"[{_HEADER.size}, {_HEADER.size + length})"
        )
    try:
        payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=True)
    except Exception as exc:  # pragma: no cover - digest already guards this
        raise CheckpointError(f"corrupt checkpoint {path}: payload at offset {_HEADER.size}: {exc}") from exc

    try:
        model_config = model_config_from_dict(payload["model_config"])
        train_config = (train_config_from_dict(payload["train_config"])
                        if payload.get("train_config") is not None else None)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint {path} holds an invalid config snapshot: {exc}") from exc

    if expected_config is not None and expected_config != model_config:
        raise ConfigMismatchError(
            f"checkpoint {path} config does not match: {describe_config_diff(model_config, expected_config)}"
        )
    return Checkpoint(
        state_dict=payload["state_dict"],
        step=int(payload["step"]),
        model_config=model_config,
        train_config=train_config,
        optimizer_state=payload.get("optimizer_state"),
        extra=payload.get("extra"),
    )


def describe_config_diff(stored: ModelConfig, expected: ModelConfig) -> str:
    a, b = config_to_dict(stored), config_to_dict(expected)
    parts = [f"{k}: checkpoint={a[k]!r} expected={b[k]!r}" for k in a if a[k] != b.get(k)]
    return "; ".join(parts)
