"""Versioned checkpoint containers.

One file format for every model kind: a torch-serialized dict carrying a
schema id, the image geometry, the prompt dimension, the noise schedule in
effect at save time, and the parameter blobs. Generator checkpoints store
both the live and the EMA weights.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .diffusion import NoiseSchedule

SCHEMA = "rewardedit-checkpoint"
VERSION = 1
MODEL_KINDS = ("generator", "aesthetic", "alignment", "coherence", "probe")


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path,
    kind: str,
    state: dict,
    schedule: NoiseSchedule | None = None,
    h: int = 32,
    w: int = 32,
    channels: int = 3,
    d_c: int = 32,
    extra: dict | None = None,
) -> Path:
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema": SCHEMA,
        "version": VERSION,
        "kind": kind,
        "h": h,
        "w": w,
        "channels": channels,
        "d_c": d_c,
        "schedule": schedule.to_dict() if schedule is not None else None,
        "state": state,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, expected_kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("schema") != SCHEMA:
        raise CheckpointError(f"{path} is not a {SCHEMA} file")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    if expected_kind is not None and payload["kind"] != expected_kind:
        raise CheckpointError(f"expected a {expected_kind} checkpoint, found {payload['kind']}")
    return payload


def checkpoint_schedule(payload: dict) -> NoiseSchedule:
    if payload.get("schedule") is None:
        raise CheckpointError("checkpoint carries no noise schedule")
    return NoiseSchedule.from_dict(payload["schedule"])
