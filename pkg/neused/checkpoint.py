"""Binary checkpoint of a FieldBundle.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
(model config, stage tag, active hash levels, tensor names and shapes), then
each tensor as little-endian float32 in header order. Files are written to a
temporary sibling and renamed into place.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import pathlib
import struct
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch

from .config import ModelConfig
from .errors import CheckpointError, CheckpointMissingError, ConfigError
from .fields import FieldBundle, build_bundle


logger = logging.getLogger(__name__)

MAGIC = b"NEUSEDCK"
VERSION = 1
STAGES = ("init", "source", "edit")
ENCODINGS = ("source_encoding", "target_encoding", "background.encoding")


def _encoding(bundle: FieldBundle, name: str):
    return bundle.background.encoding if name == "background.encoding" else getattr(bundle, name)


def save_checkpoint(
    bundle: FieldBundle, path: str | pathlib.Path, stage: str, meta: Optional[Dict[str, Any]] = None
) -> pathlib.Path:
    if stage not in STAGES:
        raise ConfigError(f"unknown checkpoint stage {stage!r}; expected one of {STAGES}")
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = bundle.state_dict()
    header = {
        "version": VERSION,
        "stage": stage,
        "model": dataclasses.asdict(bundle.cfg),
        "active_levels": {name: _encoding(bundle, name).active_levels for name in ENCODINGS},
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in state.values():
            f.write(v.detach().to("cpu", torch.float32).numpy().astype("<f4").tobytes())
    os.replace(tmp, path)
    logger.info("checkpoint (%s) written to %s", stage, path)
    return path


def read_header(path: str | pathlib.Path) -> Tuple[Dict[str, Any], bytes]:
    path = pathlib.Path(path)
    if not path.exists():
        raise CheckpointMissingError(f"checkpoint {path} not found")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    missing = [k for k in ("tensors", "model", "stage") if not isinstance(header, dict) or k not in header]
    if missing:
        raise CheckpointError(f"{path}: header lacks {missing}")
    if header["stage"] not in STAGES:
        raise CheckpointError(f"{path}: unknown stage {header['stage']!r}")
    tensors = header["tensors"]
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = data[start + n :]
    try:
        expected = 4 * sum(int(np.prod(t["shape"])) for t in tensors)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed tensor table: {e}") from e
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header describes {expected}")
    return header, payload


def load_checkpoint(path: str | pathlib.Path) -> Tuple[FieldBundle, Dict[str, Any]]:
    """Rebuild the bundle; source and background come back frozen once stage 1 has run."""
    header, payload = read_header(path)
    try:
        cfg = ModelConfig(**header["model"])
        cfg.validate()
    except (TypeError, ConfigError) as e:
        raise CheckpointError(f"{path}: invalid model config in header: {e}") from e
    bundle = build_bundle(cfg)

    state, offset = {}, 0
    for t in header["tensors"]:
        count = int(np.prod(t["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * count
    try:
        bundle.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: tensors do not match the model: {e}") from e

    for name, levels in header.get("active_levels", {}).items():
        _encoding(bundle, name).active_levels = int(levels)
    if header["stage"] in ("source", "edit"):
        bundle.freeze_identity()
    return bundle, header
