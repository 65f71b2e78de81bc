"""Deterministic model checkpoints: JSON header + raw little-endian tensors.

The layout is magic string, 8-byte little-endian header length, the header as
sorted-key JSON, then each parameter's bytes in header order. Writing the same
model twice produces byte-identical files; no timestamps, no pickling.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch

from .model import LipAdaptModel, ModelConfig

MAGIC = b"LIPADAPT1\n"

_DTYPE_NAMES = {torch.float32: "float32", torch.float64: "float64"}
_NAME_DTYPES = {"float32": np.float32, "float64": np.float64}


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or inconsistent."""


def save_checkpoint(path: str, model: LipAdaptModel, extra: dict | None = None) -> None:
    """Write model config, activity flags, and all parameters/buffers to ``path``."""
    state = model.state_dict()
    tensors = []
    blobs = []
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPE_NAMES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        arr = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False)
        tensors.append(
            {"name": name, "shape": list(t.shape), "dtype": _DTYPE_NAMES[t.dtype]}
        )
        blobs.append(arr.tobytes())
    header = {
        "format": 1,
        "model": {
            "n_classes": model.cfg.n_classes,
            "task": model.cfg.task,
            "frames": model.cfg.frames,
            "height": model.cfg.height,
            "width": model.cfg.width,
            "d_id": model.cfg.d_id,
            "verifier_channels": list(model.cfg.verifier_channels),
            "frontend_channels": model.cfg.frontend_channels,
            "block_channels": list(model.cfg.block_channels),
            "backend_hidden": model.cfg.backend_hidden,
            "head_seed_channels": model.cfg.head_seed_channels,
            "use_enhancement": model.cfg.use_enhancement,
            "use_suppression": model.cfg.use_suppression,
        },
        "enh_active": model.enh_active,
        "sup_active": model.sup_active,
        "tensors": tensors,
        "extra": extra or {},
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def read_header(path: str) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (length,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(length).decode("utf-8"))


def load_checkpoint(path: str) -> tuple[LipAdaptModel, dict]:
    """Rebuild the model from ``path``; returns (model, header)."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length).decode("utf-8"))
        mc = dict(header["model"])
        mc["verifier_channels"] = tuple(mc["verifier_channels"])
        mc["block_channels"] = tuple(mc["block_channels"])
        model = LipAdaptModel(ModelConfig(**mc))
        state = {}
        for meta in header["tensors"]:
            dtype = _NAME_DTYPES[meta["dtype"]]
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            raw = fh.read(count * np.dtype(dtype).itemsize)
            arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"))
            arr = arr.astype(dtype, copy=True).reshape(meta["shape"])
            state[meta["name"]] = torch.from_numpy(arr)
        tail = fh.read(1)
    if tail:
        raise CheckpointError(f"{path} has trailing bytes")
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"{path} is missing tensors: {sorted(missing)[:3]}")
    model.load_state_dict(state)
    model.enh_active = bool(header["enh_active"])
    model.sup_active = bool(header["sup_active"])
    return model, header
