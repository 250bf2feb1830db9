"""Checkpoint container: JSON manifest followed by little-endian float32 blocks.

Layout::

    b"CGQRCKPT" | uint64 LE manifest length | manifest (UTF-8 JSON) | blocks
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .pnm import atomic_write_bytes

MAGIC = b"CGQRCKPT"


def state_arrays(model: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().astype("<f4") for k, v in model.state_dict().items()}


def parameter_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, arr in state_arrays(model).items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def encode_checkpoint(model: torch.nn.Module, meta: dict) -> bytes:
    arrays = state_arrays(model)
    manifest = dict(meta)
    manifest["format"] = "cgqr-checkpoint"
    manifest["version"] = 1
    manifest["parameters"] = {k: list(a.shape) for k, a in arrays.items()}
    header = json.dumps(manifest, sort_keys=False).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(a).tobytes() for a in arrays.values())
    return MAGIC + struct.pack("<Q", len(header)) + header + blobs


def save_checkpoint(path, model: torch.nn.Module, meta: dict) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode_checkpoint(model, meta))
    return path


def read_checkpoint(path):
    """Return ``(manifest, {name: float32 array})``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + n].decode("utf-8"))
    offset = 16 + n
    arrays = {}
    for name, shape in manifest["parameters"].items():
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return manifest, arrays


def load_into(model: torch.nn.Module, arrays: dict) -> None:
    current = model.state_dict()
    state = {}
    for name, ref in current.items():
        if name not in arrays:
            raise KeyError(f"checkpoint lacks parameter {name}")
        state[name] = torch.from_numpy(np.array(arrays[name])).to(ref.dtype).reshape(ref.shape)
    model.load_state_dict(state)


def load_model(path):
    """Rebuild a :class:`CGQRNet` from a checkpoint; returns ``(model, manifest)``."""
    from .model import CGQRNet, ModelConfig

    manifest, arrays = read_checkpoint(path)
    model = CGQRNet(ModelConfig.from_dict(manifest["model_config"]))
    load_into(model, arrays)
    model.eval()
    return model, manifest
