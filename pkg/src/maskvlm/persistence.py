"""Checkpoint container and metrics log.

Container layout::

    b"MVLMCKPT"                  8-byte magic
    u64 little-endian            header length
    header                       UTF-8 JSON
    data section                 float32 little-endian arrays, concatenated

The header maps each array name to ``{"shape", "offset", "section"}`` and
carries a 64-bit BLAKE2b digest of the data section.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import Config

FORMAT_VERSION = 1
MAGIC = b"MVLMCKPT"
TOOL_VERSION = "0.1.0"


class CheckpointError(ValueError):
    pass


def _digest(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {n: p.detach().cpu().numpy() for n, p in module.state_dict().items()}


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], manifest: dict,
                    optim: Optional[dict[str, np.ndarray]] = None, optim_step: int = 0) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    entries = {}
    chunks = []
    offset = 0
    for section, table in (("params", arrays), ("optim", optim or {})):
        for name, arr in table.items():
            raw = np.ascontiguousarray(np.asarray(arr), dtype="<f4").tobytes()
            entries[f"{section}:{name}"] = {"shape": list(np.shape(arr)), "offset": offset, "section": section}
            chunks.append(raw)
            offset += len(raw)
    data = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "tool_version": TOOL_VERSION,
        "arrays": entries,
        "has_optim": optim is not None,
        "optim_step": optim_step,
        "data_bytes": len(data),
        "data_hash": _digest(data),
        "manifest": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        fh.write(data)
    os.replace(tmp, path)
    return path


def read_header(path: str | Path) -> dict:
    """Parse only the JSON header."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        n = int.from_bytes(fh.read(8), "little")
        return json.loads(fh.read(n).decode("utf-8"))


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray], Optional[dict[str, np.ndarray]]]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n).decode("utf-8"))
        data = fh.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    if len(data) != header["data_bytes"] or _digest(data) != header["data_hash"]:
        raise CheckpointError("checkpoint data hash mismatch")
    params, optim = {}, {}
    for key, e in header["arrays"].items():
        section, name = key.split(":", 1)
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        (params if section == "params" else optim)[name] = arr.astype(np.float32)
    return header, params, (optim if header["has_optim"] else None)


def load_checkpoint(path: str | Path, expected: Optional[dict[str, tuple]] = None):
    """Return ``(header, params, optim)``; ``optim`` is ``None`` when absent.

    ``expected`` maps array names to shapes (see :func:`maskvlm.model.param_shapes`);
    any unknown, missing or mis-shaped array is an error.
    """
    header, params, optim = load_arrays(path)
    if expected is not None:
        unknown = sorted(set(params) - set(expected))
        if unknown:
            raise CheckpointError(f"unknown arrays in checkpoint: {unknown}")
        missing = sorted(set(expected) - set(params))
        if missing:
            raise CheckpointError(f"checkpoint lacks arrays: {missing}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(params[name].shape)}, expected {tuple(shape)}")
    return header, params, optim


def config_from_header(header: dict) -> Config:
    cfg = dict(header["manifest"]["config"])
    cfg["loss_set"] = tuple(cfg["loss_set"])
    return Config(**cfg)


class MetricsLog:
    """JSON-lines metrics writer; keeps records in memory too."""

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict):
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
