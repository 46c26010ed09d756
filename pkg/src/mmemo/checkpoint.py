"""Checkpoint files: a JSON header line followed by raw little-endian float64 tensors."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .params import ModelParams

MAGIC = b"MMEMO-CKPT 1\n"


def save_checkpoint(path, params: ModelParams, model_cfg: dict, config_hash: str,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, node in params.items():
        raw = np.ascontiguousarray(node.value, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(node.value.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config_hash": config_hash,
        "model": model_cfg,
        "params": entries,
        "extra": extra or {},
    }
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path, expect_model: dict | None = None) -> tuple[ModelParams, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    end = data.index(b"\n", len(MAGIC))
    try:
        header = json.loads(data[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    body = memoryview(data)[end + 1:]
    arrays = {}
    for e in header["params"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    if expect_model is not None and header["model"] != expect_model:
        diff = sorted(k for k in set(expect_model) | set(header["model"])
                      if expect_model.get(k) != header["model"].get(k))
        raise CheckpointError(f"{path}: model config mismatch on {diff}")
    return ModelParams.from_arrays(arrays), header
