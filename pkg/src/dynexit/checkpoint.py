"""Model checkpoints: one binary container of named float32 tensors.

Layout: 8-byte magic ``DXCKPT01``, a little-endian uint64 header length, a
JSON header, then the raw tensor payload.  The header carries the
architecture config plus an index of (name, shape, offset, length) entries;
tensors are stored little-endian float32 in sorted name order so identical
models serialize byte-identically.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch

from .errors import DataError
from .model import ModelConfig, MultiExitModel

MAGIC = b"DXCKPT01"


def _serializable_state(model: MultiExitModel) -> dict[str, torch.Tensor]:
    # num_batches_tracked is an int64 step counter irrelevant at fixed
    # momentum; everything else (params + running stats) is float.
    return {
        name: tensor
        for name, tensor in model.state_dict().items()
        if not name.endswith("num_batches_tracked")
    }


def save_checkpoint(path: str, model: MultiExitModel) -> None:
    state = _serializable_state(model)
    index = []
    blobs = []
    offset = 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f4")
        blob = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": model.config.to_dict(), "tensors": index}, sort_keys=True).encode()
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str, dtype: torch.dtype = torch.float32) -> MultiExitModel:
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise DataError(f"not a checkpoint file: {path}")
    try:
        header_len = struct.unpack("<Q", raw[8:16])[0]
        header = json.loads(raw[16 : 16 + header_len])
        payload = raw[16 + header_len :]
        config = ModelConfig.from_dict(header["config"])
        model = MultiExitModel(config)
        state = model.state_dict()
        seen = set()
        for entry in header["tensors"]:
            arr = np.frombuffer(
                payload, dtype="<f4", count=entry["length"] // 4, offset=entry["offset"]
            ).reshape(entry["shape"])
            name = entry["name"]
            if name not in state:
                raise DataError(f"checkpoint tensor '{name}' unknown to the architecture")
            state[name] = torch.from_numpy(arr.copy()).to(state[name].dtype)
            seen.add(name)
        missing = {n for n in state if not n.endswith("num_batches_tracked")} - seen
        if missing:
            raise DataError(f"checkpoint misses tensors: {sorted(missing)[:5]} ...")
        model.load_state_dict(state)
    except DataError:
        raise
    except Exception as exc:  # truncated payloads, bad JSON, shape clashes
        raise DataError(f"corrupt checkpoint {path}: {exc}") from exc
    model.eval()
    return model.to(dtype)
