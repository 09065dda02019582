"""Checkpoint container: JSON header followed by a little-endian float32 blob.

Layout::

    b"LASSCKPT" | uint64 LE header length | UTF-8 JSON header | float32 blob

The header carries the model config, the vocabulary, a tensor manifest
(name, shape, dtype, byte offset) and free-form training state.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, Separator
from .query import Vocabulary

MAGIC = b"LASSCKPT"
FORMAT_VERSION = 1


def _model_tensors(model: Separator) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items() if not k.endswith("num_batches_tracked")}


def save_checkpoint(
    path: str | Path,
    model: Separator,
    seed: int = 0,
    extra_tensors: dict[str, torch.Tensor] | None = None,
    state: dict | None = None,
) -> None:
    tensors = {f"model.{k}": v for k, v in _model_tensors(model).items()}
    for k, v in (extra_tensors or {}).items():
        tensors[f"extra.{k}"] = v
    manifest, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": "lasskit-checkpoint",
        "version": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "vocab": model.query.entries if model.query is not None else None,
        "seed": seed,
        "tensors": manifest,
        "state": state or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a lasskit checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    blob = memoryview(data)[16 + n :]
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[Separator, dict, dict[str, torch.Tensor]]:
    """Rebuild the model; returns (model, header, extra tensors)."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    vocab = None
    if header.get("vocab") is not None:
        entries = header["vocab"]
        vocab = Vocabulary(list(entries), np.zeros((len(entries), cfg.d_query)))
    model = Separator(cfg, vocab)
    state = {k[len("model.") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model.")}
    missing, unexpected = model.load_state_dict(state, strict=False)
    missing = [m for m in missing if not m.endswith("num_batches_tracked")]
    if missing or unexpected:
        raise ValueError(f"checkpoint mismatch: missing={missing} unexpected={unexpected}")
    extra = {k[len("extra.") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("extra.")}
    return model, header, extra
