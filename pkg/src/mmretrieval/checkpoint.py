"""Binary checkpoints of a training state.

Layout: an 8-byte magic, a little-endian uint32 header length, a UTF-8 JSON
header, then each parameter block's float64 little-endian payload in header
order. The header holds the format version, the model dimension table, the
training counters and one ``{name, shape}`` entry per block. Round trips are
bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .encoders import ModelConfig, RetrievalModel
from .proxy_loss import LossConfig, ProxyStore
from .training import TrainState

MAGIC = b"MMRCKPT\x00"
FORMAT_VERSION = 1
PROXY_BLOCK = "proxies.w"


class CheckpointError(ValueError):
    pass


def save(path: str | Path, state: TrainState, meta: dict[str, Any] | None = None) -> None:
    blocks = [(k, p.value) for k, p in sorted(state.model.params.items())]
    if state.store is not None:
        blocks.append((PROXY_BLOCK, state.store.w.value))
    header = {
        "format_version": FORMAT_VERSION,
        "dims": state.model.config_dict(),
        "loss": vars(state.loss_cfg).copy(),
        "lr": state.lr,
        "seed": state.seed,
        "iteration": state.iteration,
        "label_of": sorted(state.label_of.items(), key=lambda kv: kv[1]),
        "meta": meta or {},
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in blocks],
    }
    raw_header = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw_header)))
        fh.write(raw_header)
        for _, v in blocks:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Header and ``{block name: array}`` without building a model."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    offset = 12 + n
    arrays = {}
    for b in header["blocks"]:
        count = int(np.prod(b["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated block {b['name']}")
        arrays[b["name"]] = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(b["shape"])
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after the last block")
    return header, arrays


def load(path: str | Path, expect_dims: ModelConfig | None = None) -> tuple[TrainState, dict]:
    """Rebuild the training state; returns it with the saved ``meta`` dict."""
    header, arrays = read(path)
    dims = header["dims"]
    cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in dims.items()})
    if expect_dims is not None:
        _check_dims(expect_dims, cfg)
    model = RetrievalModel(cfg, seed=0)
    model.load_state({k: v for k, v in arrays.items() if k != PROXY_BLOCK})
    loss_cfg = LossConfig(**header["loss"])
    store = ProxyStore(arrays[PROXY_BLOCK], loss_cfg.shards) if PROXY_BLOCK in arrays else None
    state = TrainState(model=model, store=store, loss_cfg=loss_cfg, lr=header["lr"], seed=header["seed"],
                       iteration=header["iteration"], label_of={int(c): int(r) for c, r in header["label_of"]})
    return state, header["meta"]


def _check_dims(want: ModelConfig, got: ModelConfig) -> None:
    a, b = vars(want), vars(got)
    diff = sorted(k for k in a if a[k] != b.get(k))
    if diff:
        raise CheckpointError("checkpoint dimensions differ from the config: " +
                              ", ".join(f"{k}={b.get(k)!r} (config {a[k]!r})" for k in diff))
