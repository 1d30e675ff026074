"""Single-file checkpoint container.

Layout::

    MAGIC (8 bytes) | format version (u32 LE) | header length (u64 LE)
    | header (UTF-8 JSON, sorted keys) | tensor blobs (raw little-endian)

The header holds the config snapshot, stage tag, step counter and a table of
``{name, dtype, shape, offset, nbytes}`` entries into the blob region.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import ModelConfig

MAGIC = b"STSYCKPT"
FORMAT_VERSION = 1
STAGES = ("backbone", "synchronizer", "injector")

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.float16: "<f2",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    stage: str
    config: ModelConfig
    step: int = 0
    optimizer: dict[str, Any] | None = None
    rng_state: torch.Tensor | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")


def _flatten_optimizer(opt_state: dict) -> tuple[dict[str, torch.Tensor], dict]:
    tensors, scalars = {}, {}
    for idx, entry in opt_state.get("state", {}).items():
        for key, value in entry.items():
            name = f"optim/{idx}/{key}"
            if torch.is_tensor(value):
                tensors[name] = value
            else:
                scalars[name] = value
    return tensors, {"param_groups": opt_state.get("param_groups", []), "scalars": scalars}


def _unflatten_optimizer(tensors: dict[str, torch.Tensor], info: dict) -> dict:
    state: dict[int, dict] = {}
    items = list(tensors.items()) + list(info.get("scalars", {}).items())
    for name, value in items:
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = value
    return {"state": state, "param_groups": info["param_groups"]}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    blobs: list[bytes] = []
    table = []
    offset = 0

    def add(name: str, tensor: torch.Tensor):
        nonlocal offset
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        data = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        table.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    for name in sorted(ckpt.params):
        add(f"param/{name}", ckpt.params[name])
    optim_info = None
    if ckpt.optimizer is not None:
        opt_tensors, optim_info = _flatten_optimizer(ckpt.optimizer)
        for name in sorted(opt_tensors):
            add(name, opt_tensors[name])
    if ckpt.rng_state is not None:
        add("rng", ckpt.rng_state)

    header = {
        "format_version": FORMAT_VERSION,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "config": ckpt.config.to_dict(),
        "optimizer": optim_info,
        "meta": ckpt.meta,
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
        return json.loads(fh.read(n))


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Load a checkpoint; refuses if ``expected`` disagrees structurally with the snapshot."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header = read_header(path)
    config = ModelConfig.from_dict(header["config"])
    if expected is not None:
        diff = expected.structural_mismatch(config)
        if diff:
            raise CheckpointVersionError(
                f"{path}: config snapshot does not match the requested config ({'; '.join(diff)})")
    raw = path.read_bytes()
    base = len(MAGIC) + 12 + len(json.dumps(header, sort_keys=True).encode())
    params, optim, rng = {}, {}, None
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype=entry["dtype"], count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=start).reshape(entry["shape"])
        t = torch.from_numpy(arr.copy())
        t = t.to(_TORCH_DTYPES[entry["dtype"]])
        kind, _, name = entry["name"].partition("/")
        if kind == "param":
            params[name] = t
        elif kind == "optim":
            optim[entry["name"]] = t
        elif kind == "rng":
            rng = t
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = _unflatten_optimizer(optim, header["optimizer"])
    return Checkpoint(params=params, stage=header["stage"], config=config, step=header["step"],
                      optimizer=optimizer, rng_state=rng, meta=header.get("meta", {}))


def file_digest(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
