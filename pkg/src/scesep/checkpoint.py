"""Binary checkpoint format.

Layout::

    8 bytes   magic b"SCESEP01"
    8 bytes   little-endian uint64 header length N
    N bytes   UTF-8 JSON header: format_version, config, registry, step,
              train_state, tensors [{name, shape, offset}] (offset relative
              to the payload start, in bytes)
    ...       concatenated little-endian float32 payloads
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .autograd import Tensor
from .config import RunConfig
from .sce import SceModel, init_model

MAGIC = b"SCESEP01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    registry: list[tuple[str, int, str]] = field(default_factory=list)  # (speaker_id, index, gender)
    train_state: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def speaker_ids(self) -> set[str]:
        return {sid for sid, _, _ in self.registry}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    directory, offset = [], 0
    blobs = []
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        directory.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "registry": [list(r) for r in ckpt.registry],
        "step": ckpt.step,
        "train_state": ckpt.train_state,
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header ({len(raw) - 16} of {hlen} bytes)")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}, expected {FORMAT_VERSION}")
    payload = memoryview(raw)[16 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        lo = entry["offset"]
        if lo + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload for tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(payload[lo:lo + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
    return Checkpoint(
        config=RunConfig.from_dict(header["config"]),
        tensors=tensors,
        step=int(header["step"]),
        registry=[tuple(r) for r in header["registry"]],
        train_state=header.get("train_state", {}),
        format_version=version,
    )


def model_to_checkpoint(model: SceModel, config: RunConfig, step: int = 0, registry=None,
                        adam: nn.AdamState | None = None, extra_state: dict | None = None) -> Checkpoint:
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    state = dict(extra_state or {})
    if adam is not None:
        state["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step}
        for name in adam.m:
            tensors[f"adam.m.{name}"] = adam.m[name]
            tensors[f"adam.v.{name}"] = adam.v[name]
    reg = []
    if registry is not None:
        reg = [(s.speaker_id, s.index, s.gender) for s in registry.speakers.values()]
    return Checkpoint(config, tensors, step, sorted(reg, key=lambda r: r[1]), state)


def model_from_checkpoint(ckpt: Checkpoint, F: int | None = None) -> SceModel:
    """Rebuild the model; ``F`` (if given) must match the stored bin count."""
    mc = ckpt.config.model
    if F is not None and F != mc.F:
        raise CheckpointError(f"checkpoint was trained with F={mc.F} bins but inference requests F={F}")
    model = init_model(mc, seed=0)
    params = model.named_parameters()
    stored = {k for k in ckpt.tensors if not k.startswith("adam.")}
    if stored != set(params):
        missing, extra = set(params) - stored, stored - set(params)
        raise CheckpointError(f"tensor names do not match the model: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
    for name, p in params.items():
        arr = ckpt.tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"tensor {name} has shape {arr.shape}, model expects {p.shape}")
        p.data[...] = arr
    return model


def adam_from_checkpoint(ckpt: Checkpoint) -> nn.AdamState | None:
    info = ckpt.train_state.get("adam")
    if info is None:
        return None
    st = nn.AdamState(lr=info["lr"], beta1=info["beta1"], beta2=info["beta2"], eps=info["eps"], step=info["step"])
    for key, arr in ckpt.tensors.items():
        if key.startswith("adam.m."):
            st.m[key[len("adam.m."):]] = arr.copy()
        elif key.startswith("adam.v."):
            st.v[key[len("adam.v."):]] = arr.copy()
    return st


__all__ = ["MAGIC", "Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint",
           "model_to_checkpoint", "model_from_checkpoint", "adam_from_checkpoint", "Tensor"]
