"""Container files: a text header followed by raw little-endian floats.

Layout::

    swin4d-container 1
    dtype = <f4
    meta.<key> = <json value>
    ...
    tensor <name> <d0,d1,...> <byte offset>
    ...
    end
    <binary payload>

Tensors are stored in manifest order, each C-contiguous; offsets are relative
to the first payload byte. ``<f4`` is the default payload type; ``<f8`` is
accepted so double-precision models also round-trip bit for bit. Checkpoints,
dataset volumes and attribution maps all use this one format.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = "swin4d-container"
FORMAT_VERSION = 1
PAYLOAD_TYPES = ("<f4", "<f8")


class ContainerError(ValueError):
    """Malformed or incompatible container file."""


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def _shape_text(shape) -> str:
    return ",".join(str(int(n)) for n in shape) if len(shape) else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(n) for n in text.split(","))


def write_container(path, tensors: dict[str, np.ndarray], meta: dict | None = None, dtype: str = "<f4") -> None:
    """Write ``tensors`` (in insertion order) plus JSON-serialisable ``meta``."""
    if dtype not in PAYLOAD_TYPES:
        raise ContainerError(f"payload dtype must be one of {PAYLOAD_TYPES}, got {dtype!r}")
    itemsize = np.dtype(dtype).itemsize
    lines = [f"{MAGIC} {FORMAT_VERSION}", f"dtype = {dtype}"]
    for key, value in (meta or {}).items():
        if "\n" in key or " " in key:
            raise ContainerError(f"meta key {key!r} may not contain whitespace")
        lines.append(f"meta.{key} = {json.dumps(value, sort_keys=True)}")
    offset = 0
    payload = []
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise ContainerError(f"tensor name {name!r} may not contain whitespace")
        arr = np.asarray(arr, dtype=dtype).copy(order="C")
        lines.append(f"tensor {name} {_shape_text(arr.shape)} {offset}")
        payload.append(arr)
        offset += arr.size * itemsize
    lines.append("end")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for arr in payload:
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def read_header(fh) -> tuple[str, dict, list[ManifestEntry]]:
    first = fh.readline().decode("utf-8").split()
    if len(first) != 2 or first[0] != MAGIC:
        raise ContainerError("not a swin4d container file")
    if int(first[1]) != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {first[1]}")
    dtype, meta, manifest = "<f4", {}, []
    while True:
        raw = fh.readline()
        if not raw:
            raise ContainerError("header is missing its 'end' line")
        line = raw.decode("utf-8").rstrip("\n")
        if line == "end":
            break
        if line.startswith("tensor "):
            _, name, shape, offset = line.split(" ")
            manifest.append(ManifestEntry(name, _parse_shape(shape), int(offset)))
        elif line.startswith("meta."):
            key, _, value = line[len("meta.") :].partition(" = ")
            meta[key] = json.loads(value)
        elif line.startswith("dtype = "):
            dtype = line[len("dtype = ") :]
            if dtype not in PAYLOAD_TYPES:
                raise ContainerError(f"unsupported payload dtype {dtype!r}")
        else:
            raise ContainerError(f"unrecognised header line {line!r}")
    return dtype, meta, manifest


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        dtype, meta, manifest = read_header(fh)
        payload = fh.read()
    itemsize = np.dtype(dtype).itemsize
    tensors = {}
    for entry in manifest:
        end = entry.offset + entry.size * itemsize
        if end > len(payload):
            raise ContainerError(f"tensor {entry.name} runs past the end of the file")
        flat = np.frombuffer(payload, dtype=dtype, count=entry.size, offset=entry.offset)
        tensors[entry.name] = flat.reshape(entry.shape).astype(np.dtype(dtype).newbyteorder("="))
    return tensors, meta


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, "rb") as fh:
        return read_header(fh)[2]


# ------------------------------------------------------------------ checkpoints
def payload_dtype_for(dtype) -> str:
    return "<f8" if np.dtype(dtype) == np.float64 else "<f4"


def save_checkpoint(path, model, optimizer_state: dict | None = None, extra: dict | None = None) -> None:
    """Model weights (+ optional AdamW state) with the model config in the header."""
    tensors = {f"param.{k}": v for k, v in model.state_dict().items()}
    meta = {"kind": "checkpoint", "config": model.cfg.to_dict()}
    if optimizer_state is not None:
        meta["optimizer.step"] = int(optimizer_state["step"])
        for name in optimizer_state["m"]:
            tensors[f"adam_m.{name}"] = optimizer_state["m"][name]
            tensors[f"adam_v.{name}"] = optimizer_state["v"][name]
    meta.update(extra or {})
    write_container(path, tensors, meta, dtype=payload_dtype_for(model.dtype))


def config_from_meta(meta: dict):
    from .model import ModelConfig

    cfg = dict(meta["config"])
    return ModelConfig(**cfg)


def load_checkpoint(path, cfg=None):
    """Returns (model, optimizer_state or None, meta).

    ``cfg`` overrides the stored config (e.g. a different head for
    fine-tuning); parameters whose shapes do not fit are then skipped.
    """
    from .model import build_model

    tensors, meta = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ContainerError(f"{path} is not a checkpoint")
    stored = config_from_meta(meta)
    model = build_model(cfg or stored)
    state = {k[len("param.") :]: v for k, v in tensors.items() if k.startswith("param.")}
    skipped = model.load_state_dict(state, strict=cfg is None)
    meta["skipped_parameters"] = skipped
    opt = None
    if "optimizer.step" in meta and not skipped:
        opt = {
            "step": meta["optimizer.step"],
            "m": {k[len("adam_m.") :]: v for k, v in tensors.items() if k.startswith("adam_m.")},
            "v": {k[len("adam_v.") :]: v for k, v in tensors.items() if k.startswith("adam_v.")},
        }
    return model, opt, meta
