"""Checkpoint files: a text manifest followed by little-endian float32 tensor payloads.

Layout::

    RLCM-CHECKPOINT
    version: 1
    kind: consistency
    hparams: {"dim": 2, ...}
    tensor: embed 4x8
    tensor: layer0.W 27x256
    ...
    end
    <payload bytes, tensors in manifest order>
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .consistency import ConsistencyModel
from .diffusion import ScoreModel
from .nn import ParamStore, n_layers

MAGIC = "RLCM-CHECKPOINT"
VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    hparams: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [MAGIC, f"version: {ckpt.version}", f"kind: {ckpt.kind}",
             f"hparams: {json.dumps(ckpt.hparams, sort_keys=True)}"]
    for name, arr in ckpt.tensors.items():
        lines.append(f"tensor: {name} {'x'.join(str(n) for n in arr.shape)}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    return path


def _read_header(fh) -> Checkpoint:
    first = fh.readline().decode("utf-8").rstrip("\n")
    if first != MAGIC:
        raise CheckpointError(f"not a checkpoint file (header {first!r})")
    ckpt = Checkpoint(kind="", hparams={}, version=-1)
    while True:
        raw = fh.readline()
        if not raw:
            raise CheckpointTruncatedError("manifest ended before the 'end' line")
        line = raw.decode("utf-8").rstrip("\n")
        if line == "end":
            break
        key, _, value = line.partition(": ")
        if key == "version":
            ckpt.version = int(value)
            if ckpt.version != VERSION:
                raise CheckpointVersionError(
                    f"checkpoint version {ckpt.version} is not supported (expected {VERSION})")
        elif key == "kind":
            ckpt.kind = value
        elif key == "hparams":
            ckpt.hparams = json.loads(value)
        elif key == "tensor":
            name, dims = value.rsplit(" ", 1)
            ckpt.shapes[name] = tuple(int(n) for n in dims.split("x"))
        else:
            raise CheckpointError(f"unknown manifest key {key!r}")
    if ckpt.version == -1:
        raise CheckpointVersionError("manifest carries no version")
    return ckpt


def read_manifest(path) -> Checkpoint:
    """Read only the manifest: kind, hyperparameters and tensor shapes, no payloads."""
    with open(path, "rb") as fh:
        return _read_header(fh)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        ckpt = _read_header(fh)
        for name, shape in ckpt.shapes.items():
            n = int(np.prod(shape))
            buf = fh.read(n * _DTYPE.itemsize)
            if len(buf) != n * _DTYPE.itemsize:
                raise CheckpointTruncatedError(
                    f"payload for tensor {name!r} truncated: {len(buf)} of {n * _DTYPE.itemsize} bytes")
            ckpt.tensors[name] = np.frombuffer(buf, dtype=_DTYPE).reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last tensor payload")
    return ckpt


def model_checkpoint(model) -> Checkpoint:
    return Checkpoint(kind=model.kind, hparams=model.hparams(),
                      tensors={k: v.astype(_DTYPE) for k, v in model.params.params.items()})


def _validate_shapes(ckpt: Checkpoint) -> None:
    hp, t = ckpt.hparams, ckpt.tensors
    if "embed" not in t:
        raise CheckpointShapeError("checkpoint has no context embedding table")
    n_ctx, emb = t["embed"].shape
    if n_ctx != hp["n_contexts"]:
        raise CheckpointShapeError(f"embedding rows {n_ctx} != n_contexts {hp['n_contexts']}")
    store = ParamStore(t)
    depth = n_layers(store)
    width = hp["dim"] + 2 * hp["n_freq"] + 1 + emb
    for i in range(depth):
        W, b = t[f"layer{i}.W"], t.get(f"layer{i}.b")
        if W.shape[0] != width or b is None or b.shape != (W.shape[1],):
            raise CheckpointShapeError(f"tensor layer{i} has inconsistent shape {W.shape}")
        width = W.shape[1]
    if depth == 0 or width != hp["dim"]:
        raise CheckpointShapeError(f"network output width {width} != data dim {hp['dim']}")


def checkpoint_model(ckpt: Checkpoint):
    """Rebuild the model a checkpoint describes (parameters widened back to float64)."""
    _validate_shapes(ckpt)
    params = ParamStore({k: v.astype(np.float64) for k, v in ckpt.tensors.items()})
    if ckpt.kind == "consistency":
        return ConsistencyModel(params=params, **ckpt.hparams)
    if ckpt.kind == "diffusion":
        return ScoreModel(params=params, **ckpt.hparams)
    raise CheckpointError(f"unknown model kind {ckpt.kind!r}")


def save_model(path, model) -> Path:
    return save_checkpoint(path, model_checkpoint(model))


def load_model(path):
    return checkpoint_model(load_checkpoint(path))
