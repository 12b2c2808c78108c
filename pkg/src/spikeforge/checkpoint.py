"""SFCK checkpoint files.

Layout (all integers little-endian u32)::

    b"SFCK" | version | metadata length | metadata (UTF-8 JSON) | weight blobs

The metadata carries task, mode, stage, synapse and every layer spec with its
neuron parameters. Blobs are raw ``<f4`` arrays in layer order, ``W`` before
``b``; their shapes follow from the layer specs. ANN and SNN networks share
the format, ``mode`` is only a tag.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import atomic_write
from .graph import LayerSpec, NetworkSpec
from .neuron import NeuronParams

MAGIC = b"SFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _layer_meta(layer: LayerSpec) -> dict:
    meta = asdict(layer)
    meta["in_shape"] = list(layer.in_shape)
    meta["out_shape"] = list(layer.out_shape)
    return meta


def _layer_from_meta(meta: dict) -> LayerSpec:
    meta = dict(meta)
    meta["params"] = NeuronParams(**meta["params"])
    meta["in_shape"] = tuple(meta["in_shape"])
    meta["out_shape"] = tuple(meta["out_shape"])
    return LayerSpec(**meta)


def checkpoint_bytes(net: NetworkSpec) -> bytes:
    meta = {"task": net.task, "mode": net.mode, "stage": net.stage, "synapse": net.synapse,
            "layers": [_layer_meta(layer) for layer in net.layers]}
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    blobs = [np.ascontiguousarray(w[k], dtype="<f4").tobytes()
             for w, layer in zip(net.weights, net.layers) for k in layer.weight_shapes()]
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(head)), head] + blobs)


def save_checkpoint(path, net: NetworkSpec) -> None:
    """Write atomically: a failed save never leaves a partial file behind."""
    atomic_write(path, checkpoint_bytes(net))


def checkpoint_from_bytes(buf: bytes, name: str = "<bytes>") -> NetworkSpec:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{name}: not a checkpoint (bad magic)")
    if len(buf) < 12:
        raise CheckpointError(f"{name}: truncated header")
    version, size = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{name}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(buf[12:12 + size].decode("utf-8"))
        layers = [_layer_from_meta(m) for m in meta["layers"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{name}: corrupt metadata ({exc})") from exc
    pos = 12 + size
    weights = []
    for layer in layers:
        w = {}
        for key, shape in layer.weight_shapes().items():
            count = int(np.prod(shape))
            if pos + 4 * count > len(buf):
                raise CheckpointError(f"{name}: truncated weight data")
            w[key] = np.frombuffer(buf, "<f4", count, pos).reshape(shape).astype(np.float32)
            pos += 4 * count
        weights.append(w)
    if pos != len(buf):
        raise CheckpointError(f"{name}: {len(buf) - pos} trailing bytes")
    return NetworkSpec(layers, weights, meta["mode"], meta["synapse"], meta["task"], meta["stage"])


def load_checkpoint(path) -> NetworkSpec:
    path = Path(path)
    return checkpoint_from_bytes(path.read_bytes(), str(path))
