"""Model manifest (JSON) plus raw little-endian float64 weight blobs."""
from __future__ import annotations

import json
import logging
import math
import os
from pathlib import Path

import numpy as np
import torch

from .exceptions import BlobSizeMismatch, DanglingRef, ParseError, UnsupportedKind
from .graph import Graph, Layer
from .kernels import LayerKernel
from .utils import write_json

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
BLOB_DTYPE = np.dtype("<f8")


def _blob_name(layer_id: str, name: str) -> str:
    return f"{layer_id}.{name}.bin"


def _write_blob(path: Path, t: torch.Tensor):
    path.write_bytes(np.ascontiguousarray(t.detach().cpu().numpy(), dtype=BLOB_DTYPE).tobytes())


def _read_blob(path: Path, shape: list[int]) -> torch.Tensor:
    if not path.exists():
        raise DanglingRef(f"Blob {path.name} referenced by the manifest does not exist")
    data = path.read_bytes()
    expected = math.prod(shape) * BLOB_DTYPE.itemsize
    if len(data) != expected:
        raise BlobSizeMismatch(f"Blob {path.name} has {len(data)} bytes, shape {shape} needs {expected}")
    array = np.frombuffer(data, dtype=BLOB_DTYPE).reshape(shape)
    return torch.from_numpy(array.astype(np.float64))


def save_model(graph: Graph, path: os.PathLike, metadata: dict = None) -> Path:
    """Write `path` (the manifest) and one blob file per weight/bias next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layers = []
    for layer in graph.layers:
        entry = {
            "id": layer.id,
            "kind": layer.kind.value,
            "params": layer.kernel.params(),
            "inputs": list(layer.inputs),
            "weights": None,
            "bias": None,
        }
        for name, t in (("weights", layer.weights), ("bias", layer.bias)):
            if t is None:
                continue
            blob = _blob_name(layer.id, name)
            _write_blob(path.parent / blob, t)
            entry[name] = blob
            entry[f"{name}_shape"] = list(t.shape)
        layers.append(entry)

    manifest = {
        "version": MANIFEST_VERSION,
        "input_id": graph.input_id,
        "output_id": graph.output_id,
        "layers": layers,
        "metadata": {**graph.metadata, **(metadata or {})},
    }
    write_json(path, manifest)
    logger.info("Saved model with %d layers to %s", len(layers), path)
    return path


def load_model(manifest_path: os.PathLike) -> Graph:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{manifest_path}: {e}") from e

    if not isinstance(manifest, dict) or "layers" not in manifest:
        raise ParseError(f"{manifest_path}: not a model manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise ParseError(f"{manifest_path}: unsupported manifest version {manifest.get('version')}")

    layers = []
    for entry in manifest["layers"]:
        try:
            kernel = LayerKernel.from_params(entry["kind"], entry.get("params"))
            layer = Layer(id=entry["id"], kernel=kernel, inputs=list(entry["inputs"]))
        except (KeyError, TypeError, UnsupportedKind) as e:
            raise ParseError(f"{manifest_path}: bad layer entry {entry!r}: {e}") from e
        for name in ("weights", "bias"):
            if entry.get(name):
                if f"{name}_shape" not in entry:
                    raise ParseError(f"{manifest_path}: layer {layer.id!r} is missing {name}_shape")
                blob = _read_blob(manifest_path.parent / entry[name], entry[f"{name}_shape"])
                setattr(layer, name, blob)
        layers.append(layer)

    return Graph(
        layers,
        output_id=manifest.get("output_id"),
        input_id=manifest.get("input_id", "input"),
        metadata=manifest.get("metadata") or {},
    )
