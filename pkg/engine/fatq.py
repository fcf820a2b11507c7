"""`.fatq` container for compiled models.

Layout (little-endian): b"FATQ", u32 version, u32 manifest length, manifest JSON, then every
blob (integer weights, int32 biases, float64 multipliers) starting on an 8-byte boundary.
"""
from __future__ import annotations

import json
import math
import os
from pathlib import Path
import struct

import numpy as np
import torch

from core.exceptions import BadVersion, Corrupt
from core.kernels import LayerKernel, LayerKind
from core.utils import CustomEncoder
from quant.quantizer import QuantParams
from .int8 import QuantizedLayer, QuantizedModel

MAGIC = b"FATQ"
VERSION = 1
HEADER = struct.Struct("<4sII")
ALIGN = 8


def _pad(n: int) -> int:
    return -n % ALIGN


def _code_dtype(bits: int) -> np.dtype:
    return np.dtype("<i1") if bits <= 8 else np.dtype("<i2")


class _BlobWriter:
    def __init__(self):
        self.chunks = []
        self.offset = 0

    def add(self, t: torch.Tensor, dtype: np.dtype) -> dict:
        data = np.ascontiguousarray(t.detach().cpu().numpy().astype(dtype)).tobytes()
        entry = {"offset": self.offset, "shape": list(t.shape), "dtype": dtype.str}
        self.chunks.append(data + b"\0" * _pad(len(data)))
        self.offset += len(data) + _pad(len(data))
        return entry


def export_model(m: QuantizedModel) -> bytes:
    blobs = _BlobWriter()
    layers = []
    for ql in m.layers:
        entry = {
            "id": ql.id,
            "kind": ql.kind.value,
            "params": ql.kernel.params(),
            "inputs": ql.inputs,
            "out_site": ql.out_site,
            "fused": None if ql.fused is None else ql.fused.value,
        }
        if ql.is_mac:
            entry["weight_params"] = ql.weight_params.to_dict()
            entry["weights"] = blobs.add(ql.weights, _code_dtype(ql.weight_params.bits))
            entry["bias"] = None if ql.bias is None else blobs.add(ql.bias, np.dtype("<i4"))
            entry["multiplier"] = blobs.add(ql.multiplier, np.dtype("<f8"))
        layers.append(entry)

    manifest = {
        "input_id": m.input_id,
        "logits_id": m.logits_id,
        "metadata": m.metadata,
        "sites": {site: p.to_dict() for site, p in m.sites.items()},
        "layers": layers,
    }
    text = json.dumps(manifest, cls=CustomEncoder, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = HEADER.pack(MAGIC, VERSION, len(text)) + text
    return head + b"\0" * _pad(len(head)) + b"".join(blobs.chunks)


def _read_blob(data: bytes, base: int, entry: dict) -> torch.Tensor:
    dtype = np.dtype(entry["dtype"])
    shape = entry["shape"]
    start = base + entry["offset"]
    end = start + math.prod(shape) * dtype.itemsize
    if entry["offset"] < 0 or end > len(data):
        raise Corrupt(f"Blob at offset {entry['offset']} runs past the end of the stream")
    array = np.frombuffer(data, dtype=dtype, count=math.prod(shape), offset=start).reshape(shape)
    return torch.from_numpy(array.astype(np.float64 if dtype.kind == "f" else np.int64))


def import_model(data: bytes) -> QuantizedModel:
    if len(data) < HEADER.size:
        raise Corrupt(f"Stream of {len(data)} bytes is shorter than the header")
    magic, version, n = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise Corrupt(f"Bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"Unsupported .fatq version {version}, expected {VERSION}")
    end = HEADER.size + n
    if end > len(data):
        raise Corrupt("Manifest runs past the end of the stream")
    base = end + _pad(end)

    try:
        manifest = json.loads(data[HEADER.size:end].decode("utf-8"))
        sites = {site: QuantParams.from_dict(d) for site, d in manifest["sites"].items()}
        layers = []
        for entry in manifest["layers"]:
            ql = QuantizedLayer(
                id=entry["id"],
                kernel=LayerKernel.from_params(entry["kind"], entry["params"]),
                inputs=list(entry["inputs"]),
                out_site=entry["out_site"],
                fused=None if entry["fused"] is None else LayerKind.from_value(entry["fused"]),
            )
            if ql.is_mac:
                ql.weight_params = QuantParams.from_dict(entry["weight_params"])
                ql.weights = _read_blob(data, base, entry["weights"])
                ql.bias = None if entry["bias"] is None else _read_blob(data, base, entry["bias"]).to(torch.int32)
                ql.multiplier = _read_blob(data, base, entry["multiplier"])
            layers.append(ql)
        model = QuantizedModel(
            layers=layers,
            sites=sites,
            input_id=manifest["input_id"],
            logits_id=manifest["logits_id"],
            metadata=manifest.get("metadata") or {},
        )
    except Corrupt:
        raise
    except (ValueError, KeyError, TypeError, AssertionError) as e:
        raise Corrupt(f"Malformed .fatq manifest: {e}") from e

    blob_end = max(
        [_blob_end(entry) for ql_entry in manifest["layers"] for entry in _blob_entries(ql_entry)],
        default=0,
    )
    if base + blob_end != len(data):
        raise Corrupt(f"Stream has {len(data) - base - blob_end} unexpected trailing bytes")
    return model


def _blob_entries(layer_entry: dict) -> list[dict]:
    return [layer_entry[k] for k in ("weights", "bias", "multiplier") if layer_entry.get(k)]


def _blob_end(entry: dict) -> int:
    size = math.prod(entry["shape"]) * np.dtype(entry["dtype"]).itemsize
    return entry["offset"] + size + _pad(size)


def save_fatq(m: QuantizedModel, path: os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(export_model(m))
    return path


def load_fatq(path: os.PathLike) -> QuantizedModel:
    return import_model(Path(path).read_bytes())
