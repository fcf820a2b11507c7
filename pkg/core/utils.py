from enum import Enum
import hashlib
import json
import os
from pathlib import Path
from typing import Iterable

import numpy as np
import torch


class MyEnum(Enum):
    @classmethod
    def from_value(cls, value):
        for member in cls:
            if member.value == value:
                return member
        raise ValueError(f"{value} is not a valid value in {cls.__name__}")

    def __eq__(self, other):
        return hasattr(other, "value") and self.value == other.value

    def __hash__(self):
        return hash(self.value)


def num_parameters(params: Iterable[torch.Tensor], requires_grad: bool = None) -> int:
    total = 0
    for p in params:
        if requires_grad is None or p.requires_grad == requires_grad:
            total += p.numel()
    return total


# Tensors are written as nested lists; python floats repr round-trips float64 exactly
class CustomEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, torch.Tensor):
            return obj.detach().cpu().tolist()
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (np.integer, np.floating)):
            return obj.item()
        if isinstance(obj, Enum):
            return obj.value
        if isinstance(obj, Path):
            return str(obj)
        return super().default(obj)


def canonical_json(obj) -> str:
    "JSON text that is byte-identical for equal inputs."
    return json.dumps(obj, cls=CustomEncoder, sort_keys=True, indent=2) + "\n"


def config_hash(config: dict, exclude: Iterable[str] = ()) -> str:
    d = {k: v for k, v in config.items() if k not in set(exclude)}
    txt = json.dumps(d, cls=CustomEncoder, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(txt.encode("utf-8")).hexdigest()


def write_json(path: os.PathLike, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj), encoding="utf-8")
    return path


def read_json(path: os.PathLike) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
