from __future__ import annotations

from dataclasses import dataclass
import gzip
import logging
import math
import os
from pathlib import Path

import numpy as np
import torch

from .exceptions import BadMagic, KTooLarge, ParseError, ShapeMismatch, Truncated

logger = logging.getLogger(__name__)

# IDX type code -> big-endian numpy dtype
IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    images: torch.Tensor  # [N, C, H, W] float64
    labels: torch.Tensor = None  # [N] int64, None for unlabeled data
    num_classes: int = None

    def __post_init__(self):
        if self.images.dim() != 4:
            raise ShapeMismatch(f"Dataset images must be [N, C, H, W], got {tuple(self.images.shape)}")
        if not bool(torch.isfinite(self.images).all()):
            raise ValueError("Dataset images contain non-finite values")
        if self.labels is not None:
            if self.labels.shape != (self.images.shape[0],):
                raise ShapeMismatch(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
            if self.num_classes is not None and len(self.labels):
                lo, hi = int(self.labels.min()), int(self.labels.max())
                if lo < 0 or hi >= self.num_classes:
                    raise ValueError(f"Labels must lie in [0, {self.num_classes}), found [{lo}, {hi}]")

    def __len__(self):
        return self.images.shape[0]

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def subset(self, indices: torch.Tensor, keep_labels: bool = True) -> Dataset:
        labels = self.labels[indices] if keep_labels and self.labels is not None else None
        return Dataset(self.images[indices], labels, self.num_classes if labels is not None else None)

    def unlabeled(self) -> Dataset:
        return Dataset(self.images)


def _open(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def parse_idx(data: bytes, scale: bool = True) -> torch.Tensor:
    if len(data) < 4:
        raise Truncated(f"IDX header needs 4 bytes, got {len(data)}")
    if data[0] != 0 or data[1] != 0 or data[2] not in IDX_DTYPES:
        raise BadMagic(f"Not an IDX file: magic {data[:4].hex()}")
    dtype = IDX_DTYPES[data[2]]
    ndim = data[3]
    if ndim == 0:
        raise BadMagic("IDX header declares 0 dimensions")

    header = 4 + 4 * ndim
    if len(data) < header:
        raise Truncated(f"IDX header declares {ndim} dims but the file ends after {len(data)} bytes")
    shape = [int(d) for d in np.frombuffer(data, dtype=">u4", count=ndim, offset=4)]
    payload = math.prod(shape) * dtype.itemsize
    if len(data) < header + payload:
        raise Truncated(f"IDX payload needs {payload} bytes, got {len(data) - header}")
    if len(data) > header + payload:
        raise ParseError(f"IDX file has {len(data) - header - payload} trailing bytes")

    array = np.frombuffer(data, dtype=dtype, count=math.prod(shape), offset=header).reshape(shape)
    if scale and dtype == IDX_DTYPES[0x08]:
        t = torch.from_numpy(array.astype(np.float64) / 255.0)
        if t.dim() == 3:  # [N, H, W] image stacks gain a channel axis
            t = t.unsqueeze(1)
        return t
    if dtype.kind == "f":
        return torch.from_numpy(array.astype(np.float64))
    return torch.from_numpy(array.astype(np.int64))


def read_idx(path: os.PathLike, scale: bool = True) -> torch.Tensor:
    """Read an IDX file (optionally gzip-compressed).

    Unsigned-byte payloads are scaled to [0, 1] reals when `scale` is set; pass scale=False for
    label files.
    """
    path = Path(path)
    t = parse_idx(_open(path), scale=scale)
    logger.debug("Read %s with shape %s", path, tuple(t.shape))
    return t


def load_dataset(images_path: os.PathLike, labels_path: os.PathLike = None, num_classes: int = None) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path, scale=False) if labels_path else None
    if labels is not None and num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(images, labels, num_classes)


def _permutation(n: int, seed: int) -> torch.Tensor:
    # numpy's PCG64 stream is specified to be identical on every platform
    return torch.from_numpy(np.random.default_rng(seed).permutation(n))


def select_calibration(ds: Dataset, k: int, seed: int) -> Dataset:
    "A seeded uniform sample of k images without replacement; labels are dropped."
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k > len(ds):
        raise KTooLarge(f"Cannot select {k} calibration images from {len(ds)}")
    return ds.subset(_permutation(len(ds), seed)[:k], keep_labels=False)


def select_subset(ds: Dataset, fraction: float, seed: int, keep_labels: bool = False) -> Dataset:
    "A seeded fraction of the dataset, unlabeled by default (the fine-tuning data)."
    assert 0 < fraction <= 1, f"fraction must be in (0, 1], got {fraction}"
    k = max(1, round(fraction * len(ds)))
    return ds.subset(_permutation(len(ds), seed)[:k], keep_labels=keep_labels)
