import gzip
from pathlib import Path
import struct

import numpy as np
import pytest
import torch

from core import DATA_PATH
from core.datasets import Dataset
from training.tiny_model import desk_cnn, dws_net, residual_net, two_layer_net


def write_idx(path: Path, array: np.ndarray, type_code: int = 0x08, compress: bool = False) -> Path:
    "Write an IDX file (big-endian) for tests."
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    data = bytes([0, 0, type_code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    data += np.ascontiguousarray(array, dtype=dtypes[type_code]).tobytes()
    if compress:
        path = path.with_suffix(path.suffix + ".gz")
        with gzip.open(path, "wb") as f:
            f.write(data)
    else:
        path.write_bytes(data)
    return path


def random_images(n: int, channels: int = 1, size: int = 4, seed: int = 0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand((n, channels, size, size), generator=g, dtype=torch.float64)


@pytest.fixture
def images():
    return random_images(32)


@pytest.fixture
def dataset(images):
    labels = torch.arange(len(images)) % 3
    return Dataset(images, labels, num_classes=3)


@pytest.fixture
def small_net():
    return two_layer_net(seed=1)


@pytest.fixture
def dws_graph():
    return dws_net(seed=2)


@pytest.fixture
def res_graph():
    return residual_net(seed=3)


@pytest.fixture
def desk_graph():
    return desk_cnn(width=4, num_classes=3, seed=4)


@pytest.fixture
def idx_dataset(tmp_path):
    "Synthetic 28x28 ubyte images (and labels) written as IDX files."
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(64, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=64, dtype=np.uint8)
    return write_idx(tmp_path / "images-idx3-ubyte", images), write_idx(tmp_path / "labels-idx1-ubyte", labels)


@pytest.fixture(scope="session")
def mnist_path():
    from scripts.desk_scale import find_mnist

    if find_mnist(DATA_PATH) is None:
        pytest.skip(f"MNIST IDX files not found under {DATA_PATH}")
    return DATA_PATH
