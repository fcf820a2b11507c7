import json

import numpy as np
import pytest
import torch

from conftest import write_idx
from core.datasets import Dataset, load_dataset, parse_idx, read_idx, select_calibration, select_subset
from core.exceptions import (
    BadMagic,
    BlobSizeMismatch,
    CyclicGraph,
    DanglingRef,
    KTooLarge,
    ParseError,
    ShapeMismatch,
    Truncated,
)
from core.graph import Graph, Layer, graphs_equal
from core.kernels import LayerKernel, LayerKind
from core.model_io import load_model, save_model
from training.tiny_model import bn_layer, desk_cnn


class TestGraph:
    def test_forward_reference_is_cyclic(self):
        relu = Layer("a", LayerKernel(LayerKind.RELU), ["b"])
        relu2 = Layer("b", LayerKernel(LayerKind.RELU), ["input"])
        with pytest.raises(CyclicGraph):
            Graph([relu, relu2])

    def test_self_reference_is_cyclic(self):
        with pytest.raises(CyclicGraph):
            Graph([Layer("a", LayerKernel(LayerKind.RELU), ["a"])])

    def test_unknown_reference_dangles(self):
        with pytest.raises(DanglingRef):
            Graph([Layer("a", LayerKernel(LayerKind.RELU), ["nowhere"])])

    def test_add_needs_two_inputs(self):
        with pytest.raises(ShapeMismatch):
            Graph([Layer("a", LayerKernel(LayerKind.ADD), ["input"])])

    def test_logits_skip_softmax(self):
        g = desk_cnn(softmax=True)
        assert g.output_id == "softmax"
        assert g.logits_id == "fc"
        x = torch.rand(2, 1, 28, 28, dtype=torch.float64)
        torch.testing.assert_close(g.run(x), torch.softmax(g.logits(x), dim=1))

    def test_without_rewires_consumers(self, desk_graph):
        g = desk_graph.without("relu1", rewire_to="conv1")
        assert g["dws"].inputs == ["conv1"]
        assert "relu1" not in g
        assert "relu1" in desk_graph

    def test_capture_returns_every_value(self, desk_graph):
        values = desk_graph.run(torch.rand(1, 1, 28, 28, dtype=torch.float64), capture=True)
        assert set(values) == {"input"} | {layer.id for layer in desk_graph}


class TestModelIO:
    def test_round_trip(self, tmp_path):
        g = desk_cnn(batch_norm=True, softmax=True)
        save_model(g, tmp_path / "model.json")
        loaded = load_model(tmp_path / "model.json")
        assert graphs_equal(g, loaded)
        assert loaded.metadata["name"] == "desk_cnn"

    def test_missing_blob(self, tmp_path, small_net):
        save_model(small_net, tmp_path / "model.json")
        (tmp_path / "conv.weights.bin").unlink()
        with pytest.raises(DanglingRef):
            load_model(tmp_path / "model.json")

    def test_blob_size_mismatch(self, tmp_path, small_net):
        save_model(small_net, tmp_path / "model.json")
        manifest = json.loads((tmp_path / "model.json").read_text())
        manifest["layers"][0]["bias_shape"] = [2]
        (tmp_path / "model.json").write_text(json.dumps(manifest))
        (tmp_path / "conv.bias.bin").write_bytes(b"\0" * 7)
        with pytest.raises(BlobSizeMismatch):
            load_model(tmp_path / "model.json")

    def test_bad_json(self, tmp_path):
        (tmp_path / "model.json").write_text("{not json")
        with pytest.raises(ParseError):
            load_model(tmp_path / "model.json")

    def test_unknown_kind(self, tmp_path, small_net):
        save_model(small_net, tmp_path / "model.json")
        manifest = json.loads((tmp_path / "model.json").read_text())
        manifest["layers"][1]["kind"] = "MaxPool"
        (tmp_path / "model.json").write_text(json.dumps(manifest))
        with pytest.raises(ParseError):
            load_model(tmp_path / "model.json")

    def test_cyclic_manifest(self, tmp_path, small_net):
        save_model(small_net, tmp_path / "model.json")
        manifest = json.loads((tmp_path / "model.json").read_text())
        manifest["layers"][0]["inputs"] = ["fc"]
        (tmp_path / "model.json").write_text(json.dumps(manifest))
        with pytest.raises(CyclicGraph):
            load_model(tmp_path / "model.json")

    def test_bn_blob_round_trip(self, tmp_path):
        g = Graph([bn_layer("bn", "input", 3, torch.Generator().manual_seed(0))])
        save_model(g, tmp_path / "m.json")
        assert graphs_equal(g, load_model(tmp_path / "m.json"))


class TestIdx:
    def test_ubyte_scaling(self):
        data = bytes([0, 0, 0x08, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 64])
        t = parse_idx(data)
        assert t.shape == (2, 2)
        assert t.tolist() == [[0.0, 1.0], [128 / 255, 64 / 255]]

    def test_zero_dims(self):
        with pytest.raises(BadMagic):
            parse_idx(bytes([0, 0, 0x08, 0]))

    def test_bad_magic(self):
        with pytest.raises(BadMagic):
            parse_idx(bytes([1, 0, 0x08, 1, 0, 0, 0, 1, 5]))
        with pytest.raises(BadMagic):
            parse_idx(bytes([0, 0, 0x07, 1, 0, 0, 0, 1, 5]))

    def test_truncated(self):
        with pytest.raises(Truncated):
            parse_idx(bytes([0, 0, 0x08]))
        with pytest.raises(Truncated):
            parse_idx(bytes([0, 0, 0x08, 2, 0, 0, 0, 2]))
        with pytest.raises(Truncated):
            parse_idx(bytes([0, 0, 0x08, 1, 0, 0, 0, 3, 1, 2]))

    def test_trailing_bytes(self):
        with pytest.raises(ParseError):
            parse_idx(bytes([0, 0, 0x08, 1, 0, 0, 0, 1, 1, 2]))

    def test_image_stack_gains_channel_axis(self, tmp_path):
        images = np.zeros((5, 28, 28), dtype=np.uint8)
        path = write_idx(tmp_path / "imgs", images, compress=True)
        assert read_idx(path).shape == (5, 1, 28, 28)

    def test_labels_and_floats(self, tmp_path):
        labels = write_idx(tmp_path / "labels", np.array([3, 1, 4], dtype=np.uint8))
        t = read_idx(labels, scale=False)
        assert t.dtype == torch.int64 and t.tolist() == [3, 1, 4]
        floats = write_idx(tmp_path / "floats", np.array([0.5, -2.0]), type_code=0x0E)
        assert read_idx(floats).tolist() == [0.5, -2.0]

    def test_load_dataset(self, idx_dataset):
        ds = load_dataset(*idx_dataset)
        assert ds.images.shape == (64, 1, 28, 28)
        assert ds.is_labeled and ds.num_classes <= 10


class TestDatasets:
    def test_invalid_labels(self):
        with pytest.raises(ValueError):
            Dataset(torch.zeros(2, 1, 2, 2, dtype=torch.float64), torch.tensor([0, 3]), num_classes=3)
        with pytest.raises(ValueError):
            Dataset(torch.full((1, 1, 2, 2), float("nan"), dtype=torch.float64))

    def test_select_calibration_full_set(self, dataset):
        calib = select_calibration(dataset, len(dataset), seed=0)
        assert not calib.is_labeled
        assert sorted(calib.images.flatten().tolist()) == sorted(dataset.images.flatten().tolist())

    def test_select_calibration_deterministic(self, dataset):
        a = select_calibration(dataset, 5, seed=7)
        b = select_calibration(dataset, 5, seed=7)
        assert torch.equal(a.images, b.images)

    def test_select_calibration_distinct(self):
        ds = Dataset(torch.arange(600, dtype=torch.float64).reshape(600, 1, 1, 1))
        calib = select_calibration(ds, 100, seed=0)
        assert len(set(calib.images.flatten().tolist())) == 100

    def test_k_too_large(self, dataset):
        with pytest.raises(KTooLarge):
            select_calibration(dataset, len(dataset) + 1, seed=0)

    def test_select_subset(self, dataset):
        subset = select_subset(dataset, 0.25, seed=1)
        assert len(subset) == 8 and not subset.is_labeled
        assert select_subset(dataset, 0.25, seed=1, keep_labels=True).is_labeled
