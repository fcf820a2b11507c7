import pytest
import torch

from core.datasets import Dataset
from core.exceptions import EmptyCalibration, UnsupportedKind
from core.graph import Graph, Layer
from core.kernels import LayerKernel, LayerKind
from quant.calibration import (
    CalibStats,
    QuantConfig,
    activation_sites,
    build_params,
    calibrate,
    params_from_dict,
    params_to_dict,
    site_signed,
)
from quant.quantizer import QuantMode
from training.tiny_model import desk_cnn


def relu_graph():
    return Graph([Layer("relu", LayerKernel(LayerKind.RELU), ["input"])])


def zero_fc_graph():
    return Graph([
        Layer("fc", LayerKernel(LayerKind.FULLY_CONNECTED), ["input"],
              weights=torch.ones(2, 4, dtype=torch.float64), bias=torch.zeros(2, dtype=torch.float64)),
    ])


def test_running_max_over_batches():
    images = torch.tensor([3.0, 5.0], dtype=torch.float64).reshape(2, 1, 1, 1)
    stats = calibrate(relu_graph(), Dataset(images), batch_size=1)
    assert stats.act_max["input"] == 5.0
    assert stats.act_min["input"] == 3.0
    assert stats.n_samples == 2


def test_per_channel_weight_max_abs():
    stats = CalibStats()
    stats.set_weights("fc.weight", torch.tensor([[1.0, -2.0], [0.5, 0.1]], dtype=torch.float64))
    assert stats.weight_channel_max_abs["fc.weight"].tolist() == [2.0, 0.5]
    assert stats.weight_max_abs["fc.weight"] == 2.0


def test_empty_calibration(small_net):
    with pytest.raises(EmptyCalibration):
        calibrate(small_net, torch.zeros(0, 1, 4, 4, dtype=torch.float64))


def test_unfolded_batch_norm_is_rejected():
    with pytest.raises(UnsupportedKind):
        activation_sites(desk_cnn(batch_norm=True))


def test_sites_fuse_activations(desk_graph, res_graph):
    assert activation_sites(desk_graph) == ["input", "relu1", "relu2", "relu3", "pool", "fc"]
    # conv2 feeds the Add, so it keeps its own site
    assert activation_sites(res_graph) == ["input", "relu1", "conv2", "add", "relu2", "pool", "fc"]


def test_sites_stop_at_logits():
    assert activation_sites(desk_cnn(width=2, softmax=True))[-1] == "fc"


def test_signedness(desk_graph):
    assert site_signed(desk_graph, "input")
    assert not site_signed(desk_graph, "relu1")
    assert not site_signed(desk_graph, "pool")
    assert site_signed(desk_graph, "fc")


def test_degenerate_range_is_floored():
    stats = calibrate(zero_fc_graph(), torch.zeros(3, 4, dtype=torch.float64).reshape(3, 4, 1, 1))
    assert stats.act_max["fc"] == 0.0
    with pytest.warns(UserWarning):
        params = build_params(zero_fc_graph(), stats)
    assert params["fc"].t_max.item() == 1e-12


def test_build_params_granularity(desk_graph, images):
    x = torch.rand(16, 1, 28, 28, dtype=torch.float64)
    stats = calibrate(desk_graph, x)
    params = build_params(desk_graph, stats, QuantConfig(granularity="scalar", dws_granularity="vector"))
    assert params["conv1.weight"].t_max.dim() == 0
    assert params["dws.weight"].axis == 0
    assert params["dws.weight"].t_max.shape == (4,)

    unsigned = params["relu1"]
    assert not unsigned.signed and unsigned.t_max.item() == pytest.approx(stats.act_max["relu1"])
    signed = params["fc"]
    assert signed.t_max.item() == max(abs(stats.act_min["fc"]), abs(stats.act_max["fc"]))


def test_asymmetric_mode_keeps_weights_symmetric(desk_graph):
    stats = calibrate(desk_graph, torch.rand(8, 1, 28, 28, dtype=torch.float64))
    params = build_params(desk_graph, stats, QuantConfig(mode="asym"))
    assert params["relu2"].mode == QuantMode.ASYMMETRIC
    assert params["dws.weight"].mode == QuantMode.SYMMETRIC


def test_stats_and_params_serialize(desk_graph):
    stats = calibrate(desk_graph, torch.rand(4, 1, 28, 28, dtype=torch.float64))
    restored = CalibStats.from_dict(stats.to_dict())
    assert restored.act_max == stats.act_max
    assert torch.equal(restored.weight_channel_max_abs["dws.weight"], stats.weight_channel_max_abs["dws.weight"])

    params = build_params(desk_graph, stats)
    back = params_from_dict(params_to_dict(params))
    assert set(back) == set(params)
    assert torch.equal(back["dws.weight"].t_max, params["dws.weight"].t_max)


def test_bad_config():
    with pytest.raises(AssertionError):
        QuantConfig(mode="log")
