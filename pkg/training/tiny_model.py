"""Small float CNN graphs used for desk-scale experiments and tests."""
import math

import torch

from core.graph import INPUT_ID, Graph, Layer
from core.kernels import LayerKernel, LayerKind


def _randn(shape, generator, std=1.0) -> torch.Tensor:
    return torch.randn(shape, generator=generator, dtype=torch.float64) * std


def conv_layer(layer_id, inp, c_in, c_out, k, generator, stride=1, padding=0, kind=LayerKind.CONV2D) -> Layer:
    fan_in = (1 if kind == LayerKind.DWS_CONV2D else c_in) * k * k
    shape = (c_out, 1, k, k) if kind == LayerKind.DWS_CONV2D else (c_out, c_in, k, k)
    return Layer(
        layer_id,
        LayerKernel(kind, stride=stride, padding=padding),
        [inp],
        weights=_randn(shape, generator, math.sqrt(2.0 / fan_in)),
        bias=_randn((c_out,), generator, 0.1),
    )


def dws_layer(layer_id, inp, channels, k, generator, stride=1, padding=0) -> Layer:
    return conv_layer(layer_id, inp, channels, channels, k, generator, stride, padding, kind=LayerKind.DWS_CONV2D)


def fc_layer(layer_id, inp, n_in, n_out, generator) -> Layer:
    return Layer(
        layer_id,
        LayerKernel(LayerKind.FULLY_CONNECTED),
        [inp],
        weights=_randn((n_out, n_in), generator, math.sqrt(1.0 / n_in)),
        bias=_randn((n_out,), generator, 0.1),
    )


def bn_layer(layer_id, inp, channels, generator=None, eps=1e-5) -> Layer:
    "BatchNorm with (gamma, beta, mean, var); random statistics when a generator is given, identity otherwise."
    if generator is None:
        stats = torch.stack([
            torch.ones(channels), torch.zeros(channels), torch.zeros(channels), torch.ones(channels),
        ]).to(torch.float64)
    else:
        stats = torch.stack([
            1 + 0.3 * _randn((channels,), generator),
            0.2 * _randn((channels,), generator),
            0.2 * _randn((channels,), generator),
            0.5 + torch.rand((channels,), generator=generator, dtype=torch.float64),
        ])
    return Layer(layer_id, LayerKernel(LayerKind.BATCH_NORM, eps=eps), [inp], weights=stats)


def activation(layer_id, inp, kind=LayerKind.RELU6) -> Layer:
    return Layer(layer_id, LayerKernel(kind), [inp])


def global_pool(layer_id, inp) -> Layer:
    return Layer(layer_id, LayerKernel(LayerKind.AVG_POOL), [inp])


def desk_cnn(
    in_channels: int = 1,
    num_classes: int = 10,
    width: int = 8,
    seed: int = 0,
    batch_norm: bool = False,
    softmax: bool = False,
) -> Graph:
    """conv 3x3/2 -> ReLU6 -> DWS 3x3 -> ReLU6 -> conv 1x1 -> ReLU6 -> global pool -> FC.

    With `batch_norm`, identity BatchNorm layers follow both convolutions feeding a ReLU6 so the
    folding transform has something to fold (trained statistics are not modelled).
    """
    g = torch.Generator().manual_seed(seed)
    layers = [conv_layer("conv1", INPUT_ID, in_channels, width, 3, g, stride=2, padding=1)]
    if batch_norm:
        layers.append(bn_layer("bn1", "conv1", width))
    layers.append(activation("relu1", layers[-1].id))
    layers.append(dws_layer("dws", "relu1", width, 3, g, padding=1))
    if batch_norm:
        layers.append(bn_layer("bn2", "dws", width))
    layers += [
        activation("relu2", layers[-1].id),
        conv_layer("conv2", "relu2", width, 2 * width, 1, g),
        activation("relu3", "conv2"),
        global_pool("pool", "relu3"),
        fc_layer("fc", "pool", 2 * width, num_classes, g),
    ]
    if softmax:
        layers.append(Layer("softmax", LayerKernel(LayerKind.SOFTMAX), ["fc"]))
    return Graph(layers, metadata={"name": "desk_cnn", "seed": seed})


def two_layer_net(seed: int = 0, in_channels: int = 1, channels: int = 2, size: int = 4, num_classes: int = 3) -> Graph:
    "conv 3x3 -> ReLU -> FC"
    g = torch.Generator().manual_seed(seed)
    return Graph([
        conv_layer("conv", INPUT_ID, in_channels, channels, 3, g, padding=1),
        activation("relu", "conv", LayerKind.RELU),
        fc_layer("fc", "relu", channels * size * size, num_classes, g),
    ], metadata={"name": "two_layer_net", "seed": seed})


def dws_net(seed: int = 0, channels: int = 4, act: LayerKind = LayerKind.RELU6, num_classes: int = 3) -> Graph:
    "conv -> ReLU6 -> DWS -> [act] -> conv 1x1 -> ReLU6 -> pool -> FC, with uneven DWS filter magnitudes."
    g = torch.Generator().manual_seed(seed)
    dws = dws_layer("dws", "relu1", channels, 3, g, padding=1)
    dws.weights = dws.weights * torch.logspace(-1, 0.5, channels, dtype=torch.float64).reshape(-1, 1, 1, 1)
    layers = [
        conv_layer("conv1", INPUT_ID, 1, channels, 3, g, padding=1),
        activation("relu1", "conv1"),
        dws,
    ]
    if act is not None:
        layers.append(activation("act", "dws", act))
    layers += [
        conv_layer("conv2", layers[-1].id, channels, channels, 1, g),
        activation("relu3", "conv2"),
        global_pool("pool", "relu3"),
        fc_layer("fc", "pool", channels, num_classes, g),
    ]
    return Graph(layers, metadata={"name": "dws_net", "seed": seed})


def residual_net(seed: int = 0, channels: int = 3, num_classes: int = 3) -> Graph:
    "conv -> ReLU -> conv -> Add(skip) -> ReLU -> pool -> FC"
    g = torch.Generator().manual_seed(seed)
    return Graph([
        conv_layer("conv1", INPUT_ID, 1, channels, 3, g, padding=1),
        activation("relu1", "conv1", LayerKind.RELU),
        conv_layer("conv2", "relu1", channels, channels, 3, g, padding=1),
        Layer("add", LayerKernel(LayerKind.ADD), ["conv2", "relu1"]),
        activation("relu2", "add", LayerKind.RELU),
        global_pool("pool", "relu2"),
        fc_layer("fc", "pool", channels, num_classes, g),
    ], metadata={"name": "residual_net", "seed": seed})


def random_toy_net(seed: int) -> Graph:
    "One of the toy structures above with seeded random sizes."
    g = torch.Generator().manual_seed(seed)
    choice = int(torch.randint(0, 3, (1,), generator=g))
    channels = int(torch.randint(2, 5, (1,), generator=g))
    if choice == 0:
        return two_layer_net(seed, channels=channels)
    if choice == 1:
        act = (LayerKind.RELU, LayerKind.RELU6, None)[seed % 3]
        return dws_net(seed, channels=channels, act=act)
    return residual_net(seed, channels=channels)
