import pytest
import torch

from conftest import random_images
from core.exceptions import NoPatternFound, OrphanBatchNorm, UnsupportedKind
from core.graph import Graph, Layer, graphs_equal
from core.kernels import LayerKernel, LayerKind
from quant.quantizer import QuantParams, quantize_tensor
from quant.transforms import (
    DwsRescaleReport,
    dws_rescale,
    filter_thresholds,
    find_dws_patterns,
    fold_batch_norm,
    rescale_factors,
)
from training.tiny_model import activation, bn_layer, conv_layer, desk_cnn, dws_layer, dws_net, fc_layer


def f64(v):
    return torch.tensor(v, dtype=torch.float64)


def bn_stats(gamma, beta, mean, var):
    return torch.stack([f64(gamma), f64(beta), f64(mean), f64(var)])


def fc_bn(w, b, stats, eps):
    return Graph([
        Layer("fc", LayerKernel(LayerKind.FULLY_CONNECTED), ["input"], weights=f64(w), bias=f64(b)),
        Layer("bn", LayerKernel(LayerKind.BATCH_NORM, eps=eps), ["fc"], weights=stats),
    ])


class TestFoldBatchNorm:
    def test_identity_bn(self):
        eps = 1e-5
        g = fc_bn([[0.3, -1.2]], [0.7], bn_stats([1.0], [0.0], [0.0], [1 - eps]), eps)
        fc = fold_batch_norm(g)["fc"]
        torch.testing.assert_close(fc.weights, f64([[0.3, -1.2]]), rtol=1e-15, atol=0)
        torch.testing.assert_close(fc.bias, f64([0.7]), rtol=1e-15, atol=0)

    def test_hand_example(self):
        g = fc_bn([[4.0]], [0.0], bn_stats([2.0], [0.5], [1.0], [3.0]), eps=1.0)
        folded = fold_batch_norm(g)
        assert [layer.id for layer in folded] == ["fc"]
        assert folded["fc"].weights.tolist() == [[4.0]]
        assert folded["fc"].bias.tolist() == [-0.5]

    def test_input_graph_untouched(self):
        g = desk_cnn(width=2, batch_norm=True)
        before = g.copy()
        fold_batch_norm(g)
        assert graphs_equal(g, before)

    def test_random_blocks_are_equivalent(self):
        gen = torch.Generator().manual_seed(0)
        for i in range(50):
            kind = (LayerKind.CONV2D, LayerKind.DWS_CONV2D, LayerKind.FULLY_CONNECTED)[i % 3]
            if kind == LayerKind.FULLY_CONNECTED:
                layer = fc_layer("w", "input", 12, 5, gen)
                channels = 5
            elif kind == LayerKind.DWS_CONV2D:
                layer = dws_layer("w", "input", 3, 3, gen, padding=1)
                channels = 3
            else:
                layer = conv_layer("w", "input", 3, 4, 3, gen, padding=1)
                channels = 4
            g = Graph([layer, bn_layer("bn", "w", channels, gen), activation("out", "bn")])
            x = torch.randn((4, 3, 2, 2), generator=gen, dtype=torch.float64)
            folded = fold_batch_norm(g)
            torch.testing.assert_close(folded.run(x), g.run(x), rtol=1e-10, atol=1e-12)

    def test_bn_without_weighted_producer(self):
        g = Graph([bn_layer("bn", "input", 1)])
        with pytest.raises(OrphanBatchNorm):
            fold_batch_norm(g)
        g = Graph([activation("relu", "input"), bn_layer("bn", "relu", 1)])
        with pytest.raises(OrphanBatchNorm):
            fold_batch_norm(g)

    def test_bn_on_shared_producer(self):
        gen = torch.Generator().manual_seed(1)
        g = Graph([
            conv_layer("conv", "input", 1, 2, 1, gen),
            bn_layer("bn", "conv", 2, gen),
            Layer("add", LayerKernel(LayerKind.ADD), ["bn", "conv"]),
        ])
        with pytest.raises(OrphanBatchNorm):
            fold_batch_norm(g)


class TestRescaleFactors:
    def test_hand_example(self):
        t = f64([0.8, 1.2, 0.25])
        x_max = f64([6.0, 6.5, 2.0])
        s, locked, t0 = rescale_factors(t, x_max, capped=True)
        assert t0 == pytest.approx(1.0)
        assert locked.tolist() == [True, True, False]
        assert s.tolist() == pytest.approx([1.0, 1.0, 3.0])

    def test_uncapped_reaches_t0(self):
        s, _, _ = rescale_factors(f64([0.8, 1.2, 0.25]), f64([6.0, 6.5, 2.0]), capped=False)
        assert s.tolist() == pytest.approx([1.0, 1.0, 4.0])

    def test_dead_filters_are_locked(self):
        s, locked, t0 = rescale_factors(f64([0.0, 1.0, 2.0]), f64([0.0, 1.0, 1.0]), capped=False)
        assert locked.tolist() == [True, False, False]
        assert t0 == 1.5
        assert s.tolist() == [1.0, 1.5, 0.75]


class TestDwsRescale:
    def test_patterns(self, desk_graph, res_graph):
        patterns, skipped = find_dws_patterns(desk_graph)
        assert [(p.dws_id, p.activation, p.conv_id) for p in patterns] == [("dws", "ReLU6", "conv2")]
        assert skipped == []
        assert find_dws_patterns(res_graph) == ([], [])

    def test_no_pattern(self, small_net, images):
        with pytest.raises(NoPatternFound):
            dws_rescale(small_net, images)

    def test_dws_feeding_pool_is_skipped(self):
        gen = torch.Generator().manual_seed(0)
        g = Graph([
            dws_layer("dws", "input", 1, 3, gen, padding=1),
            Layer("pool", LayerKernel(LayerKind.AVG_POOL), ["dws"]),
        ])
        patterns, skipped = find_dws_patterns(g)
        assert patterns == [] and skipped[0]["dws_id"] == "dws"

    def test_requires_folded_graph(self, images):
        with pytest.raises(UnsupportedKind):
            dws_rescale(desk_cnn(width=2, batch_norm=True), images)

    def test_all_locked_is_identity(self, dws_graph, images):
        out, report = dws_rescale(dws_graph, images, lock_limit=-1e9)
        assert graphs_equal(out, dws_graph)
        assert all(report.patterns[0].locked)

    @pytest.mark.parametrize("act", [LayerKind.RELU6, LayerKind.RELU, None])
    def test_output_invariance(self, act):
        for seed in range(3):
            g = dws_net(seed=seed, act=act)
            calib = random_images(40, seed=seed)
            out, _ = dws_rescale(g, calib)
            torch.testing.assert_close(out.logits(calib), g.logits(calib), rtol=1e-8, atol=1e-12)
            held_out = random_images(40, seed=100 + seed)
            torch.testing.assert_close(out.logits(held_out), g.logits(held_out), rtol=1e-6, atol=1e-12)

    @staticmethod
    def saturating_dws_net() -> Graph:
        "DWS 3x3 on 3x3 inputs in [0, 1]: channel maxima 6.3, 1.8, 0.5, 2.7 at the all-ones image."
        w = torch.zeros(4, 1, 3, 3, dtype=torch.float64)
        w[0] = 0.7
        w[1] = 0.2
        w[2, 0, 1, 1] = 0.5
        w[3] = 0.3
        gen = torch.Generator().manual_seed(8)
        return Graph([
            Layer("dws", LayerKernel(LayerKind.DWS_CONV2D), ["input"], weights=w, bias=torch.zeros(4, dtype=torch.float64)),
            activation("act", "dws"),
            conv_layer("conv2", "act", 4, 4, 1, gen),
            activation("relu3", "conv2"),
            Layer("pool", LayerKernel(LayerKind.AVG_POOL), ["relu3"]),
            fc_layer("fc", "pool", 4, 3, gen),
        ])

    def test_locking_and_saturation_cap(self):
        g = self.saturating_dws_net()
        gen = torch.Generator().manual_seed(9)
        calib = torch.cat([
            torch.ones(1, 4, 3, 3, dtype=torch.float64),
            torch.rand((39, 4, 3, 3), generator=gen, dtype=torch.float64),
        ])
        out, report = dws_rescale(g, calib)
        pattern = report.patterns[0]
        assert pattern.capped
        assert pattern.locked == [True, False, False, False]
        assert pattern.x_max == pytest.approx([6.3, 1.8, 0.5, 2.7])
        assert pattern.t0 == pytest.approx(0.7)
        # channels 1 and 3 are held at the cap 6 / X_max, channel 2 reaches T0 / T
        assert pattern.scales == pytest.approx([1.0, 6 / 1.8, 1.4, 6 / 2.7])
        assert pattern.spread_after < pattern.spread_before

        maxima = out.run(calib, upto="dws").amax(dim=(0, 2, 3))
        assert maxima.tolist() == pytest.approx([6.3, 6.0, 0.7, 6.0])

        held_out = torch.rand((40, 4, 3, 3), generator=gen, dtype=torch.float64)
        for x in (calib, held_out):
            torch.testing.assert_close(out.logits(x), g.logits(x), rtol=1e-10, atol=1e-12)

    def test_relu6_channels_stay_below_saturation(self, images):
        g = dws_net(seed=5, act=LayerKind.RELU6)
        out, report = dws_rescale(g, images)
        maxima = out.run(images, upto="dws").amax(dim=(0, 2, 3))
        unlocked = ~torch.tensor(report.patterns[0].locked)
        assert (maxima[unlocked] <= 6.0 + 1e-9).all()
        assert report.patterns[0].capped

    def test_uncapped_spread_does_not_grow(self, images):
        _, report = dws_rescale(dws_net(seed=6, act=LayerKind.RELU), images)
        pattern = report.patterns[0]
        assert pattern.spread_after <= pattern.spread_before
        assert pattern.spread_after == pytest.approx(1.0)

    def test_scalar_and_vector_weights_agree_after_rescaling(self, images):
        out, report = dws_rescale(dws_net(seed=7, act=None), images, lock_limit=float("inf"))
        assert not any(report.patterns[0].locked)
        w = out["dws"].weights
        scalar = quantize_tensor(w, QuantParams.symmetric(w.abs().max()))
        vector = quantize_tensor(w, QuantParams.symmetric(filter_thresholds(w), axis=0))
        assert torch.equal(scalar, vector)

    def test_report_round_trip(self, dws_graph, images):
        _, report = dws_rescale(dws_graph, images)
        restored = DwsRescaleReport.from_dict(report.to_dict())
        assert restored == report
