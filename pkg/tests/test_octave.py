import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from octave_unet import nn
from octave_unet.autograd import Node
from octave_unet.errors import ConfigError, ShapeError
from octave_unet.octave import (
    OctaveConv,
    OctaveKernelSet,
    OctavePair,
    make_final_layer,
    make_initial_layer,
    octave_conv,
    octave_transposed_conv,
    split_channels,
)
from octave_unet.unet import flops_multiplier


def kernel_set(rng, ch, cl, oh, ol, transposed=False, k=3):
    def params(ci, co):
        if ci == 0 or co == 0:
            return None
        shape = (ci, co, k, k) if transposed else (co, ci, k, k)
        return nn.Conv2dParams(Node(rng.normal(size=shape)), Node(rng.normal(size=co)), 1, k // 2)

    return OctaveKernelSet(hh=params(ch, oh), hl=params(ch, ol), lh=params(cl, oh), ll=params(cl, ol))


def random_pair(rng, ch, cl, h=8, w=8, n=1):
    return OctavePair(Node(rng.normal(size=(n, ch, h, w))), Node(rng.normal(size=(n, cl, h // 2, w // 2))))


def composed(x, ks, conv_fn):
    """Octave output assembled directly from array primitives."""
    def run(p, inp):
        return conv_fn(Node(inp), p.weight, p.bias, p.stride, p.padding).value

    xh, xl = x.high.value, x.low.value
    high = run(ks.hh, xh) + nn.upsample_nearest2_array(run(ks.lh, xl))
    low = run(ks.ll, xl) + run(ks.hl, nn.avg_pool2_array(xh))
    return high, low


class TestSplitChannels:
    def test_half(self):
        assert split_channels(64, 0.5) == (32, 32)

    @pytest.mark.parametrize("alpha,expected", [(0, (8, 0)), (1, (0, 8)), (0.25, (6, 2)), (0.75, (2, 6))])
    def test_values(self, alpha, expected):
        assert split_channels(8, alpha) == expected

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            split_channels(6, 0.25)

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            split_channels(8, 1.5)


class TestOctavePair:
    def test_low_must_be_half(self):
        with pytest.raises(ShapeError):
            OctavePair(Node(np.zeros((1, 1, 8, 8))), Node(np.zeros((1, 1, 3, 4))))

    def test_needs_one_side(self):
        with pytest.raises(ShapeError):
            OctavePair()


class TestOctaveConv:
    def test_matches_composition(self, rng):
        x = random_pair(rng, 2, 2)
        ks = kernel_set(rng, 2, 2, 2, 2)
        y = octave_conv(x, ks)
        high, low = composed(x, ks, nn.conv2d)
        assert np.abs(y.high.value - high).max() < 1e-6
        assert np.abs(y.low.value - low).max() < 1e-6

    def test_alpha_zero_is_plain_conv(self, rng):
        xh = Node(rng.normal(size=(1, 3, 6, 6)))
        ks = kernel_set(rng, 3, 0, 4, 0)
        y = octave_conv(OctavePair(high=xh), ks)
        assert y.low is None
        assert_array_equal(y.high.value, nn.conv2d(xh, ks.hh.weight, ks.hh.bias, 1, 1).value)

    def test_zero_kernels_give_bias(self, rng):
        ks = kernel_set(rng, 2, 2, 2, 2)
        for p in ks.present().values():
            p.weight.value[...] = 0
            p.bias.value[...] = 1.5
        y = octave_conv(random_pair(rng, 2, 2), ks)
        assert_array_equal(y.high.value, 3.0)
        assert_array_equal(y.low.value, 3.0)

    def test_odd_extent(self, rng):
        x = OctavePair(high=Node(rng.normal(size=(1, 2, 7, 8))))
        with pytest.raises(ShapeError):
            octave_conv(x, kernel_set(rng, 2, 0, 1, 1))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            octave_conv(random_pair(rng, 3, 2), kernel_set(rng, 2, 2, 2, 2))

    def test_mixed_kernel_sizes_rejected(self, rng):
        a = kernel_set(rng, 1, 1, 1, 1, k=3)
        b = kernel_set(rng, 1, 1, 1, 1, k=5)
        with pytest.raises(ConfigError):
            OctaveKernelSet(hh=a.hh, hl=b.hl)

    def test_linear_without_bias(self, rng):
        ks = kernel_set(rng, 2, 2, 2, 2)
        for p in ks.present().values():
            p.bias.value[...] = 0
        x = random_pair(rng, 2, 2)
        y1 = octave_conv(x, ks)
        y2 = octave_conv(x.map(lambda t: Node(2.5 * t.value)), ks)
        assert_allclose(y2.high.value, 2.5 * y1.high.value, atol=1e-12)
        assert_allclose(y2.low.value, 2.5 * y1.low.value, atol=1e-12)


class TestOctaveTransposedConv:
    def test_matches_composition(self, rng):
        x = random_pair(rng, 2, 2)
        ks = kernel_set(rng, 2, 2, 3, 1, transposed=True)
        y = octave_transposed_conv(x, ks)
        high, low = composed(x, ks, nn.transposed_conv2d)
        assert np.abs(y.high.value - high).max() < 1e-6
        assert np.abs(y.low.value - low).max() < 1e-6

    def test_alpha_zero_is_plain_transposed(self, rng):
        xh = Node(rng.normal(size=(1, 3, 6, 6)))
        ks = kernel_set(rng, 3, 0, 2, 0, transposed=True)
        y = octave_transposed_conv(OctavePair(high=xh), ks)
        assert_array_equal(y.high.value, nn.transposed_conv2d(xh, ks.hh.weight, ks.hh.bias, 1, 1).value)

    def test_delta_kernels(self, rng):
        ks = kernel_set(rng, 1, 1, 1, 1, transposed=True)
        for p in ks.present().values():
            p.weight.value[...] = 0
            p.weight.value[0, 0, 1, 1] = 1
            p.bias.value[...] = 0
        xh = rng.normal(size=(1, 1, 8, 8))
        y = octave_transposed_conv(OctavePair(Node(xh), Node(np.zeros((1, 1, 4, 4)))), ks)
        assert_allclose(y.high.value, xh, atol=1e-15)
        assert_allclose(y.low.value, nn.avg_pool2_array(xh), atol=1e-15)

    def test_path_activation_applies_per_path(self, rng):
        x = random_pair(rng, 2, 2)
        ks = kernel_set(rng, 2, 2, 2, 2, transposed=True)
        y = octave_transposed_conv(x, ks, path_activation=nn.relu)
        relu = lambda a: np.maximum(a, 0)
        run = lambda p, inp: nn.transposed_conv2d(Node(inp), p.weight, p.bias, 1, 1).value
        hh = relu(run(ks.hh, x.high.value))
        lh = relu(nn.upsample_nearest2_array(run(ks.lh, x.low.value)))
        assert_allclose(y.high.value, hh + lh, atol=1e-12)


class TestLayers:
    def test_initial_layer_split(self):
        layer = make_initial_layer(3, 64, 0.5, rng=np.random.default_rng(0))
        assert layer.out_split == (32, 32)
        y = layer(Node(np.zeros((1, 3, 8, 8), dtype=np.float32)))
        assert y.high.shape == (1, 32, 8, 8)
        assert y.low.shape == (1, 32, 4, 4)
        assert_array_equal(y.high.value, 0)

    def test_initial_layer_indivisible(self):
        with pytest.raises(ConfigError):
            make_initial_layer(3, 6, 0.25)

    def test_final_layer_range_and_shape(self, rng):
        layer = make_final_layer(8, 0.5, rng=rng, dtype=np.float64)
        out = layer(random_pair(rng, 4, 4))
        assert out.shape == (1, 1, 8, 8)
        assert np.all((out.value > 0) & (out.value < 1))

    def test_final_layer_path_ablation(self, rng):
        layer = make_final_layer(4, 0.5, rng=rng, dtype=np.float64)
        x = random_pair(rng, 2, 2)
        x_zero_low = OctavePair(x.high, Node(np.zeros_like(x.low.value)))
        layer.weight_lh.value[...] = 0
        only_hh = nn.sigmoid(nn.transposed_conv2d(x.high, layer.weight_hh, layer.bias_hh, 1, 1)
                             + nn.upsample_nearest2(nn.transposed_conv2d(
                                 Node(np.zeros((1, 2, 4, 4))), layer.weight_lh, layer.bias_lh, 1, 1)))
        assert_allclose(layer(x_zero_low).value, only_hh.value, atol=1e-15)
        assert_allclose(layer(x).value, layer(x_zero_low).value, atol=1e-15)

    def test_parameter_count_independent_of_alpha(self):
        def count(a_in, a_out):
            layer = OctaveConv(16, 32, a_in, a_out, rng=np.random.default_rng(0))
            return sum(getattr(layer, f"weight_{p}").value.size for p in layer.paths)

        assert count(0.0, 0.0) == count(0.25, 0.25) == count(0.5, 0.5) == count(0.75, 0.75) == 32 * 16 * 9

    @pytest.mark.parametrize("alpha", [0.25, 0.5, 0.75])
    def test_mac_multiplier(self, alpha):
        base = OctaveConv(16, 16, 0, 0, rng=np.random.default_rng(0)).macs(32, 32)
        oct_ = OctaveConv(16, 16, alpha, alpha, rng=np.random.default_rng(0)).macs(32, 32)
        assert oct_ / base == pytest.approx(flops_multiplier(alpha), abs=1e-12)

    def test_multiplier_half(self):
        assert flops_multiplier(0.5) == 0.4375

    def test_he_fan_in_per_path(self):
        layer = OctaveConv(64, 64, 0.5, 0.5, rng=np.random.default_rng(0), dtype=np.float64)
        for p in layer.paths:
            assert getattr(layer, f"weight_{p}").value.std() == pytest.approx(np.sqrt(2 / (32 * 9)), rel=0.05)
