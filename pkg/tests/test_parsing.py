import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metric_fixtures import CASES
from spreid.backbone import BackboneConfig, ConfigError
from spreid.layers import conv2d_forward
from spreid.parsing import (
    ASPP,
    COARSE_REGIONS,
    DEFAULT_PARTS,
    FINE_LABELS,
    LABEL_INDEX,
    CoarseGrouping,
    ParsingNet,
    coarse_pooling_maps,
    group_to_coarse,
    parsing_metrics,
)
from spreid.tensor import DimensionError, DomainError, channel_softmax

TINY = BackboneConfig(stem_channels=(3, 4), block_channels=(4, 5, 6), convs_per_stage=1)


def one_pixel(**probs):
    fine = np.zeros((20, 1, 1))
    for name, p in probs.items():
        fine[LABEL_INDEX[name.replace("_", "-")], 0, 0] = p
    return fine


class TestGrouping:
    def test_twenty_labels(self):
        assert len(FINE_LABELS) == 20 and FINE_LABELS[0] == "Background"

    def test_background_pixel(self):
        assert not group_to_coarse(one_pixel(Background=1.0)).any()

    def test_face_pixel(self):
        out = group_to_coarse(one_pixel(Face=1.0))[:, 0, 0]
        assert out.tolist() == [1.0, 1.0, 0.0, 0.0, 0.0]

    def test_mixed_pixel_hand_sum(self):
        out = group_to_coarse(one_pixel(Hair=0.5, Coat=0.3, Background=0.2))[:, 0, 0]
        assert np.allclose(out, [0.8, 0.5, 0.3, 0.0, 0.0], atol=1e-15)

    def test_dress_counts_in_upper_and_lower(self):
        out = group_to_coarse(one_pixel(Dress=1.0))[:, 0, 0]
        assert out.tolist() == [1.0, 0.0, 1.0, 1.0, 0.0]

    def test_every_label_in_foreground_and_a_part(self):
        g = CoarseGrouping().matrix()
        assert g[0, 0] == 0 and np.all(g[0, 1:] == 1)
        assert np.all(g[1:, 1:].sum(axis=0) >= 1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_foreground_is_one_minus_background(self, seed):
        fine = channel_softmax(np.random.default_rng(seed).normal(size=(20, 3, 4)))
        assert np.allclose(group_to_coarse(fine)[0], 1 - fine[0], atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear(self, seed, a, b):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(2, 20, 2, 3))
        assert np.allclose(group_to_coarse(a * x + b * y), a * group_to_coarse(x) + b * group_to_coarse(y), atol=1e-10)

    def test_pooling_maps_normalized(self):
        fine = channel_softmax(np.random.default_rng(0).normal(size=(2, 20, 4, 3)), axis=1)
        maps = coarse_pooling_maps(fine)
        assert maps.shape == (2, 5, 4, 3) and np.allclose(maps.sum(axis=(2, 3)), 1.0)

    def test_custom_grouping(self):
        parts = dict(DEFAULT_PARTS)
        parts["Head"] = ("Hair",)
        parts["Upper-body"] = DEFAULT_PARTS["Upper-body"] + ("Hat", "Sunglasses", "Face")
        out = group_to_coarse(one_pixel(Face=1.0), CoarseGrouping(parts))[:, 0, 0]
        assert out.tolist() == [1.0, 0.0, 1.0, 0.0, 0.0]

    @pytest.mark.parametrize("mutate", [
        lambda p: p.pop("Shoes"),
        lambda p: p.update(Shoes=("Right-shoe",)),
        lambda p: p.update(Shoes=("Right-shoe", "Left-shoe", "Background")),
        lambda p: p.update(Shoes=("Right-shoe", "Left-shoe", "Boots")),
    ])
    def test_invalid_grouping(self, mutate):
        parts = dict(DEFAULT_PARTS)
        mutate(parts)
        with pytest.raises(ConfigError):
            CoarseGrouping(parts)

    def test_wrong_channel_count(self):
        with pytest.raises(DimensionError):
            group_to_coarse(np.zeros((5, 2, 2)))


class TestMetrics:
    @pytest.mark.parametrize("gt,pred,k,overall,mean_acc,mean_iou", CASES)
    def test_hand_counted(self, gt, pred, k, overall, mean_acc, mean_iou):
        got = parsing_metrics(np.array(pred), np.array(gt), k)
        assert got == (float(overall), float(mean_acc), float(mean_iou))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        gt, pred = rng.integers(4, size=(2, 5, 6))
        assert all(0.0 <= v <= 1.0 for v in parsing_metrics(pred, gt, 4))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            parsing_metrics(np.zeros((2, 2), int), np.zeros((2, 3), int))

    def test_label_range(self):
        with pytest.raises(DomainError):
            parsing_metrics(np.full((2, 2), 20), np.zeros((2, 2), int))


class TestASPP:
    def test_preserves_spatial_size(self):
        aspp = ASPP("a", 3, 4, rng=np.random.default_rng(0))
        for h, w in [(1, 1), (5, 3), (8, 13)]:
            assert aspp(np.zeros((1, 3, h, w))).shape == (1, 4, h, w)

    def test_zero_input_gives_bias_sum(self):
        aspp = ASPP("a", 2, 3, rng=np.random.default_rng(1))
        for b in aspp.branches:
            b.bias.value = np.arange(3.0) + 1
        out = aspp(np.zeros((1, 2, 4, 4)))
        assert np.allclose(out, (4 * (np.arange(3.0) + 1))[None, :, None, None])

    def test_branches_match_conv(self):
        rng = np.random.default_rng(2)
        aspp = ASPP("a", 2, 3, rng=rng)
        x = rng.normal(size=(1, 2, 9, 7))
        total = 0
        for rate, b in zip((3, 6, 9, 12), aspp.branches):
            assert b.dilation == rate and b.padding == rate
            total = total + conv2d_forward(x, b.weight.value, b.bias.value, 1, rate, rate)[0]
        assert np.allclose(aspp(x), total, atol=1e-12)

    def test_concat_merge(self):
        aspp = ASPP("a", 2, 3, merge="concat", rng=np.random.default_rng(3))
        assert aspp(np.zeros((1, 2, 3, 3))).shape == (1, 3, 3, 3)
        with pytest.raises(ConfigError):
            ASPP("a", 2, 3, merge="max")


class TestParsingNet:
    def test_output_stride_16_and_shapes(self):
        net = ParsingNet(TINY, aspp_channels=4, seed=0)
        assert net.backbone.output_stride == 16
        x = np.random.default_rng(0).uniform(size=(2, 3, 64, 32))
        assert net.logits(x).shape == (2, 20, 4, 2)
        p = net.fine_probabilities(x, (64, 32))
        assert p.shape == (2, 20, 64, 32) and np.allclose(p.sum(axis=1), 1.0)

    def test_input_scale(self):
        net = ParsingNet(TINY, aspp_channels=4, seed=0, input_scale=2.0)
        assert net.logits(np.zeros((1, 3, 32, 16))).shape[2:] == (4, 2)
        with pytest.raises(ConfigError):
            ParsingNet(TINY, input_scale=0)

    def test_architecture_round_trip(self):
        net = ParsingNet(TINY, aspp_channels=4, merge="concat", seed=0, input_scale=1.5)
        twin = ParsingNet.from_architecture(net.architecture())
        assert twin.architecture() == net.architecture()
        assert [p.name for p in twin.params()] == [p.name for p in net.params()]

    def test_lr_scales(self):
        net = ParsingNet(TINY, aspp_channels=4, seed=0)
        scales = net.lr_scales(1.0, 10.0)
        assert scales["stem.conv1.weight"] == 1.0
        assert scales["aspp.rate3.weight"] == 10.0 and scales["classifier.bias"] == 10.0

    def test_loss_decreases_on_one_batch(self):
        from spreid.trainer import History, train_parser
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(4, 3, 32, 16))
        masks = (x[:, 0] > 0.5).astype(np.uint8) * 5
        net = ParsingNet(TINY, aspp_channels=4, seed=0)
        hist = History()
        train_parser(net, x, masks, iters=40, batch_size=4, history=hist)
        assert hist.losses()[-1] < hist.losses()[0]
