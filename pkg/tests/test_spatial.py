# tests/test_spatial.py
import math

import numpy as np
import pytest

from adaptrack.diffcore import Tensor, grad_check, softmax
from adaptrack.spatial import (
    DepthBranch,
    DepthError,
    DepthField,
    DepthPeTable,
    FusionBlock,
    avg_pool,
    depth_attention_maps,
    depth_expectation,
    depth_pe,
    discretize_depth,
    discretize_depth_map,
    fuse_depth,
    lid_bins,
    pyramid_average,
    rasterize_foreground,
    weighted_depth_loss,
)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def bins():
    return lid_bins(4, 0.0, 20.0)


def one_hot_field(targets: np.ndarray, k: int, fg: np.ndarray) -> DepthField:
    probs = np.eye(k + 1)[targets]
    return DepthField(probs=Tensor(probs), expected=Tensor(np.zeros(targets.shape)), fg_mask=fg, targets=targets)


class TestLidBins:
    def test_hand_values(self, bins):
        assert bins.bin_size == pytest.approx(2.0)
        assert np.allclose(bins.as_array(), [0.0, 2.0, 6.0, 12.0, 20.0])

    def test_single_bin_starts_at_d_min(self):
        b = lid_bins(1, 3.0, 11.0)
        assert b.bin_size == pytest.approx(8.0)
        assert b.values == pytest.approx((3.0, 11.0))

    def test_defaults(self):
        b = lid_bins(12)
        assert b.d_min == 1e-3
        assert b.values[-1] == 256.0
        assert len(b.values) == 13

    def test_strictly_increasing(self):
        rng = np.random.default_rng(0)
        for K in range(1, 129):
            d_min = float(rng.uniform(0.0, 5.0))
            d_max = d_min + float(rng.uniform(0.5, 300.0))
            assert np.all(np.diff(lid_bins(K, d_min, d_max).as_array()) > 0)

    def test_widths_increase(self):
        widths = np.diff(lid_bins(10, 0.0, 100.0).as_array()[:-1])
        assert np.all(np.diff(widths) > 0)

    @pytest.mark.parametrize("K, d_min, d_max", [(0, 0.0, 1.0), (4, 5.0, 5.0), (4, 2.0, 1.0)])
    def test_invalid(self, K, d_min, d_max):
        with pytest.raises(DepthError):
            lid_bins(K, d_min, d_max)


class TestDiscretize:
    def test_exact_bin(self, bins):
        assert discretize_depth(6.0, bins) == 2

    def test_nearest(self, bins):
        assert discretize_depth(5.0, bins) == 2

    def test_clamps(self, bins):
        assert discretize_depth(1e6, bins) == 4
        assert discretize_depth(-3.0, bins) == 0

    def test_tie_goes_to_lower_index(self, bins):
        assert discretize_depth(1.0, bins) == 0
        assert discretize_depth_map(np.array([[1.0, 4.0]]), bins).tolist() == [[0, 1]]

    def test_nan(self, bins):
        with pytest.raises(DepthError):
            discretize_depth(float("nan"), bins)


class TestDepthExpectation:
    def test_one_hot(self, bins):
        assert depth_expectation(np.eye(5)[1], bins).item() == pytest.approx(2.0)

    def test_uniform(self, bins):
        assert depth_expectation(np.full(5, 0.2), bins).item() == pytest.approx(8.0)

    def test_last_bin_is_d_max(self, bins):
        assert depth_expectation(np.eye(5)[4], bins).item() == pytest.approx(20.0)

    def test_unnormalized_raises(self, bins):
        with pytest.raises(DepthError):
            depth_expectation(np.full(5, 0.5), bins)

    def test_wrong_channels(self, bins):
        with pytest.raises(DepthError):
            depth_expectation(np.full(4, 0.25), bins)


class TestWeightedDepthLoss:
    def test_perfect_prediction(self, bins):
        targets = np.array([[0, 1], [4, 2]])
        field = one_hot_field(targets, bins.K, np.array([[True, False], [False, True]]))
        assert weighted_depth_loss(field, bins).item() == pytest.approx(0.0)

    def test_single_foreground_pixel(self):
        b = lid_bins(1, 0.0, 1.0)
        field = DepthField(probs=Tensor(np.full((1, 1, 2), 0.5)), expected=Tensor(np.zeros((1, 1))),
                           fg_mask=np.array([[True]]), targets=np.array([[0]]))
        expected = 7.0 * 0.25 * 0.25 * math.log(2.0)
        assert weighted_depth_loss(field, b, fg_weight=7.0).item() == pytest.approx(expected)

    def test_unit_weight_is_plain_mean(self, bins, rng):
        logits = rng.normal(size=(3, 3, 5))
        targets = rng.integers(0, 5, size=(3, 3))
        probs = softmax(logits)
        fg = rng.random((3, 3)) < 0.5
        weighted = weighted_depth_loss(DepthField(probs, probs @ bins.as_array(), fg, targets), bins, 1.0)
        plain = weighted_depth_loss(DepthField(probs, probs @ bins.as_array(), np.zeros((3, 3), bool), targets),
                                    bins, 7.0)
        assert weighted.item() == pytest.approx(plain.item())

    def test_foreground_weighted_more(self, bins):
        probs = Tensor(np.full((1, 2, 5), 0.2))
        base = DepthField(probs, Tensor(np.zeros((1, 2))), np.array([[False, False]]), np.array([[1, 1]]))
        fg = DepthField(probs, Tensor(np.zeros((1, 2))), np.array([[True, False]]), np.array([[1, 1]]))
        assert weighted_depth_loss(fg, bins).item() == pytest.approx(4.0 * weighted_depth_loss(base, bins).item())

    def test_missing_targets(self, bins):
        field = DepthField(Tensor(np.full((1, 1, 5), 0.2)), Tensor(np.zeros((1, 1))), np.zeros((1, 1), bool))
        with pytest.raises(DepthError) as exc_info:
            weighted_depth_loss(field, bins)
        assert "目标" in str(exc_info.value)

    def test_weight_below_one(self, bins):
        field = one_hot_field(np.array([[0]]), bins.K, np.array([[True]]))
        with pytest.raises(DepthError):
            weighted_depth_loss(field, bins, fg_weight=0.5)

    def test_target_out_of_range(self, bins):
        field = DepthField(Tensor(np.full((1, 1, 5), 0.2)), Tensor(np.zeros((1, 1))), np.zeros((1, 1), bool),
                           np.array([[5]]))
        with pytest.raises(DepthError):
            weighted_depth_loss(field, bins)


class TestRasterizeForeground:
    def test_boundary_cells_included(self):
        mask = rasterize_foreground(np.array([[1.0, 1.0, 1.0, 1.0]]), (4, 4), (4.0, 4.0))
        assert mask.sum() == 4
        assert mask[1:3, 1:3].all()

    def test_union_of_boxes(self):
        boxes = np.array([[0.0, 0.0, 0.5, 0.5], [3.2, 3.2, 0.5, 0.5]])
        mask = rasterize_foreground(boxes, (4, 4), (4.0, 4.0))
        assert mask[0, 0] and mask[3, 3]
        assert mask.sum() == 2

    def test_box_outside_arena(self):
        mask = rasterize_foreground(np.array([[10.0, 10.0, 1.0, 1.0]]), (4, 4), (4.0, 4.0))
        assert not mask.any()


class TestDepthPe:
    @pytest.fixture
    def table(self, rng):
        return DepthPeTable(8, 3, 0.0, 7.0, rng)

    def test_integral_coordinate_exact(self, table):
        for d in range(8):
            assert np.array_equal(depth_pe(float(d), table).data, table.table.data[d])

    def test_interpolates(self, table):
        t = table.table.data
        assert np.allclose(depth_pe(1.25, table).data, 0.75 * t[1] + 0.25 * t[2], atol=1e-12)

    def test_piecewise_linear(self, table):
        t = table.table.data
        for d in np.linspace(0.0, 7.0, 57):
            lo = int(np.floor(d))
            hi = min(lo + 1, 7)
            delta = d - lo
            assert np.allclose(depth_pe(d, table).data, (1 - delta) * t[lo] + delta * t[hi], atol=1e-12)

    def test_clamped(self, table):
        t = table.table.data
        assert np.array_equal(depth_pe(-4.0, table).data, t[0])
        assert np.array_equal(depth_pe(99.0, table).data, t[7])

    def test_batch_shape(self, table):
        assert depth_pe(np.ones((2, 5)), table).shape == (2, 5, 3)

    def test_nan(self, table):
        with pytest.raises(DepthError):
            depth_pe(float("nan"), table)


class TestPyramid:
    def test_constant(self):
        c = 2.5
        out = pyramid_average(np.full((4, 4, 2), c), np.full((2, 2, 2), c), np.full((1, 1, 2), c))
        assert np.allclose(out.data, c)

    def test_fine_level_only(self, rng):
        f8 = rng.normal(size=(8, 8, 3))
        out = pyramid_average(f8, np.zeros((4, 4, 3)), np.zeros((2, 2, 3)))
        assert np.allclose(out.data, f8 / 3.0)

    def test_single_cell_upsamples_constant(self):
        v = 1.5
        out = pyramid_average(np.zeros((4, 4, 1)), np.zeros((2, 2, 1)), np.full((1, 1, 1), v))
        assert np.allclose(out.data, v / 3.0)

    def test_incompatible_sizes(self):
        with pytest.raises(DepthError):
            pyramid_average(np.zeros((4, 4, 1)), np.zeros((3, 3, 1)), np.zeros((1, 1, 1)))

    def test_avg_pool(self):
        f = Tensor(np.arange(16, dtype=float).reshape(4, 4, 1))
        assert avg_pool(f, 2).data[..., 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]


class TestFusion:
    def test_zero_depth_projection_is_identity(self, rng):
        block = FusionBlock(4, 2, rng, zero_depth=True)
        objects = rng.normal(size=(3, 4))
        visual = Tensor(rng.normal(size=(5, 4)))
        depth = Tensor(rng.normal(size=(2, 4)))
        pe = Tensor(rng.normal(size=(2, 4)))
        with_depth = fuse_depth(objects, visual, depth, pe, [block])
        without = fuse_depth(objects, visual, None, None, [block])
        assert np.array_equal(with_depth.data, without.data)

    def test_single_depth_token_gets_full_weight(self, rng):
        block = FusionBlock(4, 2, rng)
        fuse_depth(rng.normal(size=(1, 4)), Tensor(rng.normal(size=(3, 4))),
                   Tensor(rng.normal(size=(1, 4))), None, [block])
        assert np.allclose(block.depth_attn.last_weights, 1.0)

    def test_depth_changes_output(self, rng):
        block = FusionBlock(4, 2, rng)
        objects = rng.normal(size=(2, 4))
        visual = Tensor(rng.normal(size=(3, 4)))
        a = fuse_depth(objects, visual, Tensor(rng.normal(size=(2, 4))), None, [block])
        b = fuse_depth(objects, visual, None, None, [block])
        assert not np.allclose(a.data, b.data)

    def test_gradient(self, rng):
        block = FusionBlock(4, 2, rng)
        objects = Tensor(rng.normal(size=(2, 4)))
        visual = Tensor(rng.normal(size=(3, 4)))
        depth = Tensor(rng.normal(size=(2, 4)))
        pe = Tensor(rng.normal(size=(2, 4)))
        w = Tensor(rng.normal(size=(2, 4)))
        report = grad_check(lambda: (fuse_depth(objects, visual, depth, pe, [block]) * w).sum(),
                            [objects, depth, pe])
        assert report.passed(1e-4)

    def test_unknown_order(self, rng):
        with pytest.raises(DepthError):
            fuse_depth(np.ones((1, 4)), np.ones((1, 4)), None, None, [FusionBlock(4, 2, rng)], "vision-first")

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DepthError):
            fuse_depth(np.ones((1, 4)), np.ones((2, 6)), None, None, [FusionBlock(4, 2, rng)])

    def test_depth_attention_maps(self, rng):
        blocks = [FusionBlock(4, 2, rng), FusionBlock(4, 2, rng)]
        weights = depth_attention_maps(rng.normal(size=(3, 4)), Tensor(rng.normal(size=(5, 4))),
                                       Tensor(rng.normal(size=(6, 4))), None, blocks)
        assert weights.shape == (2, 2, 3, 6)
        assert np.allclose(weights.sum(axis=-1), 1.0)

    def test_depth_attention_maps_no_objects(self, rng):
        weights = depth_attention_maps(np.zeros((0, 4)), Tensor(rng.normal(size=(5, 4))),
                                       Tensor(rng.normal(size=(6, 4))), None, [FusionBlock(4, 2, rng)])
        assert weights.shape == (1, 2, 0, 6)

    def test_depth_attention_maps_need_depth_layer(self, rng):
        with pytest.raises(DepthError):
            depth_attention_maps(np.ones((1, 4)), np.ones((1, 4)), Tensor(np.ones((1, 4))), None,
                                 [FusionBlock(4, 2, rng)], "none")


class TestDepthBranch:
    def test_output_shapes(self, rng, bins):
        branch = DepthBranch(5, 8, 2, bins, 8, 1, 2, rng)
        out = branch(rng.normal(size=(8, 8, 5)), rng.normal(size=(4, 4, 5)), rng.normal(size=(2, 2, 5)),
                     np.zeros((8, 8), dtype=bool))

        assert out.field.probs.shape == (8, 8, 5)
        assert np.allclose(out.field.probs.data.sum(axis=-1), 1.0)
        assert out.field.expected.shape == (8, 8)
        assert out.tokens.shape == (16, 8)
        assert out.token_depth.shape == (16,)
        assert out.pe.shape == (16, 8)

    def test_pe_disabled(self, rng, bins):
        branch = DepthBranch(5, 8, 2, bins, 8, 0, 4, rng)
        out = branch(rng.normal(size=(8, 8, 5)), rng.normal(size=(4, 4, 5)), rng.normal(size=(2, 2, 5)),
                     np.zeros((8, 8), dtype=bool), use_pe=False)
        assert out.pe is None
        assert out.tokens.shape == (4, 8)
