"""Unit tests for the per-task losses and the combined objective."""

import math

import pytest
import torch

from densemtl.losses import (
    TaskSpec,
    berhu,
    berhu_threshold,
    default_task_specs,
    default_weights,
    depth_loss,
    edge_loss,
    normal_loss,
    seg_loss,
    total_loss,
)

from oracles import gradient_relative_error


def test_default_weights_per_task_set():
    assert default_weights(("S", "D")) == {"S": 50.0, "D": 1.0}
    assert default_weights(("S", "D", "N")) == {"S": 100.0, "D": 1.0, "N": 100.0}
    assert default_weights(("S", "D", "N", "E")) == {
        "S": 100.0,
        "D": 1.0,
        "N": 100.0,
        "E": 50.0,
    }
    specs = default_task_specs(("S", "D"))
    assert specs[0] == TaskSpec("S", 50.0, False)
    assert specs[1] == TaskSpec("D", 1.0, True)
    with pytest.raises(KeyError):
        default_weights(("E", "S"))


class TestBerhu:
    def test_l1_inside_threshold(self):
        r = torch.tensor([0.0, 0.1, -0.3, 0.5])
        out = berhu(r, 0.5)
        assert torch.allclose(out, r.abs())

    def test_quadratic_outside_threshold(self):
        r = torch.tensor([2.0, -3.0])
        c = 0.5
        out = berhu(r, c)
        expected = (r * r + c * c) / (2 * c)
        assert torch.allclose(out, expected)

    def test_continuous_at_threshold(self):
        # value and slope agree where the branches meet
        c = 0.37
        for sign in (1.0, -1.0):
            eps = 1e-7
            below = berhu(torch.tensor([sign * (c - eps)], dtype=torch.float64), c)
            above = berhu(torch.tensor([sign * (c + eps)], dtype=torch.float64), c)
            assert abs(float(above - below)) < 1e-6

    def test_zero_threshold_degrades_to_l1(self):
        r = torch.tensor([1.0, -2.0, 0.25])
        assert torch.allclose(berhu(r, 0.0), r.abs())

    def test_threshold_is_fifth_of_max_and_detached(self):
        r = torch.tensor([1.0, -4.0, 2.0], requires_grad=True)
        c = berhu_threshold(r)
        assert float(c) == pytest.approx(0.8)
        assert not c.requires_grad

    def test_gradient_continuous_across_threshold(self):
        c = 0.5
        r = torch.tensor([c - 1e-6, c + 1e-6], dtype=torch.float64, requires_grad=True)
        berhu(r, c).sum().backward()
        g = r.grad
        # both branches give slope ~1 around +c
        assert abs(float(g[0]) - 1.0) < 1e-5
        assert abs(float(g[1]) - 1.0) < 1e-5


class TestDepthLoss:
    def test_perfect_prediction_is_zero(self):
        d = torch.rand(2, 8, 8) * 10 + 1
        assert float(depth_loss(d, d, d_far=20.0)) == 0.0

    def test_matches_hand_computation(self):
        d_far = 10.0
        pred = torch.tensor([[[2.0, 5.0]]])
        target = torch.tensor([[[4.0, 5.0]]])
        r = d_far / pred - d_far / target  # [2.5, 0.0]
        c = 0.2 * 2.5  # = 0.5
        expected = ((2.5**2 + c**2) / (2 * c) + 0.0) / 2
        assert float(depth_loss(pred, target, d_far)) == pytest.approx(expected)

    def test_inverse_weighting_prefers_near_range(self):
        d_far = 20.0
        near_err = depth_loss(torch.tensor([2.5]), torch.tensor([2.0]), d_far)
        far_err = depth_loss(torch.tensor([18.5]), torch.tensor([18.0]), d_far)
        assert float(near_err) > float(far_err)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        pred = (torch.rand(1, 4, 4, dtype=torch.float64) * 5 + 1).requires_grad_(True)
        target = torch.rand(1, 4, 4, dtype=torch.float64) * 5 + 1
        # fixed threshold: the data-dependent cutoff is held constant by design
        err = gradient_relative_error(
            lambda: depth_loss(pred, target, d_far=10.0, threshold=0.5), [pred]
        )
        assert err < 1e-6


class TestSegLoss:
    def test_matches_manual_cross_entropy(self):
        logits = torch.tensor([[[[1.0]], [[0.0]], [[-1.0]]]])  # [1, 3, 1, 1]
        target = torch.tensor([[[0]]])
        p = torch.softmax(logits[0, :, 0, 0], dim=0)
        assert float(seg_loss(logits, target)) == pytest.approx(-math.log(float(p[0])))

    def test_ignore_index_drops_pixels(self):
        logits = torch.zeros(1, 2, 1, 2)
        logits[0, 0, 0, 0] = 5.0  # confident class 0 at pixel 0
        target = torch.tensor([[[0, 255]]])
        with_ignore = float(seg_loss(logits, target))
        only_first = float(seg_loss(logits[..., :1], target[..., :1]))
        assert with_ignore == pytest.approx(only_first)

    def test_fully_ignored_warns_and_returns_zero(self):
        logits = torch.zeros(1, 2, 2, 2, requires_grad=True)
        target = torch.full((1, 2, 2), 255, dtype=torch.long)
        with pytest.warns(UserWarning, match="fully ignored"):
            loss = seg_loss(logits, target)
        assert float(loss.detach()) == 0.0
        loss.backward()  # stays connected to the graph
        assert logits.grad is not None


class TestNormalLoss:
    def test_aligned_fields_score_zero(self):
        n = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        n = n / n.norm(dim=1, keepdim=True)
        assert float(normal_loss(n, n)) == pytest.approx(0.0, abs=1e-12)

    def test_opposite_fields_score_two(self):
        n = torch.randn(1, 3, 3, 3, dtype=torch.float64)
        n = n / n.norm(dim=1, keepdim=True)
        assert float(normal_loss(n, -n)) == pytest.approx(2.0)

    def test_orthogonal_fields_score_one(self):
        a = torch.zeros(1, 3, 2, 2)
        b = torch.zeros(1, 3, 2, 2)
        a[:, 0] = 1.0
        b[:, 1] = 1.0
        assert float(normal_loss(a, b)) == pytest.approx(1.0)


class TestEdgeLoss:
    def test_balanced_weighting_matches_hand_value(self):
        # 1 positive, 3 negatives -> w_pos = 3
        pred = torch.tensor([[0.8, 0.1, 0.2, 0.3]])
        target = torch.tensor([[1.0, 0.0, 0.0, 0.0]])
        expected = -(
            3.0 * math.log(0.8) + math.log(0.9) + math.log(0.8) + math.log(0.7)
        ) / 4
        assert float(edge_loss(pred, target)) == pytest.approx(expected, rel=1e-6)

    def test_no_positives_falls_back_to_plain_bce(self):
        pred = torch.tensor([[0.2, 0.4]])
        target = torch.zeros(1, 2)
        expected = -(math.log(0.8) + math.log(0.6)) / 2
        assert float(edge_loss(pred, target)) == pytest.approx(expected, rel=1e-6)

    def test_extreme_probabilities_stay_finite(self):
        pred = torch.tensor([[0.0, 1.0]])
        target = torch.tensor([[1.0, 0.0]])
        assert math.isfinite(float(edge_loss(pred, target)))


class TestTotalLoss:
    def test_final_only(self):
        final = {"S": torch.tensor(2.0), "D": torch.tensor(3.0)}
        out = total_loss(final, {}, {"S": 50.0, "D": 1.0})
        assert float(out) == pytest.approx(50 * 2 + 3)

    def test_intermediate_scales_are_averaged(self):
        final = {"S": torch.tensor(1.0)}
        inter = {
            1: {"S": torch.tensor(2.0)},
            3: {"S": torch.tensor(4.0)},
        }
        out = total_loss(final, inter, {"S": 10.0})
        # final: 10*1; scales: (10*2 + 10*4)/2
        assert float(out) == pytest.approx(10.0 + 30.0)

    def test_missing_weight_raises(self):
        with pytest.raises(KeyError, match="no weight"):
            total_loss({"S": torch.tensor(1.0)}, {}, {"D": 1.0})
