"""Unit tests for the cross-task attention building blocks."""


import numpy as np
import pytest
import torch

from densemtl.attention import (
    CorrelationMatrix,
    DirectionalAttention,
    ExchangeBlock,
    PairwiseExchange,
    SelfAttentionExchange,
    default_proj_dim,
    downscale,
    zero_exchange_residuals,
)

from oracles import correlation_oracle, cross_features_oracle, gated_self_oracle


def make_unit(seed, c_t=3, c_s=3, c_out=3, d=2, s=1, **kw):
    torch.manual_seed(seed)
    return DirectionalAttention(c_t, c_s, c_out, proj_dim=d, down_factor=s, **kw).double()


def test_default_proj_dim_floors_at_eight():
    assert default_proj_dim(256) == 32
    assert default_proj_dim(16) == 8
    assert default_proj_dim(8) == 8


def test_correlation_rows_are_stochastic():
    rng = np.random.default_rng(0)
    for trial in range(20):
        unit = make_unit(trial, s=rng.integers(1, 3))
        hi, wi = rng.integers(1, 4, size=2) * unit.down_factor
        hj, wj = rng.integers(1, 4, size=2) * unit.down_factor ** 2
        fi = torch.from_numpy(rng.standard_normal((1, 3, hi, wi)))
        fj = torch.from_numpy(rng.standard_normal((1, 3, hj, wj)))
        corr = unit.correlation(fi, fj)
        sums = corr.weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
        assert (corr.weights >= 0).all()


def test_correlation_matches_loop_oracle():
    rng = np.random.default_rng(1)
    unit = make_unit(3, c_t=2, c_s=3, c_out=2, d=2, s=1)
    fi = rng.standard_normal((2, 3, 2))
    fj = rng.standard_normal((3, 2, 4))
    corr = unit.correlation(
        torch.from_numpy(fi[None]), torch.from_numpy(fj[None])
    )
    expected = correlation_oracle(
        fi,
        fj,
        unit.proj_query.weight.detach().numpy(),
        unit.proj_query.bias.detach().numpy(),
        unit.proj_key.weight.detach().numpy(),
        unit.proj_key.bias.detach().numpy(),
        factor=1,
    )
    np.testing.assert_allclose(corr.weights[0].detach().numpy(), expected, atol=1e-9)


def test_cross_features_match_loop_oracle():
    rng = np.random.default_rng(2)
    unit = make_unit(4, c_t=2, c_s=3, c_out=4, d=3, s=1)
    fi = rng.standard_normal((2, 3, 3))
    fj = rng.standard_normal((3, 2, 2))
    corr = unit.correlation(torch.from_numpy(fi[None]), torch.from_numpy(fj[None]))
    out = unit.cross_features(torch.from_numpy(fj[None]), corr)
    expected = cross_features_oracle(
        fj,
        corr.weights[0].detach().numpy(),
        unit.proj_value.weight.detach().numpy(),
        unit.proj_value.bias.detach().numpy(),
        factor=1,
        target_grid=(3, 3),
    )
    np.testing.assert_allclose(out[0].detach().numpy(), expected, atol=1e-9)


def test_self_attention_matches_loop_oracle():
    rng = np.random.default_rng(3)
    unit = make_unit(5, c_s=2, c_out=3)
    fj = rng.standard_normal((2, 4, 5))
    out = unit.self_attention(torch.from_numpy(fj[None]))
    expected = gated_self_oracle(
        fj,
        unit.self_feature.weight.detach().numpy(),
        unit.self_feature.bias.detach().numpy(),
        unit.self_mask.weight.detach().numpy(),
        unit.self_mask.bias.detach().numpy(),
    )
    np.testing.assert_allclose(out[0].detach().numpy(), expected, atol=1e-9)


def test_fresh_gate_silences_cross_branch():
    unit = make_unit(6, s=2)
    fi = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    fj = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    out = unit(fi, fj)
    # first out_channels channels are the gated cross branch, exactly zero
    assert (out[:, : unit.out_channels] == 0).all()
    # the self branch is generically non-zero
    assert out[:, unit.out_channels :].abs().max() > 0


def test_directional_shapes_all_kinds():
    for kind in ("spatial", "channel", "both"):
        unit = make_unit(7, c_out=5, s=2, attention_kind=kind)
        fi = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        fj = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        out = unit(fi, fj)
        assert out.shape == (2, 10, 8, 8), kind


def test_no_self_attention_halves_output_channels():
    unit = make_unit(8, c_out=4, s=2, use_self_attention=False)
    fi = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    fj = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    assert unit(fi, fj).shape == (1, 4, 8, 8)
    assert unit.message_channels == 4


def test_rectangular_grids_supported():
    # target and source resolutions differ; output tracks the target
    unit = make_unit(9, s=2)
    fi = torch.randn(1, 3, 8, 12, dtype=torch.float64)
    fj = torch.randn(1, 3, 16, 4, dtype=torch.float64)
    out = unit(fi, fj)
    assert out.shape[-2:] == (8, 12)
    corr = unit.correlation(fi, fj)
    # N_i = (8/2)*(12/2) = 24 query positions, N_j = (16/4)*(4/4) = 4 source ones
    assert corr.weights.shape == (1, 24, 4)


def test_divisibility_is_enforced():
    unit = make_unit(10, s=2)
    fi = torch.randn(1, 3, 7, 8, dtype=torch.float64)
    fj = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    with pytest.raises(ValueError, match="not divisible"):
        unit.correlation(fi, fj)
    with pytest.raises(ValueError, match="not divisible"):
        unit.correlation(fj, fi[:, :, :6, :6])


def test_correlation_matrix_rejects_bad_grid():
    with pytest.raises(ValueError, match="target grid"):
        CorrelationMatrix(torch.ones(1, 5, 4), target_grid=(2, 2), scale=1)


def test_downscale_averages_blocks():
    x = torch.arange(16, dtype=torch.float64).reshape(1, 1, 4, 4)
    out = downscale(x, 2)
    expected = torch.tensor([[[[2.5, 4.5], [10.5, 12.5]]]], dtype=torch.float64)
    assert torch.equal(out, expected)


def test_pairwise_exchange_is_two_independent_units():
    torch.manual_seed(11)
    pair = PairwiseExchange(4, proj_dim=2, down_factor=2).double()
    a = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    b = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    into_a, into_b = pair(a, b)
    assert into_a.shape == into_b.shape == (1, 8, 8, 8)
    assert not torch.equal(into_a, into_b)


class TestExchangeBlock:
    def _block(self, seed=0, tasks=("S", "D", "N"), **kw):
        torch.manual_seed(seed)
        return ExchangeBlock(tasks, 4, proj_dim=2, down_factor=2, **kw).double()

    def _feats(self, tasks=("S", "D", "N"), seed=1):
        torch.manual_seed(seed)
        return {t: torch.randn(2, 4, 8, 8, dtype=torch.float64) for t in tasks}

    def test_output_shapes_match_inputs(self):
        for fusion in ("add", "concat", "prod"):
            block = self._block(fusion_kind=fusion)
            feats = self._feats()
            out = block(feats)
            assert set(out) == set(feats)
            for t in feats:
                assert out[t].shape == feats[t].shape, fusion

    def test_single_task_is_identity(self):
        block = self._block(tasks=("D",))
        feats = self._feats(tasks=("D",))
        out = block(feats)
        assert torch.equal(out["D"], feats["D"])

    def test_missing_task_raises(self):
        block = self._block()
        feats = self._feats(tasks=("S", "D"))
        with pytest.raises(KeyError, match="missing features"):
            block(feats)

    def test_zeroed_residuals_make_add_fusion_identity(self):
        block = self._block(fusion_kind="add")
        zero_exchange_residuals(block)
        feats = self._feats()
        block.train()
        out = block(feats)
        for t in feats:
            assert torch.equal(out[t], feats[t])
        block.eval()
        out = block(feats)
        for t in feats:
            assert torch.equal(out[t], feats[t])

    def test_prod_fusion_with_zero_residual_is_identity(self):
        block = self._block(fusion_kind="prod")
        zero_exchange_residuals(block)
        feats = self._feats()
        out = block(feats)
        for t in feats:
            assert torch.equal(out[t], feats[t])

    def test_duplicate_tasks_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            ExchangeBlock(("S", "S"), 4)


def test_padnet_style_exchange_sums_gated_messages():
    torch.manual_seed(12)
    block = SelfAttentionExchange(("S", "D"), 3).double()
    feats = {t: torch.randn(1, 3, 6, 6, dtype=torch.float64) for t in ("S", "D")}
    out = block(feats)
    rng_expected = {}
    for target, source in (("S", "D"), ("D", "S")):
        key = f"{source}_to_{target}"
        msg = block.features[key](feats[source]) * torch.sigmoid(
            block.masks[key](feats[source])
        )
        rng_expected[target] = feats[target] + msg
    for t in feats:
        assert torch.allclose(out[t], rng_expected[t], atol=1e-12)


def test_padnet_style_exchange_single_task_identity():
    block = SelfAttentionExchange(("S",), 3)
    x = {"S": torch.randn(1, 3, 4, 4)}
    assert torch.equal(block(x)["S"], x["S"])
