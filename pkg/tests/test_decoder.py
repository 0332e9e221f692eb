"""
Tests for the Multi-View Decoder, the ensemble and image scores
"""

import numpy as np
import pytest
import torch
from torch.func import functional_call

from snarm.core.exceptions import ConfigError, DataError
from snarm.models.decoder import (
    NUM_VIEWS,
    AnomalyMap,
    MultiViewDecoder,
    ViewBranch,
    atrous_apply,
    ensemble,
    final_map,
    head_apply,
    image_score,
)
from snarm.models.snmm import DirectionalOutputs
from snarm.schemas.config import DILATION_RATES


def _delta_kernel(branch: ViewBranch):
    with torch.no_grad():
        branch.atrous.weight.zero_()
        for c in range(branch.atrous.weight.shape[0]):
            branch.atrous.weight[c, c, 1, 1] = 1.0
        branch.atrous.bias.zero_()


# atrous block


@pytest.mark.parametrize("rate", DILATION_RATES)
def test_atrous_delta_kernel_is_identity(rate):
    branch = ViewBranch(3, rate)
    _delta_kernel(branch)
    x = torch.randn(2, 3, 5, 6)
    torch.testing.assert_close(atrous_apply(x, branch), x)


@pytest.mark.parametrize("rate", DILATION_RATES)
def test_atrous_impulse_response_hits_dilated_taps(rate):
    branch = ViewBranch(1, rate)
    with torch.no_grad():
        branch.atrous.weight.fill_(1.0)
        branch.atrous.bias.zero_()
    size = 2 * max(DILATION_RATES) + 3
    c = size // 2
    x = torch.zeros(1, 1, size, size)
    x[0, 0, c, c] = 1.0
    out = atrous_apply(x, branch)[0, 0]
    assert out.shape == (size, size)
    hits = {(int(i), int(j)) for i, j in torch.nonzero(out)}
    assert hits == {(c + di * rate, c + dj * rate) for di in (-1, 0, 1) for dj in (-1, 0, 1)}


def test_atrous_zero_in_zero_out():
    branch = ViewBranch(2, 6)
    torch.nn.init.zeros_(branch.atrous.bias)
    assert torch.all(atrous_apply(torch.zeros(1, 2, 4, 4), branch) == 0)


@pytest.mark.parametrize("rate", [1, 2, 4, 5])
def test_branch_rejects_unknown_rate(rate):
    with pytest.raises(ConfigError):
        ViewBranch(2, rate)


# head


def test_head_on_zero_features_is_one_half():
    branch = ViewBranch(4, 3)
    torch.nn.init.zeros_(branch.head.bias)
    out = head_apply(torch.zeros(2, 4, 3, 3), branch, (12, 12))
    assert out.shape == (2, 12, 12)
    assert torch.all(out == 0.5)


def test_head_on_constant_grid_is_constant():
    branch = ViewBranch(3, 6)
    out = head_apply(torch.full((1, 3, 4, 4), 0.7), branch, (16, 16))
    torch.testing.assert_close(out, torch.full_like(out, out[0, 0, 0].item()))


def test_head_bilinear_upsampling_by_hand():
    branch = ViewBranch(1, 3)
    with torch.no_grad():
        branch.head.weight.fill_(1.0)
        branch.head.bias.zero_()
    features = torch.tensor([[[[0.0, 1.0], [2.0, 3.0]]]], dtype=torch.float64)
    out = head_apply(features, branch.double(), (4, 4))[0]

    a = torch.tensor([0.0, 0.25, 0.75, 1.0], dtype=torch.float64)
    logits = 2 * a[:, None] + a[None, :]
    torch.testing.assert_close(out, torch.sigmoid(logits))


def test_head_rejects_smaller_target():
    with pytest.raises(DataError):
        head_apply(torch.zeros(1, 2, 8, 8), ViewBranch(2, 12), (4, 4))


# decoder


def test_decoder_output_shapes():
    decoder = MultiViewDecoder(4)
    outputs = DirectionalOutputs(*(torch.rand(2, 4, 3, 3) for _ in range(4)))
    maps = decoder(outputs, (12, 12))
    assert maps.shape == (2, 4, 4, 12, 12)
    assert bool(((maps > 0) & (maps < 1)).all())
    assert decoder(outputs, (12, 12), scales=[2]).shape == (2, 1, 4, 12, 12)


def test_decoder_branches_are_independent():
    decoder = MultiViewDecoder(2)
    first = decoder.branches[0][0].atrous.weight
    assert all(
        branch.atrous.weight.data_ptr() != first.data_ptr()
        for row in decoder.branches
        for branch in row
        if branch is not decoder.branches[0][0]
    )
    assert [row[0].rate for row in decoder.branches] == list(DILATION_RATES)


def test_decoder_gradcheck():
    torch.manual_seed(0)
    decoder = MultiViewDecoder(2).double()
    names = ["branches.0.0.atrous.weight", "branches.3.2.head.weight", "branches.1.3.head.bias"]
    base = dict(decoder.named_parameters())
    params = [base[n].detach().clone().requires_grad_() for n in names]
    inputs = [torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True) for _ in range(4)]

    def fn(*tensors):
        outputs = DirectionalOutputs(*tensors[:4])
        return functional_call(decoder, dict(zip(names, tensors[4:])), (outputs, (5, 5)))

    assert torch.autograd.gradcheck(fn, (*inputs, *params), eps=1e-6, atol=1e-6, rtol=1e-4)


# ensemble


def test_ensemble_mean_example():
    maps = torch.cat([torch.full((1, 8, 3, 3), 0.2), torch.full((1, 8, 3, 3), 0.6)], dim=1)
    torch.testing.assert_close(ensemble(maps), torch.full((1, 3, 3), 0.4))


def test_ensemble_needs_sixteen_maps():
    with pytest.raises(DataError):
        ensemble(torch.rand(1, 15, 4, 4))
    assert NUM_VIEWS == 16


@pytest.mark.parametrize("seed", range(200))
def test_ensemble_bounds_and_permutation_invariance(seed):
    gen = torch.Generator().manual_seed(seed)
    maps = torch.rand(2, 4, 4, 5, 5, generator=gen, dtype=torch.float64)
    mean = ensemble(maps)
    flat = maps.flatten(1, 2)
    assert bool((mean >= flat.min(dim=1).values).all())
    assert bool((mean <= flat.max(dim=1).values).all())
    shuffled = flat[:, torch.randperm(16, generator=gen)]
    torch.testing.assert_close(ensemble(shuffled), mean)


# image score


def test_image_score_examples():
    values = np.zeros((10, 10))
    values[2, 3] = 0.9
    values[7, 1] = 0.8
    assert image_score(values, "max") == pytest.approx(0.9)
    assert image_score(values, "top_q_mean", q=0.02) == pytest.approx(0.85)
    assert image_score(values, "top_q_mean", q=0.001) == pytest.approx(0.9)


def test_image_score_of_constant_map():
    values = np.full((6, 6), 0.3)
    assert image_score(values, "max") == pytest.approx(0.3)
    assert image_score(values, "top_q_mean", q=0.5) == pytest.approx(0.3)


def test_image_score_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        image_score(np.zeros((2, 2)), "median")
    with pytest.raises(ConfigError):
        image_score(np.zeros((2, 2)), "top_q_mean", q=0.0)


def test_anomaly_map_validation_and_png():
    amap = AnomalyMap.from_values(np.array([[0.0, 1.0], [0.5, 0.25]]), "max")
    assert amap.image_score == pytest.approx(1.0)
    np.testing.assert_array_equal(amap.to_png16(), [[0, 65535], [32768, 16384]])
    with pytest.raises(DataError):
        AnomalyMap(np.array([[1.2]]), 1.2)
    with pytest.raises(DataError):
        AnomalyMap(np.zeros(4), 0.0)


# single-view decoder


def test_single_view_decoder_uses_one_branch_on_mean_output():
    decoder = MultiViewDecoder(3, multiview=False)
    assert decoder.rates == (DILATION_RATES[0],)
    assert sum(len(row) for row in decoder.branches) == 1

    outputs = DirectionalOutputs(*(torch.rand(2, 3, 4, 4) for _ in range(4)))
    maps = decoder(outputs, (8, 8))
    assert maps.shape == (2, 1, 1, 8, 8)
    expected = decoder.branches[0][0](outputs.mean(), (8, 8))
    torch.testing.assert_close(maps[:, 0, 0], expected)
    torch.testing.assert_close(final_map(maps), expected)


def test_final_map_ensembles_sixteen_views():
    maps = torch.rand(2, 4, 4, 3, 3)
    torch.testing.assert_close(final_map(maps), ensemble(maps))
    with pytest.raises(DataError):
        final_map(torch.rand(1, 2, 4, 4))
