"""
Tests for the selective scan, token navigation and the Self-Navigated Mamba Module
"""

import math

import pytest
import torch
import torch.nn.functional as F
from torch.func import functional_call

from snarm.models.snmm import (
    SelectiveSSM,
    SelfNavigatedMambaModule,
    SMBlock,
    TokenGrid,
    _reflect_pad,
    direction_orders,
    navigate_tokens,
    selected_count,
    selective_scan,
)


def _full_grid(tokens: torch.Tensor) -> TokenGrid:
    b, _, h, w = tokens.shape
    return TokenGrid(tokens, torch.ones(b, h, w, dtype=torch.bool))


def _scan_inputs(generator, length=3, dim=2, state=2, dtype=torch.float64):
    u = torch.randn(2, length, dim, generator=generator, dtype=dtype)
    delta = F.softplus(torch.randn(2, length, dim, generator=generator, dtype=dtype))
    A = -torch.rand(dim, state, generator=generator, dtype=dtype) - 0.1
    B = torch.randn(2, length, state, generator=generator, dtype=dtype)
    C = torch.randn(2, length, state, generator=generator, dtype=dtype)
    D = torch.randn(dim, generator=generator, dtype=dtype)
    return u, delta, A, B, C, D


# embedding


def test_embed_zero_residuals_give_zero_tokens():
    module = SelfNavigatedMambaModule(in_dim=6, dim=4, state_dim=2)
    torch.nn.init.zeros_(module.embedding.bias)
    grid = module.embed(torch.zeros(1, 3, 3, 6))
    assert torch.all(grid.tokens == 0)
    assert bool(grid.mask.all())


def test_embed_identity_projection():
    module = SelfNavigatedMambaModule(in_dim=4, dim=4, state_dim=2)
    with torch.no_grad():
        module.embedding.weight.copy_(torch.eye(4))
        module.embedding.bias.zero_()
    residuals = torch.rand(2, 3, 2, 4)
    grid = module.embed(residuals)
    torch.testing.assert_close(grid.tokens, residuals.permute(0, 3, 1, 2))


def test_embed_matches_matvec():
    module = SelfNavigatedMambaModule(in_dim=3, dim=5, state_dim=2).double()
    residuals = torch.rand(1, 2, 2, 3, dtype=torch.float64)
    tokens = module.embed(residuals).tokens
    W, b = module.embedding.weight, module.embedding.bias
    for i in range(2):
        for j in range(2):
            torch.testing.assert_close(tokens[0, :, i, j], W @ residuals[0, i, j] + b)


# navigation


def test_navigate_keep_all():
    grid = _full_grid(torch.rand(1, 2, 3, 3))
    out = navigate_tokens(grid, torch.rand(1, 3, 3), 1.0)
    assert bool(out.mask.all())


def test_navigate_picks_highest_scores():
    grid = _full_grid(torch.rand(1, 2, 2, 2))
    q_star = torch.tensor([[[0.9, 0.1], [0.5, 0.4]]])
    out = navigate_tokens(grid, q_star, 0.5)
    assert out.mask.reshape(-1).tolist() == [True, False, True, False]


def test_navigate_uniform_scores_take_first_indices():
    grid = _full_grid(torch.rand(1, 2, 2, 3))
    out = navigate_tokens(grid, torch.full((1, 2, 3), 0.3), 0.5)
    assert out.mask.reshape(-1).tolist() == [True, True, True, False, False, False]


@pytest.mark.parametrize("seed", range(200))
def test_navigation_matches_sort_oracle(seed):
    gen = torch.Generator().manual_seed(seed)
    h, w = (int(v) for v in torch.randint(1, 7, (2,), generator=gen))
    ratio = max(0.05, float(torch.rand(1, generator=gen)))
    q_star = torch.round(torch.rand(2, h, w, generator=gen) * 10) / 10
    out = navigate_tokens(_full_grid(torch.rand(2, 3, h, w, generator=gen)), q_star, ratio)

    count = selected_count(h * w, ratio)
    for b in range(2):
        flat = q_star[b].reshape(-1).tolist()
        expected = sorted(sorted(range(h * w), key=lambda i: (-flat[i], i))[:count])
        assert torch.nonzero(out.mask[b].reshape(-1)).view(-1).tolist() == expected


def test_selected_count_bounds():
    assert selected_count(10, 0.01) == 1
    assert selected_count(10, 0.25) == 3
    with pytest.raises(ValueError):
        selected_count(10, 0.0)


def test_token_grid_needs_a_selected_token():
    with pytest.raises(ValueError):
        TokenGrid(torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2, dtype=torch.bool))


def test_direction_orders():
    right, left, down, up = direction_orders(2, 3)
    assert right.tolist() == [0, 1, 2, 3, 4, 5]
    assert left.tolist() == [2, 1, 0, 5, 4, 3]
    assert down.tolist() == [0, 3, 1, 4, 2, 5]
    assert up.tolist() == [3, 0, 4, 1, 5, 2]


# selective scan


def test_scan_hand_unrolled():
    u = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64).view(3, 1)
    delta = torch.tensor([0.5, 1.0, 0.2], dtype=torch.float64).view(3, 1)
    A = torch.tensor([[-1.0]], dtype=torch.float64)
    B = torch.tensor([1.0, 0.5, 2.0], dtype=torch.float64).view(3, 1)
    C = torch.tensor([0.3, 1.0, -1.0], dtype=torch.float64).view(3, 1)
    D = torch.tensor([0.7], dtype=torch.float64)

    h1 = 0.5 * 1.0 * 1.0
    h2 = math.exp(-1.0) * h1 + 1.0 * 0.5 * 2.0
    h3 = math.exp(-0.2) * h2 + 0.2 * 2.0 * 3.0
    expected = [0.3 * h1 + 0.7 * 1.0, 1.0 * h2 + 0.7 * 2.0, -1.0 * h3 + 0.7 * 3.0]

    y = selective_scan(u, delta, A, B, C, D)
    torch.testing.assert_close(y.view(-1), torch.tensor(expected, dtype=torch.float64))


def test_scan_without_memory_depends_on_current_input_only():
    gen = torch.Generator().manual_seed(0)
    u, delta, _, B, C, D = _scan_inputs(gen, length=4)
    A = torch.full((2, 2), -1e9, dtype=torch.float64)
    y = selective_scan(u, delta, A, B, C, D)
    changed = u.clone()
    changed[:, 0] += 5.0
    y_changed = selective_scan(changed, delta, A, B, C, D)
    torch.testing.assert_close(y[:, 1:], y_changed[:, 1:])


def test_scan_is_linear_for_fixed_projections():
    gen = torch.Generator().manual_seed(1)
    u, delta, A, B, C, D = _scan_inputs(gen, length=5)
    torch.testing.assert_close(selective_scan(2 * u, delta, A, B, C, D), 2 * selective_scan(u, delta, A, B, C, D))


@pytest.mark.parametrize("seed", range(200))
def test_scan_matches_closed_form_sum(seed):
    gen = torch.Generator().manual_seed(seed)
    length = int(torch.randint(1, 6, (1,), generator=gen))
    u, delta, A, B, C, D = _scan_inputs(gen, length=length)
    y = selective_scan(u, delta, A, B, C, D)

    a_bar = torch.exp(delta[..., None] * A)
    b_u = delta[..., None] * B[:, :, None, :] * u[..., None]
    expected = torch.empty_like(y)
    for t in range(length):
        state = torch.zeros_like(b_u[:, 0])
        for s in range(t + 1):
            decay = torch.ones_like(state)
            for r in range(s + 1, t + 1):
                decay = decay * a_bar[:, r]
            state = state + decay * b_u[:, s]
        expected[:, t] = (state * C[:, t, None, :]).sum(-1) + D * u[:, t]
    torch.testing.assert_close(y, expected)


def test_ssm_zero_input_gives_zero_output():
    ssm = SelectiveSSM(dim=3, state_dim=4, num_scans=2)
    assert torch.all(ssm(torch.zeros(2, 1, 5, 3)) == 0)


def test_ssm_discretised_state_matrix_in_unit_interval():
    ssm = SelectiveSSM(dim=3, state_dim=4)
    delta = F.softplus(ssm.delta_bias)
    a_bar = torch.exp(delta * ssm.A)
    assert bool(((a_bar > 0) & (a_bar < 1)).all())
    assert delta.item() == pytest.approx(1.0)


def test_scan_gradcheck():
    gen = torch.Generator().manual_seed(2)
    inputs = tuple(t.requires_grad_() for t in _scan_inputs(gen, length=4, dim=2, state=3))
    assert torch.autograd.gradcheck(selective_scan, inputs, eps=1e-6, atol=1e-6, rtol=1e-4)


# SMB


def test_smb_single_row_matches_direct_scan():
    torch.manual_seed(0)
    block = SMBlock(dim=3, state_dim=2).double()
    x = torch.randn(1, 3, 1, 5, dtype=torch.float64)
    out = block(_full_grid(x))

    conv = block.convs[0](_reflect_pad(x)).flatten(2).transpose(1, 2)[0]
    ssm = block.ssm
    delta = F.softplus(conv @ ssm.delta_weight[0] + ssm.delta_bias[0]).unsqueeze(-1).expand_as(conv)
    expected = selective_scan(conv, delta, ssm.A[0], conv @ ssm.B_weight[0].T, conv @ ssm.C_weight[0].T, ssm.D[0])
    torch.testing.assert_close(out.right[0, :, 0, :], expected.T + x[0, :, 0, :])


def test_smb_left_and_right_differ_on_asymmetric_row():
    torch.manual_seed(1)
    block = SMBlock(dim=2, state_dim=2).double()
    with torch.no_grad():
        block.convs[1].load_state_dict(block.convs[0].state_dict())
        for p in block.ssm.parameters():
            p[1] = p[0]
    x = torch.arange(10, dtype=torch.float64).view(1, 2, 1, 5)
    out = block(_full_grid(x))
    assert not torch.allclose(out.right, out.left)


def test_smb_zero_input_zero_bias_gives_zero_output():
    block = SMBlock(dim=2, state_dim=2)
    for conv in block.convs:
        torch.nn.init.zeros_(conv.bias)
    out = block(_full_grid(torch.zeros(1, 2, 3, 3)))
    for o in out:
        assert torch.all(o == 0)


def test_smb_horizontal_flip_equivariance():
    torch.manual_seed(2)
    block = SMBlock(dim=3, state_dim=2).double()
    with torch.no_grad():
        for conv in block.convs:
            conv.weight.copy_((conv.weight + conv.weight.flip(-1)) / 2)
    swapped = SMBlock(dim=3, state_dim=2).double()
    swapped.load_state_dict(block.state_dict())
    with torch.no_grad():
        swapped.convs[0].load_state_dict(block.convs[1].state_dict())
        swapped.convs[1].load_state_dict(block.convs[0].state_dict())
        for p in swapped.ssm.parameters():
            p.copy_(p[[1, 0, 2, 3]])

    x = torch.randn(1, 3, 4, 5, dtype=torch.float64)
    out = block(_full_grid(x))
    flipped = swapped(_full_grid(x.flip(-1)))
    torch.testing.assert_close(flipped.right, out.left.flip(-1))
    torch.testing.assert_close(flipped.left, out.right.flip(-1))


def test_smb_bypass_keeps_conv_output():
    torch.manual_seed(3)
    block = SMBlock(dim=2, state_dim=2).double()
    x = torch.randn(1, 2, 3, 4, dtype=torch.float64)
    q_star = torch.zeros(1, 3, 4)
    q_star[0, 1, 2] = 1.0
    grid = navigate_tokens(_full_grid(x), q_star, 1e-6)
    assert int(grid.mask.sum()) == 1

    out = block(grid)
    padded = _reflect_pad(x)
    skip = ~grid.mask[0]
    for conv, o in zip(block.convs, out):
        expected = conv(padded) + x
        torch.testing.assert_close(o[0][:, skip], expected[0][:, skip])


def test_smb_rejects_unequal_selection_counts():
    block = SMBlock(dim=2, state_dim=2)
    mask = torch.ones(2, 2, 2, dtype=torch.bool)
    mask[1, 0, 0] = False
    with pytest.raises(ValueError):
        block(TokenGrid(torch.zeros(2, 2, 2, 2), mask))


def test_smb_gradcheck_on_input_and_parameters():
    torch.manual_seed(4)
    block = SMBlock(dim=2, state_dim=2).double()
    names = ["convs.0.weight", "convs.3.bias", "ssm.A_log", "ssm.delta_weight", "ssm.B_weight", "ssm.C_weight", "ssm.D"]
    base = dict(block.named_parameters())
    x = torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    params = [base[n].detach().clone().requires_grad_() for n in names]

    def fn(tokens, *values):
        out = functional_call(block, dict(zip(names, values)), (_full_grid(tokens),))
        return torch.stack(tuple(out))

    assert torch.autograd.gradcheck(fn, (x, *params), eps=1e-6, atol=1e-6, rtol=1e-4)


# SNMM


def test_snmm_shapes_and_determinism():
    torch.manual_seed(5)
    module = SelfNavigatedMambaModule(in_dim=6, dim=4, state_dim=2)
    residuals = torch.rand(2, 3, 4, 6)
    q_star = torch.rand(2, 3, 4)
    first = module(residuals, q_star, 0.5)
    second = module(residuals, q_star, 0.5)
    assert len(first) == 4
    for a, b in zip(first, second):
        assert a.shape == (2, 4, 3, 4)
        assert torch.equal(a, b)


def test_snmm_gradients_match_finite_differences():
    torch.manual_seed(6)
    module = SelfNavigatedMambaModule(in_dim=4, dim=2, state_dim=2).double()
    residuals = torch.rand(1, 4, 4, 4, dtype=torch.float64)
    q_star = torch.rand(1, 4, 4, dtype=torch.float64)
    weights = torch.randn(4, 1, 2, 4, 4, dtype=torch.float64)
    names = [n for n, _ in module.named_parameters()]
    params = [p.detach().clone().requires_grad_() for _, p in module.named_parameters()]

    def loss(*values):
        out = functional_call(module, dict(zip(names, values)), (residuals, q_star, 0.75))
        return (torch.stack(tuple(out)) * weights).sum()

    assert torch.autograd.gradcheck(loss, tuple(params), eps=1e-6, atol=1e-6, rtol=1e-4)
