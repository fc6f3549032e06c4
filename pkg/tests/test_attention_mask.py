import random

import pytest
import torch

from madformer.attention_mask import AttentionMask, MaskMode, build_mask, mask_oracle
from madformer.errors import NonDivisibleGrid
from madformer.layout import TokenRole, build_block_layout, plan_sequence, strip_layout


def _random_plans(count: int, max_len: int = 32):
    rng = random.Random(7)
    plans = []
    while len(plans) < count:
        grid_h, grid_w = rng.randint(1, 4), rng.randint(1, 4)
        ar_length = rng.choice([1, 2, 4])
        try:
            layout = build_block_layout(grid_h, grid_w, ar_length)
        except NonDivisibleGrid:
            continue
        plan = plan_sequence(layout, rng.randint(0, 4), rng.random() < 0.5)
        if plan.seq_len <= max_len:
            plans.append((plan, rng.choice(list(MaskMode))))
    return plans


@pytest.fixture
def strip_plan():
    """BOI, two clean blocks of two tokens, two noisy blocks, EOI."""
    return plan_sequence(strip_layout(tokens_per_block=2, ar_length=2), 0, True)


def test_mask_matches_oracle_on_random_plans():
    for plan, mode in _random_plans(1000):
        allowed = build_mask(plan, mode).allowed.tolist()
        for q in range(plan.seq_len):
            for k in range(plan.seq_len):
                assert allowed[q][k] == mask_oracle(plan, mode, q, k), (plan.entries, mode, q, k)


def test_noisy_block_sees_earlier_clean_blocks_and_itself(strip_plan):
    # Arrange
    mask = build_mask(strip_plan, MaskMode.FULL)
    image = sorted(strip_plan.indices(TokenRole.CLEAN) + strip_plan.indices(TokenRole.NOISY))

    # Act
    rows = mask.select(strip_plan.indices(TokenRole.NOISY, 1), image)

    # Assert: image tokens t0..t7 are C0 C0 C1 C1 N0 N0 N1 N1
    expected = torch.tensor([True, True, False, False, False, False, True, True])
    assert torch.equal(rows[0], expected)
    assert torch.equal(rows[1], expected)


def test_mlp_ablation_restricts_noisy_block_to_itself(strip_plan):
    mask = build_mask(strip_plan, MaskMode.MLP_ABLATION)
    image = sorted(strip_plan.indices(TokenRole.CLEAN) + strip_plan.indices(TokenRole.NOISY))

    rows = mask.select(strip_plan.indices(TokenRole.NOISY, 1), image)

    expected = torch.tensor([False] * 6 + [True, True])
    assert torch.equal(rows[0], expected)
    # prefix is hidden as well
    boi = strip_plan.indices(TokenRole.BOI)[0]
    assert not mask.allowed[strip_plan.indices(TokenRole.NOISY, 1)[0], boi]


def test_every_query_attends_to_itself():
    for plan, mode in _random_plans(100):
        allowed = build_mask(plan, mode).allowed

        assert allowed.diagonal().all()
        assert allowed.any(dim=1).all()


def test_no_noisy_token_is_visible_outside_its_own_block():
    for plan, mode in _random_plans(200):
        allowed = build_mask(plan, mode).allowed
        roles, blocks = plan.token_roles, plan.token_blocks

        for k in plan.indices(TokenRole.NOISY):
            visible_to = allowed[:, k].nonzero().flatten().tolist()
            assert all(roles[q] == TokenRole.NOISY and blocks[q] == blocks[k] for q in visible_to)


def test_text_tokens_are_causal():
    plan = plan_sequence(build_block_layout(2, 2, 2), text_len=3, clean_blocks_enabled=True)
    allowed = build_mask(plan).allowed

    text = plan.indices(TokenRole.TEXT)

    assert torch.equal(allowed[text][:, text], torch.ones(3, 3, dtype=torch.bool).tril())


def test_clean_block_sees_prefix_but_not_later_clean_blocks():
    plan = plan_sequence(strip_layout(2, 3), text_len=1, clean_blocks_enabled=True)
    allowed = build_mask(plan).allowed

    query = plan.indices(TokenRole.CLEAN, 1)[0]

    for k in plan.indices(TokenRole.TEXT) + plan.indices(TokenRole.BOI):
        assert allowed[query, k]
    for k in plan.indices(TokenRole.CLEAN, 1):
        assert allowed[query, k]
    for k in plan.indices(TokenRole.CLEAN, 2):
        assert not allowed[query, k]


def test_eoi_sees_clean_blocks_but_no_noisy_ones():
    plan = plan_sequence(strip_layout(2, 2), text_len=0, clean_blocks_enabled=True)
    allowed = build_mask(plan).allowed
    eoi = plan.indices(TokenRole.EOI)[0]

    assert allowed[eoi, plan.indices(TokenRole.CLEAN)].all()
    assert not allowed[eoi, plan.indices(TokenRole.NOISY)].any()


def test_attention_mask_must_be_square():
    with pytest.raises(ValueError):
        AttentionMask(allowed=torch.ones(2, 3, dtype=torch.bool))
