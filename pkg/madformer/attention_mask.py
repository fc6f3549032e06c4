"""Hybrid attention mask over a sequence plan."""

from dataclasses import dataclass
from enum import StrEnum
from typing import Self, Sequence

import torch

from madformer.layout import ROLE_CODES, TEXT_LIKE, SequencePlan, TokenRole


class MaskMode(StrEnum):
    FULL = "full"
    MLP_ABLATION = "mlp_ablation"


@dataclass(frozen=True)
class AttentionMask:
    """allowed[q, k] is True when query token q may attend to key token k."""

    allowed: torch.Tensor

    def __post_init__(self):
        if self.allowed.ndim != 2 or self.allowed.shape[0] != self.allowed.shape[1]:
            raise ValueError(f"mask must be square, got {tuple(self.allowed.shape)}")

    @property
    def seq_len(self) -> int:
        return self.allowed.shape[0]

    def select(self: Self, queries: Sequence[int], keys: Sequence[int]) -> torch.Tensor:
        """Rows for `queries`, columns for `keys`, in the given order."""
        q = torch.as_tensor(list(queries), dtype=torch.long)
        k = torch.as_tensor(list(keys), dtype=torch.long)
        return self.allowed.index_select(0, q).index_select(1, k)


def _code(role: TokenRole) -> int:
    return ROLE_CODES[role]


def build_mask(plan: SequencePlan, mode: MaskMode = MaskMode.FULL) -> AttentionMask:
    table = plan.table
    roles, blocks = table.roles, table.blocks
    index = torch.arange(plan.seq_len)

    q_role, k_role = roles[:, None], roles[None, :]
    q_block, k_block = blocks[:, None], blocks[None, :]

    key_noisy = k_role == _code(TokenRole.NOISY)
    key_clean = k_role == _code(TokenRole.CLEAN)
    key_prefix = (k_role == _code(TokenRole.TEXT)) | (k_role == _code(TokenRole.BOI))

    text_query = torch.zeros_like(q_role, dtype=torch.bool)
    for role in TEXT_LIKE:
        text_query |= q_role == _code(role)
    text_rows = text_query & (index[None, :] <= index[:, None]) & ~key_noisy

    clean_rows = (q_role == _code(TokenRole.CLEAN)) & (
        key_prefix | (key_clean & (k_block <= q_block))
    )

    same_noisy_block = key_noisy & (k_block == q_block)
    if mode == MaskMode.MLP_ABLATION:
        noisy_visible = same_noisy_block
    else:
        noisy_visible = key_prefix | (key_clean & (k_block < q_block)) | same_noisy_block
    noisy_rows = (q_role == _code(TokenRole.NOISY)) & noisy_visible

    return AttentionMask(allowed=text_rows | clean_rows | noisy_rows)


def mask_oracle(plan: SequencePlan, mode: MaskMode, q: int, k: int) -> bool:
    """Evaluates the visibility rules for a single (query, key) pair."""
    q_role, k_role = plan.role_of(q), plan.role_of(k)
    q_block, k_block = plan.block_of(q), plan.block_of(k)

    if q == k:
        return True

    if q_role in TEXT_LIKE:
        if k_role == TokenRole.NOISY:
            return False
        return k < q

    if q_role == TokenRole.CLEAN:
        if k_role in (TokenRole.TEXT, TokenRole.BOI):
            return True
        if k_role == TokenRole.CLEAN:
            return k_block <= q_block
        return False

    # NOISY query
    if k_role == TokenRole.NOISY:
        return k_block == q_block
    if mode == MaskMode.MLP_ABLATION:
        return False
    if k_role in (TokenRole.TEXT, TokenRole.BOI):
        return True
    if k_role == TokenRole.CLEAN:
        return k_block < q_block
    return False
