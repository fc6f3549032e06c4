"""Block partitioning of latent grids and the interleaved sequence plan."""

from dataclasses import dataclass, field
from enum import StrEnum
from functools import cached_property
from typing import Optional, Self, Sequence

import torch

from madformer.errors import NonDivisibleGrid, ShapeMismatch


class TokenRole(StrEnum):
    TEXT = "text"
    BOI = "boi"
    CLEAN = "clean"
    NOISY = "noisy"
    EOI = "eoi"


# Integer codes used by the vectorised mask and tower routing.
ROLE_CODES: dict[TokenRole, int] = {
    TokenRole.TEXT: 0,
    TokenRole.BOI: 1,
    TokenRole.CLEAN: 2,
    TokenRole.NOISY: 3,
    TokenRole.EOI: 4,
}

TEXT_LIKE = (TokenRole.TEXT, TokenRole.BOI, TokenRole.EOI)


def delimiter_ids(text_vocab: int) -> tuple[int, int]:
    """Returns the (BOI, EOI) token ids, the two highest ids of the vocabulary."""
    if text_vocab < 3:
        raise ValueError(f"text vocabulary of {text_vocab} leaves no room for BOI/EOI")
    return text_vocab - 2, text_vocab - 1


@dataclass(frozen=True)
class BlockLayout:
    grid_h: int
    grid_w: int
    block_h: int
    block_w: int
    ar_length: int
    block_order: tuple[tuple[int, int], ...]

    @property
    def block_rows(self) -> int:
        return self.grid_h // self.block_h

    @property
    def block_cols(self) -> int:
        return self.grid_w // self.block_w

    @property
    def tokens_per_block(self) -> int:
        return self.block_h * self.block_w

    def patch_coords(self, block_index: int) -> list[tuple[int, int]]:
        """Grid (row, col) of every patch in a block, raster order inside the block."""
        block_row, block_col = self.block_order[block_index]
        top, left = block_row * self.block_h, block_col * self.block_w
        return [
            (top + r, left + c) for r in range(self.block_h) for c in range(self.block_w)
        ]


def build_block_layout(grid_h: int, grid_w: int, ar_length: int) -> BlockLayout:
    """
    Partitions a grid_h x grid_w patch grid into ar_length equal rectangles.

    Among the arrangements that tile the grid, the one with the most square
    blocks wins; ties go to more block rows.

    Raises:
        NonDivisibleGrid: If no equal rectangular partition exists
    """
    if grid_h < 1 or grid_w < 1 or ar_length < 1:
        raise NonDivisibleGrid(
            f"grid {grid_h}x{grid_w} with ar_length={ar_length} is not a valid partition"
        )

    candidates = [
        (rows, ar_length // rows)
        for rows in range(1, ar_length + 1)
        if ar_length % rows == 0
        and grid_h % rows == 0
        and grid_w % (ar_length // rows) == 0
    ]
    if not candidates:
        raise NonDivisibleGrid(
            f"grid {grid_h}x{grid_w} cannot be split into {ar_length} equal blocks"
        )

    rows, cols = min(
        candidates,
        key=lambda rc: (abs(grid_h // rc[0] - grid_w // rc[1]), -rc[0]),
    )
    return BlockLayout(
        grid_h=grid_h,
        grid_w=grid_w,
        block_h=grid_h // rows,
        block_w=grid_w // cols,
        ar_length=ar_length,
        block_order=tuple((r, c) for r in range(rows) for c in range(cols)),
    )


def strip_layout(tokens_per_block: int, ar_length: int) -> BlockLayout:
    """A single-row grid of ar_length blocks, each one row of tokens_per_block patches."""
    return build_block_layout(1, tokens_per_block * ar_length, ar_length)


@dataclass(frozen=True)
class LatentBlock:
    values: torch.Tensor
    block_index: int

    def __post_init__(self):
        if not torch.isfinite(self.values).all():
            raise ShapeMismatch(f"block {self.block_index} holds non-finite values")


def blockify(grid: torch.Tensor, layout: BlockLayout) -> torch.Tensor:
    """(..., H, W, C) -> (..., l, block_h * block_w, C) in raster block order."""
    if grid.ndim < 3 or tuple(grid.shape[-3:-1]) != (layout.grid_h, layout.grid_w):
        raise ShapeMismatch(
            f"expected a (..., {layout.grid_h}, {layout.grid_w}, C) grid, got {tuple(grid.shape)}"
        )
    lead = grid.shape[:-3]
    channels = grid.shape[-1]
    n = len(lead)
    x = grid.reshape(
        *lead, layout.block_rows, layout.block_h, layout.block_cols, layout.block_w, channels
    )
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, layout.ar_length, layout.tokens_per_block, channels)


def unblockify(blocks: torch.Tensor, layout: BlockLayout) -> torch.Tensor:
    """Inverse of blockify."""
    if blocks.ndim < 3 or tuple(blocks.shape[-3:-1]) != (
        layout.ar_length,
        layout.tokens_per_block,
    ):
        raise ShapeMismatch(
            f"expected (..., {layout.ar_length}, {layout.tokens_per_block}, C) blocks, "
            f"got {tuple(blocks.shape)}"
        )
    lead = blocks.shape[:-3]
    channels = blocks.shape[-1]
    n = len(lead)
    x = blocks.reshape(
        *lead, layout.block_rows, layout.block_cols, layout.block_h, layout.block_w, channels
    )
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, layout.grid_h, layout.grid_w, channels)


def split_blocks(grid: torch.Tensor, layout: BlockLayout) -> list[LatentBlock]:
    blocks = blockify(grid, layout)
    return [
        LatentBlock(values=blocks[..., i, :, :], block_index=i)
        for i in range(layout.ar_length)
    ]


def join_blocks(blocks: Sequence[LatentBlock], layout: BlockLayout) -> torch.Tensor:
    if sorted(b.block_index for b in blocks) != list(range(layout.ar_length)):
        raise ShapeMismatch(
            f"expected blocks 0..{layout.ar_length - 1}, "
            f"got {[b.block_index for b in blocks]}"
        )
    ordered = sorted(blocks, key=lambda b: b.block_index)
    shapes = {tuple(b.values.shape) for b in ordered}
    if len(shapes) != 1:
        raise ShapeMismatch(f"blocks have differing shapes: {sorted(shapes)}")
    return unblockify(torch.stack([b.values for b in ordered], dim=-3), layout)


@dataclass(frozen=True)
class PlanEntry:
    role: TokenRole
    block: Optional[int]
    token_count: int
    coords: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class TokenTable:
    """Per-token view of a plan as tensors."""

    roles: torch.Tensor
    blocks: torch.Tensor
    positions: torch.Tensor


@dataclass(frozen=True)
class SequencePlan:
    layout: Optional[BlockLayout]
    text_len: int
    clean_blocks: bool
    entries: tuple[PlanEntry, ...] = field(default=())

    @cached_property
    def token_roles(self) -> list[TokenRole]:
        return [e.role for e in self.entries for _ in range(e.token_count)]

    @cached_property
    def token_blocks(self) -> list[int]:
        return [
            -1 if e.block is None else e.block
            for e in self.entries
            for _ in range(e.token_count)
        ]

    @cached_property
    def token_coords(self) -> list[tuple[int, int]]:
        return [c for e in self.entries for c in e.coords]

    @property
    def seq_len(self) -> int:
        return len(self.token_roles)

    @property
    def ar_length(self) -> int:
        return 0 if self.layout is None else self.layout.ar_length

    @property
    def has_image(self) -> bool:
        return self.layout is not None

    @cached_property
    def table(self) -> TokenTable:
        return TokenTable(
            roles=torch.tensor(
                [ROLE_CODES[r] for r in self.token_roles], dtype=torch.long
            ),
            blocks=torch.tensor(self.token_blocks, dtype=torch.long),
            positions=torch.tensor(self.token_coords, dtype=torch.long).reshape(-1, 2),
        )

    def indices(self: Self, role: TokenRole, block: Optional[int] = None) -> list[int]:
        """Token indices carrying a role, optionally restricted to one block."""
        return [
            i
            for i, (r, b) in enumerate(zip(self.token_roles, self.token_blocks))
            if r == role and (block is None or b == block)
        ]

    def role_of(self: Self, token: int) -> TokenRole:
        return self.token_roles[token]

    def block_of(self: Self, token: int) -> int:
        return self.token_blocks[token]


def plan_sequence(
    layout: Optional[BlockLayout], text_len: int, clean_blocks_enabled: bool
) -> SequencePlan:
    """
    Builds the token order: TEXT, BOI, CLEAN(0..l-1), NOISY(0..l-1), EOI.

    Text tokens sit at (index, 0); BOI and EOI continue that axis. Image tokens
    carry their grid (row, col). A plan without a layout is text only.
    """
    if text_len < 0:
        raise ValueError(f"text_len must be non-negative, got {text_len}")

    entries: list[PlanEntry] = []
    if text_len:
        entries.append(
            PlanEntry(
                role=TokenRole.TEXT,
                block=None,
                token_count=text_len,
                coords=tuple((i, 0) for i in range(text_len)),
            )
        )

    if layout is not None:
        entries.append(PlanEntry(TokenRole.BOI, None, 1, ((text_len, 0),)))
        roles = [TokenRole.NOISY]
        if clean_blocks_enabled:
            roles.insert(0, TokenRole.CLEAN)
        for role in roles:
            for i in range(layout.ar_length):
                entries.append(
                    PlanEntry(
                        role=role,
                        block=i,
                        token_count=layout.tokens_per_block,
                        coords=tuple(layout.patch_coords(i)),
                    )
                )
        entries.append(PlanEntry(TokenRole.EOI, None, 1, ((text_len + 1, 0),)))

    return SequencePlan(
        layout=layout,
        text_len=text_len,
        clean_blocks=clean_blocks_enabled and layout is not None,
        entries=tuple(entries),
    )
