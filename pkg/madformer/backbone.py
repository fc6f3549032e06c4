"""
The unified transformer.

The first N - D decoder layers run once over the whole sequence and produce a
condition for every block; the last D layers denoise. Every layer carries
one parameter set per tower (text, clean image, noisy image) unless towers are
shared, and all towers attend over one joint sequence under the hybrid mask.
"""

import hashlib
import math
from dataclasses import dataclass
from enum import StrEnum
from typing import Iterator, Optional, Self, Sequence, Union

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

from madformer.attention_mask import AttentionMask, MaskMode, build_mask
from madformer.errors import NonDivisibleGrid, ShapeMismatch
from madformer.layout import (
    BlockLayout,
    SequencePlan,
    TokenRole,
    build_block_layout,
    delimiter_ids,
    plan_sequence,
)
from madformer.noise_schedule import NoiseSchedule, noising


class TowerMode(StrEnum):
    SHARED = "shared"
    SEPARATE = "separate"


class Tower(StrEnum):
    TEXT = "text"
    CLEAN = "clean"
    NOISE = "noise"


_TOWER_OF_ROLE = {
    TokenRole.TEXT: Tower.TEXT,
    TokenRole.BOI: Tower.TEXT,
    TokenRole.EOI: Tower.TEXT,
    TokenRole.CLEAN: Tower.CLEAN,
    TokenRole.NOISY: Tower.NOISE,
}
_TOWER_SLOT = {Tower.TEXT: 0, Tower.CLEAN: 1, Tower.NOISE: 2}


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_layers: int = Field(default=4, ge=1)
    diffusion_depth: int = Field(default=2, ge=1)
    hidden_width: int = Field(default=64, ge=4)
    n_heads: int = Field(default=4, ge=1)
    ffn_width: Optional[int] = Field(default=None, ge=1)
    latent_channels: int = Field(default=4, ge=1)
    text_vocab: int = Field(default=16, ge=3)
    towers: TowerMode = TowerMode.SEPARATE
    max_text_len: int = Field(default=4, ge=0)
    grid_h: int = Field(default=8, ge=1)
    grid_w: int = Field(default=8, ge=1)
    ar_length: int = Field(default=4, ge=1)
    clean_blocks: bool = True
    use_condition: bool = True
    mask_mode: MaskMode = MaskMode.FULL
    time_embed_dim: int = Field(default=128, ge=2)
    rope_theta: float = Field(default=10000.0, gt=1.0)
    init_std: float = Field(default=0.02, gt=0.0)
    norm_eps: float = Field(default=1e-5, gt=0.0)

    @model_validator(mode="after")
    def _check_shapes(self) -> Self:
        if self.diffusion_depth > self.n_layers:
            raise ValueError(
                f"diffusion_depth={self.diffusion_depth} exceeds n_layers={self.n_layers}"
            )
        if self.hidden_width % self.n_heads:
            raise ValueError(
                f"hidden_width={self.hidden_width} is not divisible by n_heads={self.n_heads}"
            )
        if self.head_dim % 4:
            raise ValueError(
                f"head_dim={self.head_dim} must be divisible by 4 for two-axis rotary pairs"
            )
        if self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim={self.time_embed_dim} must be even")
        try:
            build_block_layout(self.grid_h, self.grid_w, self.ar_length)
        except NonDivisibleGrid as e:
            raise ValueError(str(e)) from e
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_width // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_width or 4 * self.hidden_width

    @property
    def ar_depth(self) -> int:
        """Number of leading layers that only run in the conditioning stage."""
        return self.n_layers - self.diffusion_depth

    @property
    def layout(self) -> BlockLayout:
        return build_block_layout(self.grid_h, self.grid_w, self.ar_length)

    @property
    def n_towers(self) -> int:
        return 1 if self.towers == TowerMode.SHARED else 3


@dataclass(frozen=True)
class Condition:
    """AR-stage output for one block, shaped (B, tokens_per_block, width)."""

    values: torch.Tensor
    block_index: int


@dataclass(frozen=True)
class KeyValue:
    keys: torch.Tensor
    values: torch.Tensor

    @property
    def length(self) -> int:
        return self.keys.shape[2]

    def concat(self: Self, other: "KeyValue") -> "KeyValue":
        return KeyValue(
            keys=torch.cat([self.keys, other.keys], dim=2),
            values=torch.cat([self.values, other.values], dim=2),
        )

    def truncate(self: Self, length: int) -> "KeyValue":
        return KeyValue(keys=self.keys[:, :, :length], values=self.values[:, :, :length])


@dataclass(frozen=True)
class LayerContext:
    """Keys and values of already-processed tokens, one entry per decoder layer."""

    indices: tuple[int, ...]
    layers: tuple[KeyValue, ...]


@dataclass(frozen=True)
class TokenSpan:
    """A subset of plan tokens processed together, with their tower routing."""

    indices: tuple[int, ...]
    routes: tuple[tuple[int, torch.Tensor], ...]
    coords: torch.Tensor

    @classmethod
    def of(cls, plan: SequencePlan, indices: Sequence[int], towers: TowerMode) -> Self:
        groups: dict[int, list[int]] = {}
        for local, token in enumerate(indices):
            slot = (
                0
                if towers == TowerMode.SHARED
                else _TOWER_SLOT[_TOWER_OF_ROLE[plan.role_of(token)]]
            )
            groups.setdefault(slot, []).append(local)
        return cls(
            indices=tuple(indices),
            routes=tuple(
                (slot, torch.tensor(members, dtype=torch.long))
                for slot, members in sorted(groups.items())
            ),
            coords=plan.table.positions[list(indices)].reshape(-1, 2),
        )


@dataclass
class ForwardBatch:
    """
    Teacher-forced inputs. latents, t and eps are None for a text-only batch.

    text_ids: (B, text_len) long
    latents: (B, l, tokens_per_block, C) clean block latents
    t: (B, l) long, one timestep per block
    eps: like latents
    """

    text_ids: torch.Tensor
    latents: Optional[torch.Tensor] = None
    t: Optional[torch.Tensor] = None
    eps: Optional[torch.Tensor] = None

    @property
    def batch_size(self) -> int:
        return self.text_ids.shape[0]

    @property
    def text_len(self) -> int:
        return self.text_ids.shape[1]


@dataclass
class ForwardOutput:
    plan: SequencePlan
    hidden: torch.Tensor
    text_logits: torch.Tensor
    z_hat: torch.Tensor
    conditions: torch.Tensor
    z_cond: torch.Tensor
    z_clean: Optional[torch.Tensor]


def rope_2d(x: torch.Tensor, coords: torch.Tensor, theta: float = 10000.0) -> torch.Tensor:
    """
    Rotates interleaved pairs of the last dimension by two-axis angles.

    The first half of the pairs turns with axis 0 of `coords`, the second half
    with axis 1. Pair k of an axis uses frequency theta ** (-k / quarter).

    Args:
        x: (..., S, head_dim) with head_dim divisible by 4
        coords: (S, 2) integer positions
        theta: frequency base
    """
    head_dim = x.shape[-1]
    if head_dim % 4:
        raise ValueError(f"head_dim={head_dim} must be divisible by 4")
    quarter = head_dim // 4
    freqs = theta ** (
        -torch.arange(quarter, dtype=torch.float64, device=x.device) / quarter
    )
    angles = coords.to(device=x.device, dtype=torch.float64)[..., None] * freqs
    angles = angles.reshape(*coords.shape[:-1], 2 * quarter)
    cos, sin = angles.cos().to(x.dtype), angles.sin().to(x.dtype)

    even, odd = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return rotated.flatten(-2)


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    """Sinusoidal timestep features followed by a two-layer SiLU map."""

    def __init__(self, frequency_dim: int, width: int):
        super().__init__()
        self.frequency_dim = frequency_dim
        self.mlp = nn.Sequential(
            nn.Linear(frequency_dim, width),
            nn.SiLU(),
            nn.Linear(width, width),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        features = timestep_features(t, self.frequency_dim)
        return self.mlp(features.to(self.mlp[0].weight.dtype))


class SwiGLU(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(width, hidden, bias=False)
        self.up = nn.Linear(width, hidden, bias=False)
        self.down = nn.Linear(hidden, width, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(F.silu(self.gate(x)) * self.up(x))


class TowerBlock(nn.Module):
    """One tower's parameters for one decoder layer."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        width = config.hidden_width
        self.attn_norm = nn.RMSNorm(width, eps=config.norm_eps)
        self.q_proj = nn.Linear(width, width, bias=False)
        self.k_proj = nn.Linear(width, width, bias=False)
        self.v_proj = nn.Linear(width, width, bias=False)
        self.o_proj = nn.Linear(width, width, bias=False)
        self.ffn_norm = nn.RMSNorm(width, eps=config.norm_eps)
        self.ffn = SwiGLU(width, config.ffn_hidden)


def _scatter(
    target: torch.Tensor, routes: Sequence[tuple[int, torch.Tensor]], fn
) -> torch.Tensor:
    """Applies fn(slot, selected) per tower group and writes the results back."""
    out = None
    for slot, local in routes:
        local = local.to(target.device)
        result = fn(slot, target.index_select(1, local))
        if out is None:
            out = target.new_zeros(*target.shape[:2], result.shape[-1])
        out = out.index_copy(1, local, result)
    if out is None:
        out = target.new_zeros(target.shape)
    return out


class DecoderLayer(nn.Module):
    """Pre-norm attention + SwiGLU block with per-tower parameters."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.theta = config.rope_theta
        self.towers = nn.ModuleList([TowerBlock(config) for _ in range(config.n_towers)])

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        h: torch.Tensor,
        span: TokenSpan,
        allowed: torch.Tensor,
        past: Optional[KeyValue] = None,
    ) -> tuple[torch.Tensor, KeyValue]:
        """
        Args:
            h: (B, S, W) states of the span's tokens
            span: token routing and positions
            allowed: (S, P + S) visibility over past tokens then span tokens
            past: keys/values of P earlier tokens at this layer

        Returns:
            updated states and the span's own (rotated) keys and values
        """
        batch, length, width = h.shape

        def project(slot: int, x: torch.Tensor) -> torch.Tensor:
            block = self.towers[slot]
            normed = block.attn_norm(x)
            return torch.cat(
                [block.q_proj(normed), block.k_proj(normed), block.v_proj(normed)], dim=-1
            )

        qkv = _scatter(h, span.routes, project)
        q, k, v = (self._heads(part) for part in qkv.split(width, dim=-1))
        q = rope_2d(q, span.coords, self.theta)
        k = rope_2d(k, span.coords, self.theta)
        own = KeyValue(keys=k, values=v)
        full = own if past is None else past.concat(own)

        scores = q @ full.keys.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~allowed.to(h.device), float("-inf"))
        attended = torch.softmax(scores, dim=-1) @ full.values
        attended = attended.transpose(1, 2).reshape(batch, length, width)

        h = h + _scatter(attended, span.routes, lambda slot, x: self.towers[slot].o_proj(x))
        h = h + _scatter(
            h,
            span.routes,
            lambda slot, x: self.towers[slot].ffn(self.towers[slot].ffn_norm(x)),
        )
        return h, own


class MadFormer(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.layout = config.layout
        width = config.hidden_width

        self.text_embed = nn.Embedding(config.text_vocab, width)
        self.patch_embed = nn.Linear(config.latent_channels, width)
        self.time_embed = TimestepEmbedder(config.time_embed_dim, width)
        self.layers = nn.ModuleList([DecoderLayer(config) for _ in range(config.n_layers)])
        self.final_norms = nn.ModuleList(
            [nn.RMSNorm(width, eps=config.norm_eps) for _ in range(config.n_towers)]
        )
        self.lm_head = nn.Linear(width, config.text_vocab)
        self.image_heads = nn.ModuleList(
            [
                nn.Linear(width, config.latent_channels)
                for _ in range(1 if config.towers == TowerMode.SHARED else 2)
            ]
        )
        self._plans: dict[tuple[int, bool], SequencePlan] = {}
        self._masks: dict[tuple[SequencePlan, MaskMode], AttentionMask] = {}
        self.reset_parameters(seed)

    def reset_parameters(self: Self, seed: int) -> None:
        """Truncated-normal init at +-2 std from a private generator, safe across threads."""
        std = self.config.init_std
        generator = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.trunc_normal_(
                    module.weight, std=std, a=-2 * std, b=2 * std, generator=generator
                )
                if getattr(module, "bias", None) is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.RMSNorm):
                nn.init.ones_(module.weight)

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    @property
    def device(self) -> torch.device:
        return self.patch_embed.weight.device

    def plan(self: Self, text_len: int, clean_blocks: Optional[bool] = None) -> SequencePlan:
        clean = self.config.clean_blocks if clean_blocks is None else clean_blocks
        key = (text_len, clean)
        if key not in self._plans:
            self._plans[key] = plan_sequence(self.layout, text_len, clean)
        return self._plans[key]

    def mask(self: Self, plan: SequencePlan, mode: Optional[MaskMode] = None) -> AttentionMask:
        key = (plan, mode or self.config.mask_mode)
        if key not in self._masks:
            self._masks[key] = build_mask(*key)
        return self._masks[key]

    def span(self: Self, plan: SequencePlan, indices: Sequence[int]) -> TokenSpan:
        return TokenSpan.of(plan, indices, self.config.towers)

    # Embedding

    def embed_text(self: Self, ids: torch.Tensor) -> torch.Tensor:
        return self.text_embed(ids.to(self.device))

    def embed_delimiter(self: Self, batch: int, which: TokenRole) -> torch.Tensor:
        boi, eoi = delimiter_ids(self.config.text_vocab)
        token = boi if which == TokenRole.BOI else eoi
        return self.embed_text(torch.full((batch, 1), token, dtype=torch.long))

    def embed_latents(self: Self, latents: torch.Tensor) -> torch.Tensor:
        return self.patch_embed(latents)

    def embed_noisy(self: Self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Patch embedding plus the timestep map; t leads x_t without its last two dims."""
        return self.patch_embed(x_t) + self.time_embed(t.to(self.device)).unsqueeze(-2)

    def embed_inputs(
        self: Self,
        plan: SequencePlan,
        text_ids: torch.Tensor,
        clean_latents: Optional[torch.Tensor],
        noisy_latents: Optional[torch.Tensor],
        t: Optional[torch.Tensor],
    ) -> torch.Tensor:
        """
        Builds h_0 in plan order.

        Raises:
            ShapeMismatch: If any input disagrees with the plan
        """
        batch = text_ids.shape[0]
        if tuple(text_ids.shape) != (batch, plan.text_len):
            raise ShapeMismatch(
                f"text ids {tuple(text_ids.shape)} do not match text_len={plan.text_len}"
            )

        pieces = []
        if plan.text_len:
            pieces.append(self.embed_text(text_ids))

        if plan.has_image:
            block_shape = (
                batch,
                plan.ar_length,
                plan.layout.tokens_per_block,
                self.config.latent_channels,
            )
            if noisy_latents is None or tuple(noisy_latents.shape) != block_shape:
                raise ShapeMismatch(
                    f"noisy latents must be {block_shape}, got "
                    f"{None if noisy_latents is None else tuple(noisy_latents.shape)}"
                )
            if t is None or tuple(t.shape) != block_shape[:2]:
                raise ShapeMismatch(f"timesteps must be {block_shape[:2]}")

            pieces.append(self.embed_delimiter(batch, TokenRole.BOI))
            if plan.clean_blocks:
                if clean_latents is None or tuple(clean_latents.shape) != block_shape:
                    raise ShapeMismatch(f"clean latents must be {block_shape}")
                pieces.append(self.embed_latents(clean_latents).flatten(1, 2))
            pieces.append(self.embed_noisy(noisy_latents, t).flatten(1, 2))
            pieces.append(self.embed_delimiter(batch, TokenRole.EOI))

        if not pieces:
            return torch.zeros(
                batch, 0, self.config.hidden_width, dtype=self.dtype, device=self.device
            )
        return torch.cat(pieces, dim=1)

    # Layers

    def run_layers(
        self: Self,
        h: torch.Tensor,
        span: TokenSpan,
        allowed: torch.Tensor,
        layers: range,
        past: Optional[LayerContext] = None,
    ) -> tuple[torch.Tensor, list[KeyValue]]:
        """Runs the given layer range; returns states and each layer's new keys/values."""
        produced = []
        for index in layers:
            layer_past = None if past is None else past.layers[index]
            h, own = self.layers[index](h, span, allowed, layer_past)
            produced.append(own)
        return h, produced

    def _read_head(self: Self, tower: Tower) -> tuple[nn.Module, nn.Module]:
        if self.config.towers == TowerMode.SHARED:
            return self.final_norms[0], (
                self.lm_head if tower == Tower.TEXT else self.image_heads[0]
            )
        norm = self.final_norms[_TOWER_SLOT[tower]]
        if tower == Tower.TEXT:
            return norm, self.lm_head
        return norm, self.image_heads[0 if tower == Tower.CLEAN else 1]

    def project(self: Self, h: torch.Tensor, tower: Tower) -> torch.Tensor:
        """Proj(RMSNorm(h)) with the tower's output head."""
        norm, head = self._read_head(tower)
        return head(norm(h))

    def conditions_from(
        self: Self,
        h_ar: torch.Tensor,
        plan: SequencePlan,
        use_condition: Optional[bool] = None,
    ) -> torch.Tensor:
        """
        Reads (B, l, tokens_per_block, W) conditions from the AR-stage states.

        Block 0 takes BOI's state on every token; block i takes the states of
        block i - 1 (clean copy when present, noisy copy otherwise).
        """
        use = self.config.use_condition if use_condition is None else use_condition
        batch = h_ar.shape[0]
        tokens = plan.layout.tokens_per_block
        if not use or self.config.ar_depth == 0:
            return h_ar.new_zeros(batch, plan.ar_length, tokens, h_ar.shape[-1])

        source = TokenRole.CLEAN if plan.clean_blocks else TokenRole.NOISY
        boi = plan.indices(TokenRole.BOI)
        blocks = [h_ar[:, boi].expand(batch, tokens, h_ar.shape[-1])]
        for i in range(1, plan.ar_length):
            blocks.append(h_ar[:, plan.indices(source, i - 1)])
        return torch.stack(blocks, dim=1)

    def ar_condition(
        self: Self, h0: torch.Tensor, plan: SequencePlan, mask: AttentionMask
    ) -> list[Condition]:
        """Runs layers 1..N-D over h_0 and reads one Condition per block."""
        span = self.span(plan, range(plan.seq_len))
        h_ar, _ = self.run_layers(h0, span, mask.allowed, range(0, self.config.ar_depth))
        conditions = self.conditions_from(h_ar, plan)
        return [Condition(conditions[:, i], i) for i in range(plan.ar_length)]

    def denoise_forward(
        self: Self,
        x_t: torch.Tensor,
        t: Union[int, torch.Tensor],
        condition: Condition,
        plan: SequencePlan,
        mask: AttentionMask,
        context: Optional[LayerContext] = None,
    ) -> torch.Tensor:
        """
        Predicts the clean latent of one block.

        The block enters layer N-D as its embedded noisy latent plus the
        condition, runs the D diffusion layers attending to `context`, and
        is projected back to latent channels.

        Raises:
            ShapeMismatch: If x_t is not (B, tokens_per_block, C)
        """
        block = condition.block_index
        indices = plan.indices(TokenRole.NOISY, block)
        expected = (x_t.shape[0], len(indices), self.config.latent_channels)
        if tuple(x_t.shape) != expected or tuple(condition.values.shape[:2]) != expected[:2]:
            raise ShapeMismatch(
                f"block {block} expects latents {expected}, got {tuple(x_t.shape)} "
                f"and condition {tuple(condition.values.shape)}"
            )
        if isinstance(t, int):
            t = torch.full((x_t.shape[0],), t, dtype=torch.long)

        h = self.embed_noisy(x_t, t) + condition.values
        past_indices = list(context.indices) if context is not None else []
        allowed = mask.select(indices, past_indices + indices)
        h, _ = self.run_layers(
            h,
            self.span(plan, indices),
            allowed,
            range(self.config.ar_depth, self.config.n_layers),
            past=context,
        )
        return self.project(h, Tower.NOISE)

    def full_forward(
        self: Self,
        batch: ForwardBatch,
        schedule: Optional[NoiseSchedule] = None,
        mode: Optional[MaskMode] = None,
    ) -> ForwardOutput:
        """Single teacher-forced pass over the whole sequence with per-block timesteps."""
        image = batch.latents is not None
        if image:
            plan = self.plan(batch.text_len)
        else:
            plan = plan_sequence(None, batch.text_len, self.config.clean_blocks)
        mask = self.mask(plan, mode)
        span = self.span(plan, range(plan.seq_len))
        size = batch.batch_size
        channels = self.config.latent_channels

        noisy = None
        if image:
            if batch.t is None or batch.eps is None or schedule is None:
                raise ShapeMismatch("image batches need timesteps, noise and a schedule")
            noisy = noising(batch.latents, batch.t, batch.eps, schedule).x_t

        h0 = self.embed_inputs(plan, batch.text_ids, batch.latents, noisy, batch.t)
        h, _ = self.run_layers(h0, span, mask.allowed, range(0, self.config.ar_depth))

        if image:
            conditions = self.conditions_from(h, plan)
            noisy_idx = torch.tensor(plan.indices(TokenRole.NOISY), device=h.device)
            h = h.index_copy(
                1, noisy_idx, h0.index_select(1, noisy_idx) + conditions.flatten(1, 2)
            )
        h, _ = self.run_layers(
            h, span, mask.allowed, range(self.config.ar_depth, self.config.n_layers)
        )

        text_logits = self.project(h[:, plan.indices(TokenRole.TEXT)], Tower.TEXT)
        if not image:
            empty = h.new_zeros(size, 0, 0, channels)
            return ForwardOutput(
                plan=plan,
                hidden=h,
                text_logits=text_logits,
                z_hat=empty,
                conditions=h.new_zeros(size, 0, 0, self.config.hidden_width),
                z_cond=empty,
                z_clean=None,
            )

        block_shape = (size, plan.ar_length, plan.layout.tokens_per_block, channels)
        z_hat = self.project(h[:, plan.indices(TokenRole.NOISY)], Tower.NOISE)
        z_clean = None
        if plan.clean_blocks:
            z_clean = self.project(h[:, plan.indices(TokenRole.CLEAN)], Tower.CLEAN)
            z_clean = z_clean.reshape(block_shape)
        return ForwardOutput(
            plan=plan,
            hidden=h,
            text_logits=text_logits,
            z_hat=z_hat.reshape(block_shape),
            conditions=conditions,
            z_cond=self.project(conditions, Tower.NOISE),
            z_clean=z_clean,
        )

    # Parameters

    def tower_parameters(self: Self, tower: Tower) -> Iterator[tuple[str, nn.Parameter]]:
        """Parameters owned by one tower: its per-layer blocks, final norm and head."""
        slot = 0 if self.config.towers == TowerMode.SHARED else _TOWER_SLOT[tower]
        for index, layer in enumerate(self.layers):
            for name, param in layer.towers[slot].named_parameters():
                yield f"layers.{index}.towers.{slot}.{name}", param
        norm, head = self._read_head(tower)
        for prefix, module in (("final_norm", norm), ("head", head)):
            for name, param in module.named_parameters():
                yield f"{tower}.{prefix}.{name}", param


def parameter_checksum(module: nn.Module) -> str:
    """sha256 over every named tensor of the state dict as little-endian float32."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(
            tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        )
    return digest.hexdigest()
