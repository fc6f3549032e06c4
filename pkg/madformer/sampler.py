"""Block-autoregressive generation with per-block DDIM loops and NFE accounting."""

import abc
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Self

import numpy as np
import torch
from pydantic import AliasChoices, BaseModel, ConfigDict, Field

from madformer.backbone import Condition, KeyValue, LayerContext, MadFormer
from madformer.errors import CacheInvalidation, ShapeMismatch
from madformer.layout import SequencePlan, TokenRole, unblockify
from madformer.noise_schedule import NoiseSchedule, ddim_step, spacing, transitions
from madformer.trainer import StreamRole, stream

logger = logging.getLogger(__name__)

# Generated blocks re-enter the conditioning stage as noisy tokens at this
# timestep when clean blocks are disabled.
_FEEDBACK_TIMESTEP = 1


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    num_inference_steps: int = Field(
        default=25, ge=1, validation_alias=AliasChoices("num_inference_steps", "steps")
    )
    use_ema: bool = True
    seed: int = Field(default=0, ge=0)
    num_samples: int = Field(default=16, ge=1)
    batch_size: int = Field(default=64, ge=1)
    clean_blocks: Optional[bool] = None
    use_condition: Optional[bool] = None


@dataclass
class NfeLedger:
    n_layers: int
    diffusion_depth: int
    block_passes: int = 0
    denoise_passes: int = 0

    @property
    def layer_weighted_exact(self) -> Fraction:
        return Fraction(
            self.block_passes * (self.n_layers - self.diffusion_depth)
            + self.denoise_passes * self.diffusion_depth,
            self.n_layers,
        )

    @property
    def layer_weighted(self) -> float:
        return float(self.layer_weighted_exact)

    @property
    def raw_passes(self) -> int:
        return self.block_passes + self.denoise_passes


def steps_for_budget(budget: float, n_layers: int, diffusion_depth: int, ar_length: int) -> int:
    """Largest per-block step count whose layer-weighted NFE fits the budget; 0 if none."""
    per_block = Fraction(budget) * n_layers / ar_length - (n_layers - diffusion_depth)
    return max(int(per_block // diffusion_depth), 0)


@dataclass
class GenerationResult:
    grids: torch.Tensor
    ledger: NfeLedger


class BlockDenoiser(abc.ABC):
    """What the block-autoregressive loop needs from a model."""

    @property
    @abc.abstractmethod
    def channels(self: Self) -> int:
        pass

    @abc.abstractmethod
    def start(self: Self, prompt: torch.Tensor) -> None:
        """Process the prompt; prepares the condition for block 0."""
        pass

    @abc.abstractmethod
    def prepare(self: Self, block_index: int) -> None:
        """Make Condition(block_index) available for denoising."""
        pass

    @abc.abstractmethod
    def denoise(self: Self, x_t: torch.Tensor, t: int, block_index: int) -> torch.Tensor:
        """Predict the clean latent of a block from its noisy version."""
        pass

    @abc.abstractmethod
    def commit(self: Self, block_index: int, latent: torch.Tensor) -> None:
        """Feed a finished block back as context for later blocks."""
        pass


class ConditionCache:
    """
    Incremental conditioning-stage state for one batch of prompts.

    Keeps every layer's keys and values for the prompt and committed blocks,
    and the condition each commit produces for the following block.
    """

    def __init__(
        self,
        model: MadFormer,
        plan: SequencePlan,
        prompt: torch.Tensor,
        use_condition: Optional[bool] = None,
    ):
        self.model = model
        self.plan = plan
        self.mask = model.mask(plan)
        self.use_condition = (
            model.config.use_condition if use_condition is None else use_condition
        )
        self.batch = prompt.shape[0]
        self._indices: list[int] = []
        self._layers: list[Optional[KeyValue]] = [None] * model.config.n_layers
        self._prefix_tokens = 0
        self._conditions: dict[int, torch.Tensor] = {}
        self._committed = 0

        prefix = plan.indices(TokenRole.TEXT) + plan.indices(TokenRole.BOI)
        h0 = torch.cat(
            [model.embed_text(prompt), model.embed_delimiter(self.batch, TokenRole.BOI)], dim=1
        )
        h_ar = self._run(prefix, h0, keep=True)
        self._prefix_tokens = len(prefix)
        self._conditions[0] = self._read(h_ar[:, -1:].expand(-1, self.tokens_per_block, -1))

    @property
    def tokens_per_block(self) -> int:
        return self.plan.layout.tokens_per_block

    @property
    def committed(self) -> int:
        return self._committed

    def context(self: Self) -> LayerContext:
        return LayerContext(indices=tuple(self._indices), layers=tuple(self._layers))

    def _read(self: Self, h_ar: torch.Tensor) -> torch.Tensor:
        if not self.use_condition or self.model.config.ar_depth == 0:
            return torch.zeros_like(h_ar)
        return h_ar

    def _run(self: Self, indices: list[int], h0: torch.Tensor, keep: bool) -> torch.Tensor:
        """Runs tokens through the model; returns their conditioning-stage states."""
        model = self.model
        span = model.span(self.plan, indices)
        allowed = self.mask.select(indices, self._indices + indices)
        context = self.context() if self._indices else None
        ar_depth = model.config.ar_depth

        h_ar, produced = model.run_layers(h0, span, allowed, range(0, ar_depth), context)
        if keep:
            _, rest = model.run_layers(
                h_ar, span, allowed, range(ar_depth, model.config.n_layers), context
            )
            produced = produced + rest
            for layer, own in enumerate(produced):
                past = self._layers[layer]
                self._layers[layer] = own if past is None else past.concat(own)
            self._indices.extend(indices)
        return h_ar

    def append(self: Self, block_index: int, latent: torch.Tensor) -> None:
        """
        Commits the next block and computes the condition for the one after it.

        Raises:
            CacheInvalidation: If blocks are not appended in order
        """
        if block_index != self._committed:
            raise CacheInvalidation(
                f"expected block {self._committed} next, got block {block_index}"
            )
        expected = (self.batch, self.tokens_per_block, self.model.config.latent_channels)
        if tuple(latent.shape) != expected:
            raise ShapeMismatch(f"block latent must be {expected}, got {tuple(latent.shape)}")

        if self.plan.clean_blocks:
            indices = self.plan.indices(TokenRole.CLEAN, block_index)
            h_ar = self._run(indices, self.model.embed_latents(latent), keep=True)
        else:
            indices = self.plan.indices(TokenRole.NOISY, block_index)
            t = torch.full((self.batch,), _FEEDBACK_TIMESTEP, dtype=torch.long)
            h_ar = self._run(indices, self.model.embed_noisy(latent, t), keep=False)

        self._committed += 1
        if block_index + 1 < self.plan.ar_length:
            self._conditions[block_index + 1] = self._read(h_ar)

    def condition(self: Self, block_index: int) -> Condition:
        """
        Raises:
            CacheInvalidation: If a block before `block_index` has not been committed
        """
        if block_index > self._committed or block_index not in self._conditions:
            raise CacheInvalidation(
                f"condition for block {block_index} needs blocks 0..{block_index - 1}; "
                f"{self._committed} committed"
            )
        return Condition(values=self._conditions[block_index], block_index=block_index)

    def edit_block(self: Self, block_index: int, latent: torch.Tensor) -> None:
        """Replaces a committed block; every later block is dropped from the cache."""
        if block_index > self._committed:
            raise CacheInvalidation(
                f"cannot edit block {block_index}; only {self._committed} committed"
            )
        if self.plan.clean_blocks:
            keep = self._prefix_tokens + block_index * self.tokens_per_block
            self._indices = self._indices[:keep]
            self._layers = [kv.truncate(keep) for kv in self._layers]
        self._conditions = {
            i: c for i, c in self._conditions.items() if i <= block_index
        }
        self._committed = block_index
        self.append(block_index, latent)


def recompute_conditions(
    model: MadFormer,
    plan: SequencePlan,
    prompt: torch.Tensor,
    blocks: torch.Tensor,
) -> list[Condition]:
    """Conditions for every block from one teacher-forced pass over (B, l, tokens, C) blocks."""
    t = torch.full(blocks.shape[:2], _FEEDBACK_TIMESTEP, dtype=torch.long)
    clean = blocks if plan.clean_blocks else None
    h0 = model.embed_inputs(plan, prompt, clean, blocks, t)
    return model.ar_condition(h0, plan, model.mask(plan))


class ModelBlockDenoiser(BlockDenoiser):
    def __init__(
        self,
        model: MadFormer,
        clean_blocks: Optional[bool] = None,
        use_condition: Optional[bool] = None,
    ):
        self.model = model
        self.clean_blocks = clean_blocks
        self.use_condition = use_condition
        self.cache: Optional[ConditionCache] = None
        self._condition: Optional[Condition] = None

    @property
    def channels(self: Self) -> int:
        return self.model.config.latent_channels

    def start(self: Self, prompt: torch.Tensor) -> None:
        plan = self.model.plan(prompt.shape[1], self.clean_blocks)
        self.cache = ConditionCache(self.model, plan, prompt, self.use_condition)

    def prepare(self: Self, block_index: int) -> None:
        self._condition = self.cache.condition(block_index)

    def denoise(self: Self, x_t: torch.Tensor, t: int, block_index: int) -> torch.Tensor:
        cache = self.cache
        return self.model.denoise_forward(
            x_t, t, self._condition, cache.plan, cache.mask, cache.context()
        )

    def commit(self: Self, block_index: int, latent: torch.Tensor) -> None:
        self.cache.append(block_index, latent)


def initial_noise(
    seed: int, block_index: int, sample_offset: int, shape: tuple[int, int, int]
) -> torch.Tensor:
    """Standard Gaussian start for one block, one counter stream per (sample, block)."""
    count, tokens, channels = shape
    rows = [
        stream(seed, sample_offset + j, StreamRole.SAMPLER_NOISE, block_index).standard_normal(
            (tokens, channels)
        )
        for j in range(count)
    ]
    return torch.from_numpy(np.stack(rows)) if rows else torch.zeros(shape, dtype=torch.float64)


def generate(
    denoiser: BlockDenoiser,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    plan: SequencePlan,
    prompt: torch.Tensor,
    n_layers: int,
    diffusion_depth: int,
    sample_offset: int = 0,
    dtype: torch.dtype = torch.float32,
) -> GenerationResult:
    """
    Generates one grid per prompt row, block by block.

    For each block: one conditioning-stage pass, a DDIM loop from pure
    noise over spacing(T, steps), then the result is committed as context.
    """
    layout = plan.layout
    count = prompt.shape[0]
    shape = (count, layout.tokens_per_block, denoiser.channels)
    ledger = NfeLedger(n_layers=n_layers, diffusion_depth=diffusion_depth)
    steps = transitions(spacing(schedule.T, config.num_inference_steps))

    blocks = []
    with torch.no_grad():
        denoiser.start(prompt)
        for i in range(layout.ar_length):
            denoiser.prepare(i)
            ledger.block_passes += 1
            x = initial_noise(config.seed, i, sample_offset, shape).to(dtype)
            for t, t_prev in steps:
                x0_hat = denoiser.denoise(x, t, i)
                ledger.denoise_passes += 1
                x = ddim_step(x, x0_hat, t, t_prev, schedule)
            blocks.append(x)
            if i + 1 < layout.ar_length:
                denoiser.commit(i, x)
            logger.debug("block=%d done after %d denoise passes", i, len(steps))

    grids = unblockify(torch.stack(blocks, dim=1), layout)
    return GenerationResult(grids=grids, ledger=ledger)


def prompts_for(num_samples: int, num_classes: int, offset: int = 0) -> torch.Tensor:
    """One-token class prompts cycling through the classes."""
    labels = (torch.arange(num_samples) + offset) % num_classes
    return labels.reshape(num_samples, 1).to(torch.long)


def sample_batches(
    make_denoiser: Callable[[], BlockDenoiser],
    plan: SequencePlan,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    num_classes: int,
    n_layers: int,
    diffusion_depth: int,
    dtype: torch.dtype = torch.float32,
) -> GenerationResult:
    """Generates config.num_samples grids in batches; the ledger is per sample."""
    chunks = []
    ledger = NfeLedger(n_layers=n_layers, diffusion_depth=diffusion_depth)
    for offset in range(0, config.num_samples, config.batch_size):
        size = min(config.batch_size, config.num_samples - offset)
        result = generate(
            make_denoiser(),
            config,
            schedule,
            plan,
            prompts_for(size, num_classes, offset),
            n_layers,
            diffusion_depth,
            sample_offset=offset,
            dtype=dtype,
        )
        chunks.append(result.grids)
        ledger = result.ledger
    return GenerationResult(grids=torch.cat(chunks, dim=0), ledger=ledger)


def sample_model(
    model: MadFormer,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    num_classes: int,
) -> GenerationResult:
    model.eval()
    return sample_batches(
        lambda: ModelBlockDenoiser(model, config.clean_blocks, config.use_condition),
        model.plan(1, config.clean_blocks),
        config,
        schedule,
        num_classes,
        model.config.n_layers,
        model.config.diffusion_depth,
        dtype=model.dtype,
    )
