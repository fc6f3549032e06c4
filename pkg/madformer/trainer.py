"""Deterministic training: synthetic data, AdamW, WSD schedule, EMA, checkpoint/resume."""

import hashlib
import logging
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from itertools import islice
from typing import Callable, Collection, Iterable, Iterator, Mapping, Optional, Self, TypeVar

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from madformer.backbone import ForwardBatch, MadFormer, ModelConfig
from madformer.errors import CheckpointError, NonFiniteGradient, NonFiniteLoss, ShapeMismatch
from madformer.layout import BlockLayout, blockify
from madformer.noise_schedule import ScheduleConfig
from madformer.objectives import LossReport, LossWeights, text_targets, total_loss
from madformer.ports import Checkpoint, CheckpointStore, TableSink

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "step",
    "lr",
    "total",
    "text_nll",
    "image_mse",
    "hidden_mse",
    "tower_mse",
    "grad_norm",
    "wall_ms",
]

T = TypeVar("T")


class StreamRole(IntEnum):
    DATA = 1
    TIMESTEP = 2
    NOISE = 3
    SAMPLER_NOISE = 4
    HELDOUT = 5
    HELDOUT_TIMESTEP = 6
    HELDOUT_NOISE = 7
    CLASS_MEANS = 8


def stream(seed: int, step: int, role: StreamRole, *extra: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, step, role, ...)."""
    return np.random.default_rng(np.random.SeedSequence([seed, step, int(role), *extra]))


class SyntheticSpec(BaseModel):
    """Class-conditioned correlated Gaussian textures on a latent grid."""

    model_config = ConfigDict(extra="forbid")

    grid_h: int = Field(default=8, ge=1)
    grid_w: int = Field(default=8, ge=1)
    channels: int = Field(default=4, ge=1)
    num_classes: int = Field(default=4, ge=1)
    correlation_length: float = Field(default=2.0, ge=0.0)
    noise_floor: float = Field(default=0.1, ge=0.0)
    class_separation: float = Field(default=1.0, ge=0.0)
    signal_scale: float = Field(default=1.0, ge=0.0)
    dataset_seed: int = Field(default=1234, ge=0)
    # text-only batches carry no image; each sequence counts up from its class id
    text_only: bool = False
    text_len: int = Field(default=4, ge=1)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid_h, self.grid_w, self.channels

    @property
    def ar_coefficient(self) -> float:
        if self.correlation_length == 0:
            return 0.0
        return math.exp(-1.0 / self.correlation_length)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(default=200, ge=1)
    batch_size: int = Field(default=16, ge=1)
    peak_lr: float = Field(default=3e-4, ge=0.0)
    weight_decay: float = Field(default=5e-2, ge=0.0)
    warmup_frac: float = Field(default=0.1, ge=0.0, le=1.0)
    decay_frac: float = Field(default=0.1, ge=0.0, le=1.0)
    ema_decay: float = Field(default=0.9999, ge=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0)
    grad_clip: float = Field(default=1.0, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.95, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    checkpoint_every: int = Field(default=50, ge=1)
    prefetch: int = Field(default=2, ge=0)
    log_every: int = Field(default=10, ge=1)
    record_wall_time: bool = False

    @model_validator(mode="after")
    def _check_fractions(self) -> Self:
        if self.warmup_frac + self.decay_frac > 1.0:
            raise ValueError(
                f"warmup_frac + decay_frac = {self.warmup_frac + self.decay_frac} exceeds 1"
            )
        return self


# Data


@dataclass(frozen=True)
class SyntheticBatch:
    text_ids: np.ndarray
    grids: np.ndarray


def class_means(spec: SyntheticSpec) -> np.ndarray:
    """(num_classes, H, W, C) per-class mean patterns, fixed by the dataset seed."""
    rng = stream(spec.dataset_seed, 0, StreamRole.CLASS_MEANS)
    return spec.class_separation * rng.standard_normal((spec.num_classes, *spec.shape))


def correlated_field(rng: np.random.Generator, shape: tuple[int, ...], a: float) -> np.ndarray:
    """
    Unit-variance separable AR(1) field over (..., H, W, C), causal in raster order.

    Each row is filtered left to right, then the rows are filtered top to
    bottom, so every patch depends on the patches above and to its left.
    """
    innovation = math.sqrt(1.0 - a * a)
    white = rng.standard_normal(shape)
    rows = white.copy()
    for w in range(1, shape[-2]):
        rows[..., w, :] = a * rows[..., w - 1, :] + innovation * white[..., w, :]
    out = rows.copy()
    for h in range(1, shape[-3]):
        out[..., h, :, :] = a * out[..., h - 1, :, :] + innovation * rows[..., h, :, :]
    return out


def generate_batch(
    spec: SyntheticSpec,
    seed: int,
    step: int,
    batch_size: int,
    role: StreamRole = StreamRole.DATA,
) -> SyntheticBatch:
    """Deterministic in (seed, step, role); the class id is the one-token prompt."""
    rng = stream(seed, step, role)
    labels = rng.integers(0, spec.num_classes, size=batch_size)
    texture = correlated_field(rng, (batch_size, *spec.shape), spec.ar_coefficient)
    floor = rng.standard_normal((batch_size, *spec.shape))
    grids = (
        class_means(spec)[labels]
        + spec.signal_scale * texture
        + spec.noise_floor * floor
    )
    return SyntheticBatch(text_ids=labels.reshape(batch_size, 1).astype(np.int64), grids=grids)


def text_batch(spec: SyntheticSpec, seed: int, step: int, batch_size: int) -> ForwardBatch:
    """Text-only sequences c, c+1, ... modulo num_classes, starting at a random class c."""
    labels = stream(seed, step, StreamRole.DATA).integers(0, spec.num_classes, size=batch_size)
    ids = (labels[:, None] + np.arange(spec.text_len)[None, :]) % spec.num_classes
    return ForwardBatch(text_ids=torch.from_numpy(ids.astype(np.int64)))


def diffusion_inputs(
    seed: int,
    step: int,
    shape: tuple[int, int, int, int],
    train_steps: int,
    heldout: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-block timesteps uniform in [1, T] and Gaussian noise for (B, l, tokens, C)."""
    t_role = StreamRole.HELDOUT_TIMESTEP if heldout else StreamRole.TIMESTEP
    eps_role = StreamRole.HELDOUT_NOISE if heldout else StreamRole.NOISE
    t = stream(seed, step, t_role).integers(1, train_steps + 1, size=shape[:2])
    eps = stream(seed, step, eps_role).standard_normal(shape)
    return t.astype(np.int64), eps


def forward_batch(
    spec: SyntheticSpec,
    seed: int,
    step: int,
    batch_size: int,
    layout: BlockLayout,
    train_steps: int,
    dtype: torch.dtype = torch.float32,
    heldout: bool = False,
) -> ForwardBatch:
    role = StreamRole.HELDOUT if heldout else StreamRole.DATA
    data = generate_batch(spec, seed, step, batch_size, role)
    latents = blockify(torch.from_numpy(data.grids).to(dtype), layout)
    t, eps = diffusion_inputs(seed, step, tuple(latents.shape), train_steps, heldout)
    return ForwardBatch(
        text_ids=torch.from_numpy(data.text_ids),
        latents=latents,
        t=torch.from_numpy(t),
        eps=torch.from_numpy(eps).to(dtype),
    )


def prefetch(make: Callable[[int], T], steps: Iterable[int], capacity: int) -> Iterator[T]:
    """Produces make(step) ahead of the consumer, at most `capacity` in flight."""
    if capacity < 1:
        yield from map(make, steps)
        return

    remaining = iter(steps)
    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="prefetch") as pool:
        pending = deque(pool.submit(make, s) for s in islice(remaining, capacity))
        while pending:
            result = pending.popleft().result()
            following = next(remaining, None)
            if following is not None:
                pending.append(pool.submit(make, following))
            yield result


# Optimisation


def wsd_lr(step: int, total: int, peak: float, warmup_frac: float, decay_frac: float) -> float:
    """Warmup-stable-decay: linear 0 -> peak, flat, linear peak -> 0 over the last decay_frac."""
    warmup = warmup_frac * total
    decay = decay_frac * total
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    decay_start = total - decay
    if decay > 0 and step > decay_start:
        return peak * (total - step) / decay
    return peak


def ema_update(
    ema_params: Mapping[str, torch.Tensor],
    params: Mapping[str, torch.Tensor],
    decay: float,
) -> Mapping[str, torch.Tensor]:
    """ema <- decay * ema + (1 - decay) * param, in place."""
    if ema_params.keys() != params.keys():
        raise ShapeMismatch(
            f"parameter tables differ: {sorted(set(ema_params) ^ set(params))}"
        )
    with torch.no_grad():
        for name, average in ema_params.items():
            value = params[name]
            if average.shape != value.shape:
                raise ShapeMismatch(
                    f"{name}: ema {tuple(average.shape)} vs param {tuple(value.shape)}"
                )
            average.lerp_(value.detach().to(average.dtype), 1.0 - decay)
    return ema_params


@dataclass
class AdamMoments:
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]

    @classmethod
    def zeros_like(cls, params: Mapping[str, torch.Tensor]) -> Self:
        return cls(
            exp_avg={n: torch.zeros_like(p) for n, p in params.items()},
            exp_avg_sq={n: torch.zeros_like(p) for n, p in params.items()},
        )


def adamw_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    moments: AdamMoments,
    step: int,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = 1e-8,
    no_decay: Collection[str] = (),
) -> None:
    """
    Bias-corrected adaptive update with decoupled weight decay, in place.

    Parameters without a gradient are left alone. Names in `no_decay` skip
    the weight decay.

    Raises:
        NonFiniteGradient: If any gradient holds inf or nan; nothing is updated
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    for name, grad in grads.items():
        if not torch.isfinite(grad).all():
            raise NonFiniteGradient(f"gradient of {name} is not finite at step {step}")

    beta1, beta2 = betas
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    with torch.no_grad():
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            m = moments.exp_avg[name]
            v = moments.exp_avg_sq[name]
            if weight_decay and name not in no_decay:
                param.mul_(1.0 - lr * weight_decay)
            m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
            denom = (v / correction2).sqrt_().add_(eps)
            param.addcdiv_(m, denom, value=-lr / correction1)


# Training loop


def run_digest(*configs: BaseModel) -> str:
    digest = hashlib.sha256()
    for config in configs:
        digest.update(type(config).__name__.encode())
        digest.update(config.model_dump_json().encode())
    return digest.hexdigest()


def _copy(tensors: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {n: t.detach().clone() for n, t in tensors.items()}


def build_model(
    config: ModelConfig, tensors: Optional[Mapping[str, torch.Tensor]] = None, seed: int = 0
) -> MadFormer:
    model = MadFormer(config, seed=seed)
    if tensors is not None:
        model.load_state_dict(dict(tensors), strict=True)
    return model


@dataclass
class TrainState:
    step: int
    model: MadFormer
    ema: dict[str, torch.Tensor]
    moments: AdamMoments
    last_loss: Optional[float] = None

    def ema_model(self: Self) -> MadFormer:
        return build_model(self.model.config, self.ema)


@dataclass
class TrainResult:
    state: TrainState
    history: list[dict[str, float]] = field(default_factory=list)


@dataclass
class Trainer:
    """Runs the training loop; checkpoint store and metrics sink are optional."""

    model_config: ModelConfig
    train_config: TrainConfig
    data: SyntheticSpec
    loss_weights: LossWeights = field(default_factory=LossWeights)
    schedule_config: ScheduleConfig = field(default_factory=ScheduleConfig)
    checkpoints: Optional[CheckpointStore] = None
    metrics: Optional[TableSink] = None

    def __post_init__(self):
        self.schedule = self.schedule_config.build()
        self.layout = self.model_config.layout
        self.digest = run_digest(
            self.model_config,
            self.train_config,
            self.data,
            self.loss_weights,
            self.schedule_config,
        )

    def init_state(self: Self) -> TrainState:
        model = MadFormer(self.model_config, seed=self.train_config.seed)
        params = dict(model.named_parameters())
        return TrainState(
            step=0,
            model=model,
            ema={n: p.detach().clone() for n, p in params.items()},
            moments=AdamMoments.zeros_like({n: p.detach() for n, p in params.items()}),
        )

    def to_checkpoint(self: Self, state: TrainState) -> Checkpoint:
        return Checkpoint(
            step=state.step,
            config_digest=self.digest,
            metadata={
                "model": self.model_config.model_dump(mode="json"),
                "train": self.train_config.model_dump(mode="json"),
                "last_loss": state.last_loss,
            },
            tensors={
                "params": _copy(state.model.state_dict()),
                "ema": _copy(state.ema),
                "exp_avg": _copy(state.moments.exp_avg),
                "exp_avg_sq": _copy(state.moments.exp_avg_sq),
            },
        )

    def from_checkpoint(self: Self, checkpoint: Checkpoint) -> TrainState:
        if checkpoint.config_digest != self.digest:
            raise CheckpointError(
                f"checkpoint at step {checkpoint.step} was written by a different configuration"
            )
        model = build_model(self.model_config, checkpoint.tensors["params"])
        return TrainState(
            step=checkpoint.step,
            model=model,
            ema=_copy(checkpoint.tensors["ema"]),
            moments=AdamMoments(
                exp_avg=_copy(checkpoint.tensors["exp_avg"]),
                exp_avg_sq=_copy(checkpoint.tensors["exp_avg_sq"]),
            ),
            last_loss=checkpoint.metadata.get("last_loss"),
        )

    def _resume_state(self: Self, resume: bool) -> TrainState:
        """A fresh start drops every earlier step-* checkpoint from the store."""
        if self.checkpoints is None:
            return self.init_state()
        if resume:
            label = self.checkpoints.latest()
            if label is not None:
                logger.info("resuming from checkpoint %s", label)
                return self.from_checkpoint(self.checkpoints.load(label))
            return self.init_state()
        stale = [label for label in self.checkpoints.labels() if label.startswith("step-")]
        for label in stale:
            self.checkpoints.delete(label)
        if stale:
            logger.info("fresh run: removed %d earlier checkpoints", len(stale))
        return self.init_state()

    def _batch(self: Self, step: int) -> ForwardBatch:
        if self.data.text_only:
            return text_batch(
                self.data, self.train_config.seed, step, self.train_config.batch_size
            )
        return forward_batch(
            self.data,
            self.train_config.seed,
            step,
            self.train_config.batch_size,
            self.layout,
            self.schedule.T,
        )

    def compute_loss(self: Self, model: MadFormer, batch: ForwardBatch) -> LossReport:
        out = model.full_forward(batch, self.schedule)
        targets = text_targets(out.plan, batch.text_ids, self.model_config.text_vocab)
        z_image = batch.latents if batch.latents is not None else out.z_hat.detach()
        return total_loss(
            out.text_logits,
            targets,
            out.z_hat,
            z_image,
            out.z_cond,
            out.z_clean,
            self.loss_weights,
            clean_blocks_enabled=self.model_config.clean_blocks,
            condition_enabled=self.model_config.use_condition and out.plan.has_image,
        )

    def _save(self: Self, label: str, state: TrainState) -> None:
        if self.checkpoints is not None:
            self.checkpoints.save(label, self.to_checkpoint(state))

    def step(self: Self, state: TrainState, batch: ForwardBatch) -> dict[str, float]:
        """
        One optimisation step; returns the metrics row.

        A non-finite gradient skips the update: parameters, moments and EMA are
        left as they were, but the batch is consumed and the step counter
        advances. The row keeps the non-finite grad_norm.
        """
        config = self.train_config
        step = state.step + 1
        started = time.perf_counter()
        lr = wsd_lr(step, config.steps, config.peak_lr, config.warmup_frac, config.decay_frac)

        model = state.model
        model.zero_grad(set_to_none=True)
        report = self.compute_loss(model, batch)
        if not torch.isfinite(report.total):
            label = f"nonfinite-step-{step:06d}"
            self._save(label, state)
            raise NonFiniteLoss(
                f"loss is {report.total.item()} at step {step}; state saved as {label}"
            )

        report.total.backward()
        params = dict(model.named_parameters())
        grad_norm = float(
            torch.nn.utils.clip_grad_norm_(
                [p for p in params.values() if p.grad is not None], config.grad_clip
            )
        )
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        try:
            adamw_step(
                params,
                grads,
                state.moments,
                step,
                lr,
                config.weight_decay,
                betas=(config.beta1, config.beta2),
                eps=config.adam_eps,
                no_decay={n for n, p in params.items() if p.ndim < 2},
            )
            ema_update(state.ema, params, config.ema_decay)
        except NonFiniteGradient as e:
            logger.warning("step=%d update skipped, batch consumed: %s", step, e)
        state.step = step

        row = {"step": step, "lr": lr, **report.as_row(), "grad_norm": grad_norm}
        state.last_loss = row["total"]
        row["wall_ms"] = (
            round((time.perf_counter() - started) * 1000.0, 3) if config.record_wall_time else ""
        )
        return row

    def train(self: Self, stop_at: Optional[int] = None, resume: bool = True) -> TrainResult:
        """
        Trains up to `stop_at` (default: the configured step count).

        A matching checkpoint in the store is resumed from, and the metrics
        table is cut back to that step, so an interrupted run continues on
        the same trajectory.
        """
        config = self.train_config
        state = self._resume_state(resume)
        end = config.steps if stop_at is None else min(stop_at, config.steps)

        if self.metrics is not None:
            self.metrics.begin(METRIC_COLUMNS, keep_through=state.step)
        history = []
        try:
            batches = prefetch(self._batch, range(state.step + 1, end + 1), config.prefetch)
            for batch in batches:
                row = self.step(state, batch)
                history.append(row)
                if self.metrics is not None:
                    self.metrics.append(row)
                if state.step % config.log_every == 0 or state.step == end:
                    logger.info(
                        "step=%d lr=%.3e total=%.4f image_mse=%.4f text_nll=%.4f",
                        state.step,
                        row["lr"],
                        row["total"],
                        row["image_mse"],
                        row["text_nll"],
                    )
                if state.step % config.checkpoint_every == 0 or state.step == end:
                    self._save(f"step-{state.step:06d}", state)
        finally:
            if self.metrics is not None:
                self.metrics.close()
        return TrainResult(state=state, history=history)
