import abc
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Self

from madformer.ablation import AblationGrid, run_ablation
from madformer.attention_mask import MaskMode
from madformer.backbone import MadFormer, TowerMode
from madformer.config import RunConfig
from madformer.errors import (
    CacheInvalidation,
    CheckpointError,
    ConfigError,
    DimensionMismatch,
    EmptySupervision,
    InvalidCount,
    InvalidRange,
    MadformerError,
    NonConvergedSqrt,
    NonDivisibleGrid,
    NonFiniteGradient,
    NonFiniteLoss,
    NotFoundError,
    ShapeMismatch,
    TimestepOrder,
    TimestepOutOfRange,
)
from madformer.evaluation import EvalReport, evaluate_models
from madformer.layout import plan_sequence
from madformer.ports import Checkpoint, CheckpointStore, SampleStore, TableSink
from madformer.sampler import BlockDenoiser, GenerationResult, sample_batches, sample_model
from madformer.trainer import TrainResult, TrainState, Trainer

logger = logging.getLogger(__name__)

__all__ = [
    "AblationGrid",
    "CacheInvalidation",
    "Checkpoint",
    "CheckpointError",
    "CheckpointStore",
    "ConfigError",
    "ConfigSource",
    "DimensionMismatch",
    "EmptySupervision",
    "InvalidCount",
    "InvalidRange",
    "MadformerError",
    "MadformerRunner",
    "MaskMode",
    "NonConvergedSqrt",
    "NonDivisibleGrid",
    "NonFiniteGradient",
    "NonFiniteLoss",
    "NotFoundError",
    "RunConfig",
    "SampleResult",
    "SampleStore",
    "ShapeMismatch",
    "TableSink",
    "TimestepOrder",
    "TimestepOutOfRange",
    "TowerMode",
]


class ConfigSource(abc.ABC):
    """Port for reading run configurations and ablation grids."""

    @abc.abstractmethod
    def load_config(self: Self, path: Optional[Path]) -> RunConfig:
        """Read a run configuration; None gives the defaults.

        Raises:
            ConfigError: If the file cannot be parsed, has unknown keys or
                holds values that fail validation
        """
        pass

    @abc.abstractmethod
    def load_grid(self: Self, path: Optional[Path], n_layers: int) -> AblationGrid:
        """Read an ablation grid; None gives the published axes for n_layers.

        Raises:
            ConfigError: If the file is invalid
        """
        pass


@dataclass
class SampleResult:
    generation: GenerationResult
    samples_path: Path
    preview_path: Path


@dataclass
class MadformerRunner:
    """Runs training, sampling, evaluation and sweeps against injected storage."""

    checkpoints: CheckpointStore
    metrics: TableSink
    samples: SampleStore
    results: TableSink
    cell_checkpoints: Optional[Callable[[str], CheckpointStore]] = None

    def trainer(self: Self, config: RunConfig) -> Trainer:
        return Trainer(
            model_config=config.model,
            train_config=config.train,
            data=config.data,
            loss_weights=config.loss,
            schedule_config=config.schedule,
            checkpoints=self.checkpoints,
            metrics=self.metrics,
        )

    def train(
        self: Self, config: RunConfig, stop_at: Optional[int] = None, resume: bool = True
    ) -> TrainResult:
        return self.trainer(config).train(stop_at=stop_at, resume=resume)

    def checkpoint_states(
        self: Self, config: RunConfig, count: int
    ) -> tuple[list[str], list[TrainState]]:
        """The last `count` training checkpoints, oldest first.

        Raises:
            NotFoundError: If no training checkpoint exists
            CheckpointError: If a checkpoint belongs to another configuration
        """
        labels = sorted(
            label for label in self.checkpoints.labels() if label.startswith("step-")
        )
        if not labels:
            raise NotFoundError("no training checkpoints found; run `madformer train` first")
        trainer = self.trainer(config)
        chosen = labels[-count:]
        return chosen, [trainer.from_checkpoint(self.checkpoints.load(label)) for label in chosen]

    def load_model(self: Self, config: RunConfig) -> MadFormer:
        _, (state,) = self.checkpoint_states(config, 1)
        return state.ema_model() if config.sampler.use_ema else state.model

    def sample(
        self: Self,
        config: RunConfig,
        name: str = "samples",
        denoiser: Optional[Callable[[], BlockDenoiser]] = None,
    ) -> SampleResult:
        """
        Generates config.sampler.num_samples grids from the latest checkpoint,
        or from `denoiser` when one is given, and stores them.
        """
        schedule = config.schedule.build()
        if denoiser is None:
            generation = sample_model(
                self.load_model(config), config.sampler, schedule, config.data.num_classes
            )
        else:
            model = config.model
            clean = config.sampler.clean_blocks
            generation = sample_batches(
                denoiser,
                plan_sequence(model.layout, 1, model.clean_blocks if clean is None else clean),
                config.sampler,
                schedule,
                config.data.num_classes,
                model.n_layers,
                model.diffusion_depth,
            )
        ledger = generation.ledger
        logger.info(
            "samples=%d block_passes=%d denoise_passes=%d layer_weighted_nfe=%s",
            generation.grids.shape[0],
            ledger.block_passes,
            ledger.denoise_passes,
            ledger.layer_weighted_exact,
        )
        return SampleResult(
            generation=generation,
            samples_path=self.samples.save_samples(name, generation.grids),
            preview_path=self.samples.save_preview(name, generation.grids),
        )

    def evaluate(self: Self, config: RunConfig) -> EvalReport:
        """Scores the last config.eval.checkpoints checkpoints against held-out data."""
        labels, states = self.checkpoint_states(config, config.eval.checkpoints)
        use_ema = config.sampler.use_ema
        return evaluate_models(
            [state.ema_model() if use_ema else state.model for state in states],
            MadFormer(config.model, seed=config.train.seed),
            config.data,
            config.sampler,
            config.schedule.build(),
            config.eval,
            seed=config.train.seed,
            labels=labels,
        )

    def ablate(
        self: Self, grid: AblationGrid, config: RunConfig, workers: int = 1
    ) -> list[dict[str, Any]]:
        return run_ablation(grid, config, self.results, self.cell_checkpoints, workers)
