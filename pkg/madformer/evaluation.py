"""Latent Fréchet distance, held-out reconstruction error and checkpoint evaluation."""

import logging
from dataclasses import dataclass, field
from typing import Any, Self, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from madformer.backbone import MadFormer
from madformer.errors import DimensionMismatch, InvalidCount, NonConvergedSqrt
from madformer.layout import blockify
from madformer.noise_schedule import NoiseSchedule
from madformer.sampler import NfeLedger, SamplerConfig, sample_model
from madformer.trainer import StreamRole, SyntheticSpec, class_means, forward_batch, generate_batch

logger = logging.getLogger(__name__)

SHRINKAGE = 1e-4
EIGENVALUE_FLOOR = -1e-8


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_samples: int = Field(default=512, ge=2)
    checkpoints: int = Field(default=3, ge=1)
    reference_count: int = Field(default=2048, ge=2)
    heldout_batches: int = Field(default=4, ge=1)
    heldout_batch_size: int = Field(default=64, ge=1)


@dataclass(frozen=True)
class FrechetStats:
    """Gaussian fit of flattened latents."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_samples(cls, samples: np.ndarray | torch.Tensor) -> Self:
        """
        Fits mean and covariance to (count, ...) samples.

        With fewer than dim + 1 samples the covariance is rank deficient, so
        it is shrunk toward its diagonal by SHRINKAGE.
        """
        if isinstance(samples, torch.Tensor):
            samples = samples.detach().cpu().numpy()
        flat = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
        count, dim = flat.shape
        if count < 2:
            raise InvalidCount(f"need at least 2 samples for a covariance, got {count}")

        mean = flat.mean(axis=0)
        cov = np.cov(flat, rowvar=False).reshape(dim, dim)
        if count < dim + 1:
            cov = (1.0 - SHRINKAGE) * cov + SHRINKAGE * np.diag(np.diag(cov))
        return cls(mean=mean, cov=(cov + cov.T) / 2.0, count=count)


def _psd_sqrt_eigenvalues(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    try:
        values, vectors = np.linalg.eigh((matrix + matrix.T) / 2.0)
    except np.linalg.LinAlgError as e:
        raise NonConvergedSqrt(f"eigendecomposition failed: {e}") from e
    scale = max(1.0, float(np.abs(values).max(initial=0.0)))
    if values.size and values.min() < EIGENVALUE_FLOOR * scale:
        raise NonConvergedSqrt(
            f"matrix is not positive semidefinite: smallest eigenvalue {values.min():.3e}"
        )
    return np.clip(values, 0.0, None), vectors


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """
    ‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½).

    The trace of the square root is taken from the eigenvalues of the
    symmetric matrix Σa^½ Σb Σa^½, which shares its spectrum with Σa Σb.

    Raises:
        DimensionMismatch: If the two fits have different dimensions
        NonConvergedSqrt: If an eigenvalue falls below the clamping floor
    """
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise DimensionMismatch(f"cannot compare dimension {a.dim} with dimension {b.dim}")

    values, vectors = _psd_sqrt_eigenvalues(a.cov)
    root_a = (vectors * np.sqrt(values)) @ vectors.T
    product, _ = _psd_sqrt_eigenvalues(root_a @ b.cov @ root_a)
    trace_sqrt = float(np.sqrt(product).sum())

    diff = a.mean - b.mean
    distance = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * trace_sqrt
    return max(distance, 0.0)


def reference_stats(spec: SyntheticSpec, seed: int, count: int) -> FrechetStats:
    """Statistics of held-out synthetic grids, never seen during training."""
    batch = generate_batch(spec, seed, 0, count, StreamRole.HELDOUT)
    return FrechetStats.from_samples(batch.grids)


@dataclass(frozen=True)
class HeldoutError:
    model_mse: float
    mean_predictor_mse: float

    @property
    def improvement(self) -> float:
        """Fraction of the mean predictor's error the model removes."""
        if self.mean_predictor_mse == 0:
            return 0.0
        return 1.0 - self.model_mse / self.mean_predictor_mse


def heldout_error(
    model: MadFormer,
    spec: SyntheticSpec,
    schedule: NoiseSchedule,
    seed: int,
    batches: int,
    batch_size: int,
) -> HeldoutError:
    """
    Clean-latent prediction error on held-out batches, against the
    unconditional predictor that always answers the data mean.
    """
    layout = model.config.layout
    mean_grid = torch.from_numpy(class_means(spec).mean(axis=0)).unsqueeze(0)
    mean_blocks = blockify(mean_grid, layout)
    model_total = 0.0
    mean_total = 0.0
    model.eval()
    with torch.no_grad():
        for step in range(1, batches + 1):
            batch = forward_batch(
                spec, seed, step, batch_size, layout, schedule.T, model.dtype, heldout=True
            )
            out = model.full_forward(batch, schedule)
            target = batch.latents
            model_total += float(torch.mean((out.z_hat - target) ** 2))
            baseline = mean_blocks.to(target.dtype)
            mean_total += float(torch.mean((baseline - target) ** 2))
    return HeldoutError(model_mse=model_total / batches, mean_predictor_mse=mean_total / batches)


def sample_frechet(
    model: MadFormer,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
    num_classes: int,
    reference: FrechetStats,
) -> tuple[float, NfeLedger]:
    result = sample_model(model, sampler, schedule, num_classes)
    return frechet_distance(FrechetStats.from_samples(result.grids), reference), result.ledger


@dataclass
class EvalReport:
    frechet: float
    frechet_per_checkpoint: list[float]
    heldout: HeldoutError
    untrained_frechet: float
    ledger: NfeLedger
    labels: list[str] = field(default_factory=list)

    def as_row(self: Self) -> dict[str, Any]:
        return {
            "frechet": self.frechet,
            "untrained_frechet": self.untrained_frechet,
            "image_mse": self.heldout.model_mse,
            "mean_predictor_mse": self.heldout.mean_predictor_mse,
            "block_passes": self.ledger.block_passes,
            "denoise_passes": self.ledger.denoise_passes,
            "layer_weighted_nfe": self.ledger.layer_weighted,
            "raw_nfe": self.ledger.raw_passes,
        }


def evaluate_models(
    models: Sequence[MadFormer],
    untrained: MadFormer,
    spec: SyntheticSpec,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
    config: EvalConfig,
    seed: int,
    labels: Sequence[str] = (),
) -> EvalReport:
    """
    Averages the sample Fréchet distance over the given checkpoints' models;
    the held-out error is taken from the last one.
    """
    if not models:
        raise InvalidCount("evaluation needs at least one model")
    reference = reference_stats(spec, seed, config.reference_count)
    sampling = sampler.model_copy(update={"num_samples": config.num_samples})

    distances = []
    ledger = None
    names = list(labels) or [str(i) for i in range(len(models))]
    for label, model in zip(names, models):
        distance, ledger = sample_frechet(model, sampling, schedule, spec.num_classes, reference)
        logger.info("checkpoint=%s frechet=%.4f", label, distance)
        distances.append(distance)

    untrained_distance, _ = sample_frechet(
        untrained, sampling, schedule, spec.num_classes, reference
    )
    heldout = heldout_error(
        models[-1], spec, schedule, seed, config.heldout_batches, config.heldout_batch_size
    )
    logger.info(
        "frechet=%.4f untrained_frechet=%.4f image_mse=%.4f mean_predictor_mse=%.4f",
        float(np.mean(distances)),
        untrained_distance,
        heldout.model_mse,
        heldout.mean_predictor_mse,
    )
    return EvalReport(
        frechet=float(np.mean(distances)),
        frechet_per_checkpoint=distances,
        heldout=heldout,
        untrained_frechet=untrained_distance,
        ledger=ledger,
        labels=list(labels),
    )
