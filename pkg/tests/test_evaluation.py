import numpy as np
import pytest
import torch

from madformer.backbone import MadFormer
from madformer.config import RunConfig
from madformer.errors import DimensionMismatch, InvalidCount, NonConvergedSqrt
from madformer.evaluation import (
    SHRINKAGE,
    EvalConfig,
    FrechetStats,
    HeldoutError,
    evaluate_models,
    frechet_distance,
    heldout_error,
    reference_stats,
)
from madformer.sampler import SamplerConfig
from madformer.trainer import Trainer


def _stats(mean, cov) -> FrechetStats:
    mean = np.asarray(mean, dtype=np.float64)
    return FrechetStats(mean=mean, cov=np.asarray(cov, dtype=np.float64), count=100)


def _random_stats(rng, dim) -> FrechetStats:
    factor = rng.standard_normal((dim, dim))
    return _stats(rng.standard_normal(dim), factor @ factor.T + 0.1 * np.eye(dim))


def test_identical_statistics_are_zero_apart():
    stats = _random_stats(np.random.default_rng(0), 6)

    assert frechet_distance(stats, stats) == pytest.approx(0.0, abs=1e-8)


def test_mean_shift_with_equal_covariance_is_squared_distance():
    cov = np.diag([1.0, 2.0, 3.0])

    distance = frechet_distance(_stats([0, 0, 0], cov), _stats([1, 2, 2], cov))

    assert distance == pytest.approx(9.0, abs=1e-9)


def test_one_dimensional_variances():
    """N(0, 1) against N(0, 4): 1 + 4 - 2 * 2."""
    assert frechet_distance(_stats([0], [[1]]), _stats([0], [[4]])) == pytest.approx(1.0)


def test_distance_is_symmetric_and_non_negative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = _random_stats(rng, 5), _random_stats(rng, 5)

        forward, backward = frechet_distance(a, b), frechet_distance(b, a)

        assert forward >= 0.0
        assert forward == pytest.approx(backward, rel=1e-8, abs=1e-8)


def test_diagonal_covariances_match_closed_form():
    var_a, var_b = np.array([1.0, 4.0]), np.array([9.0, 0.25])
    expected = float(np.sum(var_a + var_b - 2.0 * np.sqrt(var_a * var_b)))

    distance = frechet_distance(_stats([0, 0], np.diag(var_a)), _stats([0, 0], np.diag(var_b)))

    assert distance == pytest.approx(expected)


def test_dimension_mismatch_is_an_error():
    with pytest.raises(DimensionMismatch):
        frechet_distance(_stats([0, 0], np.eye(2)), _stats([0, 0, 0], np.eye(3)))


def test_indefinite_covariance_is_an_error():
    with pytest.raises(NonConvergedSqrt):
        frechet_distance(_stats([0, 0], [[1.0, 0.0], [0.0, -1.0]]), _stats([0, 0], np.eye(2)))


def test_from_samples_flattens_and_fits():
    samples = np.random.default_rng(2).standard_normal((500, 2, 3))

    stats = FrechetStats.from_samples(samples)

    assert stats.dim == 6
    assert stats.count == 500
    assert np.allclose(stats.cov, np.cov(samples.reshape(500, 6), rowvar=False))


def test_from_samples_shrinks_rank_deficient_covariance():
    samples = np.random.default_rng(3).standard_normal((4, 10))
    raw = np.cov(samples, rowvar=False)

    stats = FrechetStats.from_samples(torch.from_numpy(samples))

    off_diagonal = ~np.eye(10, dtype=bool)
    assert np.allclose(stats.cov[off_diagonal], (1.0 - SHRINKAGE) * raw[off_diagonal])
    assert np.allclose(np.diag(stats.cov), np.diag(raw))


def test_from_samples_needs_two_samples():
    with pytest.raises(InvalidCount):
        FrechetStats.from_samples(np.zeros((1, 3)))


def test_reference_stats_are_deterministic(run_config):
    first = reference_stats(run_config.data, 0, 16)
    second = reference_stats(run_config.data, 0, 16)

    assert np.array_equal(first.mean, second.mean)
    assert first.dim == 4 * 4 * 2


def test_improvement_over_the_mean_predictor():
    assert HeldoutError(model_mse=0.25, mean_predictor_mse=1.0).improvement == 0.75
    assert HeldoutError(model_mse=1.0, mean_predictor_mse=0.0).improvement == 0.0


def test_heldout_error_reports_both_predictors(run_config):
    model = MadFormer(run_config.model)

    error = heldout_error(model, run_config.data, run_config.schedule.build(), 0, 2, 4)

    assert error.model_mse > 0.0
    assert error.mean_predictor_mse > 0.0
    # an untrained model predicts roughly zero; the data mean is a better guess
    assert error.improvement < 0.5


def test_evaluate_models_averages_checkpoints(run_config):
    # Arrange
    models = [MadFormer(run_config.model, seed=s) for s in (1, 2)]
    sampler = SamplerConfig(num_inference_steps=2)

    # Act
    report = evaluate_models(
        models,
        MadFormer(run_config.model, seed=0),
        run_config.data,
        sampler,
        run_config.schedule.build(),
        EvalConfig(num_samples=6, reference_count=16, heldout_batches=1, heldout_batch_size=4),
        seed=0,
        labels=["step-000001", "step-000002"],
    )

    # Assert
    assert report.frechet == pytest.approx(np.mean(report.frechet_per_checkpoint))
    assert len(report.frechet_per_checkpoint) == 2
    assert report.ledger.block_passes == run_config.model.ar_length
    assert report.ledger.denoise_passes == 2 * run_config.model.ar_length
    row = report.as_row()
    assert set(row) == {
        "frechet",
        "untrained_frechet",
        "image_mse",
        "mean_predictor_mse",
        "block_passes",
        "denoise_passes",
        "layer_weighted_nfe",
        "raw_nfe",
    }


def test_evaluate_models_needs_a_model(run_config):
    with pytest.raises(InvalidCount):
        evaluate_models(
            [],
            MadFormer(run_config.model),
            run_config.data,
            SamplerConfig(),
            run_config.schedule.build(),
            EvalConfig(),
            seed=0,
        )


def test_briefly_trained_default_model_beats_the_baselines():
    """A short run at the default sizes improves on both the data mean and the untrained model."""
    # Arrange
    config = RunConfig.model_validate(
        {"train": {"steps": 400, "peak_lr": 1e-3, "ema_decay": 0.99, "checkpoint_every": 400}}
    )
    trainer = Trainer(
        model_config=config.model,
        train_config=config.train,
        data=config.data,
        loss_weights=config.loss,
        schedule_config=config.schedule,
    )

    # Act
    state = trainer.train().state
    report = evaluate_models(
        [state.ema_model()],
        MadFormer(config.model, seed=config.train.seed),
        config.data,
        config.sampler,
        config.schedule.build(),
        config.eval,
        seed=config.train.seed,
    )

    # Assert
    assert report.heldout.improvement >= 0.2
    assert report.frechet <= 0.5 * report.untrained_frechet
