from pathlib import Path
from unittest import mock

import pytest

from madformer.application import (
    AblationGrid,
    CheckpointStore,
    MadformerRunner,
    NotFoundError,
    SampleStore,
    TableSink,
)
from madformer.infrastructure.checkpoint_store import LocalCheckpointStore
from madformer.infrastructure.stub_handler import create_stub_denoiser
from madformer.trainer import METRIC_COLUMNS


@pytest.fixture
def checkpoints() -> CheckpointStore:
    store = mock.Mock(spec=CheckpointStore)
    store.latest.return_value = None
    store.labels.return_value = []
    return store


@pytest.fixture
def samples() -> SampleStore:
    store = mock.Mock(spec=SampleStore)
    store.save_samples.return_value = Path("samples.mads")
    store.save_preview.return_value = Path("samples.pgm")
    return store


@pytest.fixture
def runner(checkpoints, samples) -> MadformerRunner:
    return MadformerRunner(
        checkpoints=checkpoints,
        metrics=mock.Mock(spec=TableSink),
        samples=samples,
        results=mock.Mock(spec=TableSink),
    )


def test_train_checkpoints_and_logs_every_step(runner, checkpoints, run_config):
    result = runner.train(run_config)

    assert result.state.step == run_config.train.steps
    assert [c.args[0] for c in checkpoints.save.call_args_list] == ["step-000002", "step-000004"]
    runner.metrics.begin.assert_called_once_with(METRIC_COLUMNS, keep_through=0)
    assert runner.metrics.append.call_count == run_config.train.steps


def test_no_checkpoints_is_not_found(runner, run_config):
    with pytest.raises(NotFoundError):
        runner.checkpoint_states(run_config, 1)


def test_sample_with_stub_stores_dump_and_preview(runner, samples, run_config):
    # Act
    outcome = runner.sample(run_config, "stub", denoiser=lambda: create_stub_denoiser(run_config))

    # Assert
    grids = outcome.generation.grids
    assert grids.shape == (4, 4, 4, 2)
    samples.save_samples.assert_called_once_with("stub", grids)
    samples.save_preview.assert_called_once_with("stub", grids)
    assert outcome.samples_path == Path("samples.mads")
    assert outcome.generation.ledger.denoise_passes == 2 * run_config.model.ar_length


def test_trained_run_can_be_sampled_and_evaluated(tmp_path, samples, run_config):
    """Train into a real store, then sample and score the last two checkpoints."""
    runner = MadformerRunner(
        checkpoints=LocalCheckpointStore(tmp_path),
        metrics=mock.Mock(spec=TableSink),
        samples=samples,
        results=mock.Mock(spec=TableSink),
    )
    runner.train(run_config)

    labels, states = runner.checkpoint_states(run_config, 5)
    outcome = runner.sample(run_config)
    report = runner.evaluate(run_config)

    assert labels == ["step-000002", "step-000004"]
    assert [state.step for state in states] == [2, 4]
    assert outcome.generation.grids.shape == (4, 4, 4, 2)
    assert report.labels == labels
    assert len(report.frechet_per_checkpoint) == 2


def test_ablate_hands_the_sweep_its_storage(runner, run_config):
    grid = AblationGrid(diffusion_depth=[2])

    with mock.patch("madformer.application.run_ablation", return_value=[]) as run:
        rows = runner.ablate(grid, run_config, workers=3)

    assert rows == []
    run.assert_called_once_with(grid, run_config, runner.results, None, 3)
