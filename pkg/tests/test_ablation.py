from unittest import mock

import pytest

from madformer.ablation import ABLATION_COLUMNS, SCHEMA_VERSION, AblationGrid, run_ablation
from madformer.attention_mask import MaskMode
from madformer.backbone import TowerMode
from madformer.errors import ConfigError, NonFiniteLoss
from madformer.infrastructure.checkpoint_store import LocalCheckpointStore
from madformer.ports import TableSink
from madformer.trainer import Trainer


@pytest.fixture
def sink() -> TableSink:
    return mock.Mock(spec=TableSink)


def test_empty_grid_is_the_base_cell(run_config):
    cells = AblationGrid().cells(run_config)

    assert [cell.name for cell in cells] == ["base"]
    assert cells[0].config == run_config


def test_one_axis_at_a_time_skips_duplicates_of_the_base(run_config):
    grid = AblationGrid(diffusion_depth=[1, 2], lambda_tower=[0.0, 1.0])

    cells = grid.cells(run_config)

    # depth 1 and lambda_tower 0 are the base values
    assert [cell.name for cell in cells] == ["base", "diffusion_depth=2", "lambda_tower=1.0"]
    assert cells[1].config.model.diffusion_depth == 2
    assert cells[1].config.loss == run_config.loss
    assert cells[2].axis == "lambda_tower"


def test_cartesian_grid_sweeps_the_product(run_config):
    grid = AblationGrid(
        ar_length=[1, 2], towers=[TowerMode.SHARED, TowerMode.SEPARATE], cartesian=True
    )

    cells = grid.cells(run_config)

    assert [cell.name for cell in cells] == [
        "ar_length=1;towers=shared",
        "ar_length=1;towers=separate",
        "ar_length=2;towers=shared",
        "ar_length=2;towers=separate",
    ]
    assert cells[0].axis == "ar_length+towers"


def test_paired_axes_set_both_switches(run_config):
    grid = AblationGrid(
        clean_condition=[(False, True)], mask_mode=[(MaskMode.MLP_ABLATION, False)]
    )

    base, clean_off, mlp = grid.cells(run_config)

    assert (clean_off.config.model.clean_blocks, clean_off.config.model.use_condition) == (
        False,
        True,
    )
    assert clean_off.name == "clean_condition=off+on"
    assert mlp.config.model.mask_mode == MaskMode.MLP_ABLATION
    assert not mlp.config.model.clean_blocks


def test_invalid_cell_is_a_config_error(run_config):
    with pytest.raises(ConfigError):
        AblationGrid(diffusion_depth=[3]).cells(run_config)


def test_published_axes_scale_with_depth():
    grid = AblationGrid.published_axes(8)

    assert grid.diffusion_depth == [2, 4, 6, 8]
    assert grid.ar_length == [1, 4, 16]
    assert len(grid.clean_condition) == 4
    assert grid.towers == [TowerMode.SHARED, TowerMode.SEPARATE]
    assert AblationGrid.published_axes(2).diffusion_depth == [1, 2]


def test_budgets_set_the_step_count(run_config):
    cells = AblationGrid(nfe_budgets=[100, 0.1]).cells(run_config)

    assert [cell.name for cell in cells] == ["base@nfe=100", "base@nfe=0.1"]
    # N=2, D=1, l=4: 4 * (1 + S) / 2 <= budget
    assert cells[0].inference_steps == 49
    assert cells[1].inference_steps == 0


def test_cells_sharing_a_training_configuration_train_once(run_config, sink):
    # Arrange
    grid = AblationGrid(inference_steps=[1, 2])

    # Act
    with mock.patch.object(Trainer, "train", autospec=True, side_effect=Trainer.train) as train:
        rows = run_ablation(grid, run_config, sink)

    # Assert
    assert train.call_count == 1
    assert [row["cell"] for row in rows] == ["base", "inference_steps=1"]
    assert [row["status"] for row in rows] == ["ok", "ok"]
    assert rows[1]["num_inference_steps"] == 1
    assert rows[1]["denoise_passes"] == run_config.model.ar_length
    sink.begin.assert_called_once_with(ABLATION_COLUMNS)
    assert sink.append.call_count == 2
    sink.close.assert_called_once()


def test_rows_carry_every_column(run_config, sink):
    (row,) = run_ablation(AblationGrid(), run_config, sink)

    assert set(row) == set(ABLATION_COLUMNS)
    assert row["schema_version"] == SCHEMA_VERSION
    assert row["frechet"] >= 0.0
    assert row["train_steps"] == run_config.train.steps


def test_unaffordable_budget_is_skipped(run_config, sink):
    (row,) = run_ablation(AblationGrid(nfe_budgets=[0.1]), run_config, sink)

    assert row["status"] == "skipped"
    assert "affords no denoising step" in row["error"]
    sink.append.assert_called_once_with(row)


def test_training_failure_is_recorded_and_the_sweep_continues(run_config, sink):
    with mock.patch.object(Trainer, "train", side_effect=NonFiniteLoss("loss is nan")):
        rows = run_ablation(AblationGrid(lambda_hidden=[0.5]), run_config, sink)

    assert [row["status"] for row in rows] == ["train_failed", "train_failed"]
    assert rows[0]["error"] == "loss is nan"


def test_parallel_sweep_is_ordered_and_deterministic(run_config, sink, tmp_path):
    grid = AblationGrid(lambda_hidden=[0.0, 0.5])

    def store_for(key):
        return LocalCheckpointStore(tmp_path / key[:16])

    serial = run_ablation(grid, run_config, sink)
    parallel = run_ablation(grid, run_config, sink, store_for=store_for, workers=2)

    assert [row["cell"] for row in parallel] == ["base", "lambda_hidden=0.0", "lambda_hidden=0.5"]
    assert [row["final_loss"] for row in parallel] == [row["final_loss"] for row in serial]


def test_rerunning_a_sweep_into_the_same_store_repeats_its_rows(run_config, sink, tmp_path):
    grid = AblationGrid(lambda_hidden=[0.5])

    def store_for(key):
        return LocalCheckpointStore(tmp_path / key[:16])

    first = run_ablation(grid, run_config, sink, store_for=store_for)
    second = run_ablation(grid, run_config, sink, store_for=store_for)

    assert second == first
    assert all(isinstance(row["final_loss"], float) for row in second)
