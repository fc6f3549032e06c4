"""Sweeps over the design axes: train each distinct configuration once, sample, score."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from itertools import product
from typing import Any, Callable, Optional, Self

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from madformer.attention_mask import MaskMode
from madformer.backbone import MadFormer, TowerMode
from madformer.config import RunConfig
from madformer.errors import ConfigError, MadformerError
from madformer.evaluation import evaluate_models
from madformer.ports import CheckpointStore, TableSink
from madformer.sampler import steps_for_budget
from madformer.trainer import TrainState, Trainer, run_digest

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

ABLATION_COLUMNS = [
    "schema_version",
    "cell",
    "axis",
    "value",
    "status",
    "error",
    "seed",
    "train_steps",
    "n_layers",
    "diffusion_depth",
    "ar_length",
    "clean_blocks",
    "use_condition",
    "towers",
    "mask_mode",
    "lambda_hidden",
    "lambda_tower",
    "nfe_budget",
    "num_inference_steps",
    "final_loss",
    "image_mse",
    "mean_predictor_mse",
    "frechet",
    "untrained_frechet",
    "block_passes",
    "denoise_passes",
    "layer_weighted_nfe",
    "raw_nfe",
]


def _set_model(key: str) -> Callable[[dict, Any], None]:
    def apply(config: dict, value: Any) -> None:
        config["model"][key] = value.value if isinstance(value, Enum) else value

    return apply


def _set_loss(key: str) -> Callable[[dict, Any], None]:
    def apply(config: dict, value: Any) -> None:
        config["loss"][key] = value

    return apply


def _set_clean_condition(config: dict, value: tuple[bool, bool]) -> None:
    config["model"]["clean_blocks"], config["model"]["use_condition"] = value


def _set_mask_mode(config: dict, value: tuple[MaskMode, bool]) -> None:
    mode, clean = value
    config["model"]["mask_mode"] = mode.value
    config["model"]["clean_blocks"] = clean


def _set_inference_steps(config: dict, value: int) -> None:
    config["sampler"]["num_inference_steps"] = value


_AXES: dict[str, Callable[[dict, Any], None]] = {
    "diffusion_depth": _set_model("diffusion_depth"),
    "ar_length": _set_model("ar_length"),
    "clean_condition": _set_clean_condition,
    "towers": _set_model("towers"),
    "mask_mode": _set_mask_mode,
    "lambda_hidden": _set_loss("lambda_hidden"),
    "lambda_tower": _set_loss("lambda_tower"),
    "inference_steps": _set_inference_steps,
}


def _format(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return "+".join(_format(v) for v in value)
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)


@dataclass(frozen=True)
class AblationCell:
    name: str
    axis: str
    value: str
    config: RunConfig
    nfe_budget: Optional[float] = None

    @property
    def training_key(self) -> str:
        """Cells with equal keys share one trained model."""
        c = self.config
        return run_digest(c.model, c.train, c.data, c.loss, c.schedule)

    @property
    def inference_steps(self) -> int:
        """Per-block step count; 0 when a budget cannot afford one step."""
        if self.nfe_budget is None:
            return self.config.sampler.num_inference_steps
        model = self.config.model
        return steps_for_budget(
            self.nfe_budget, model.n_layers, model.diffusion_depth, model.ar_length
        )


class AblationGrid(BaseModel):
    """
    Axis values to sweep around a base configuration.

    By default each axis is varied alone with everything else at the base
    values; `cartesian` sweeps the full product instead. Every cell is
    scored at each NFE budget when `nfe_budgets` is set, with the per-block
    step count derived from the budget.
    """

    model_config = ConfigDict(extra="forbid")

    diffusion_depth: list[int] = Field(default_factory=list)
    ar_length: list[int] = Field(default_factory=list)
    clean_condition: list[tuple[bool, bool]] = Field(default_factory=list)
    towers: list[TowerMode] = Field(default_factory=list)
    mask_mode: list[tuple[MaskMode, bool]] = Field(default_factory=list)
    lambda_hidden: list[float] = Field(default_factory=list)
    lambda_tower: list[float] = Field(default_factory=list)
    inference_steps: list[int] = Field(default_factory=list)
    nfe_budgets: list[float] = Field(default_factory=list)
    cartesian: bool = False

    @classmethod
    def published_axes(cls, n_layers: int) -> Self:
        """The published ablation axes scaled to an n_layers-deep model."""
        depths = sorted({max(1, n_layers * k // 4) for k in (1, 2, 3, 4)})
        return cls(
            diffusion_depth=depths,
            ar_length=[1, 4, 16],
            clean_condition=[(True, True), (True, False), (False, True), (False, False)],
            towers=[TowerMode.SHARED, TowerMode.SEPARATE],
            mask_mode=[(MaskMode.MLP_ABLATION, True), (MaskMode.MLP_ABLATION, False)],
            lambda_hidden=[0.0, 0.1, 1.0],
            lambda_tower=[0.0, 0.1, 1.0],
        )

    def axes(self: Self) -> list[tuple[str, list[Any]]]:
        return [(name, getattr(self, name)) for name in _AXES if getattr(self, name)]

    def _assignments(self: Self) -> list[tuple[tuple[str, Any], ...]]:
        axes = self.axes()
        if self.cartesian and axes:
            names = [name for name, _ in axes]
            return [tuple(zip(names, values)) for values in product(*(v for _, v in axes))]
        return [()] + [((name, value),) for name, values in axes for value in values]

    @staticmethod
    def apply(base: RunConfig, assignments: tuple[tuple[str, Any], ...]) -> RunConfig:
        """
        Raises:
            ConfigError: If the assignments produce an invalid configuration
        """
        data = base.model_dump(mode="json")
        for name, value in assignments:
            _AXES[name](data, value)
        try:
            return RunConfig.model_validate(data)
        except ValidationError as e:
            label = ", ".join(f"{n}={_format(v)}" for n, v in assignments)
            raise ConfigError(f"ablation cell {label} is invalid: {e}") from e

    def cells(self: Self, base: RunConfig) -> list[AblationCell]:
        """Base first, then each distinct variant once."""
        cells = []
        seen = set()
        for assignments in self._assignments():
            config = self.apply(base, assignments)
            name = ";".join(f"{n}={_format(v)}" for n, v in assignments) or "base"
            axis = "+".join(n for n, _ in assignments) or "base"
            value = "+".join(_format(v) for _, v in assignments)
            for budget in self.nfe_budgets or [None]:
                key = (config.model_dump_json(), budget)
                if key in seen:
                    continue
                seen.add(key)
                cells.append(
                    AblationCell(
                        name=name if budget is None else f"{name}@nfe={budget:g}",
                        axis=axis,
                        value=value,
                        config=config,
                        nfe_budget=budget,
                    )
                )
        return cells


def _cell_row(cell: AblationCell) -> dict[str, Any]:
    config = cell.config
    model = config.model
    return {
        "schema_version": SCHEMA_VERSION,
        "cell": cell.name,
        "axis": cell.axis,
        "value": cell.value,
        "status": "ok",
        "error": "",
        "seed": config.train.seed,
        "train_steps": config.train.steps,
        "n_layers": model.n_layers,
        "diffusion_depth": model.diffusion_depth,
        "ar_length": model.ar_length,
        "clean_blocks": model.clean_blocks,
        "use_condition": model.use_condition,
        "towers": str(model.towers),
        "mask_mode": str(model.mask_mode),
        "lambda_hidden": config.loss.lambda_hidden,
        "lambda_tower": config.loss.lambda_tower,
        "nfe_budget": "" if cell.nfe_budget is None else cell.nfe_budget,
        "num_inference_steps": cell.inference_steps,
    }


def _failed(row: dict[str, Any], status: str, error: str) -> dict[str, Any]:
    logger.warning("cell=%s status=%s error=%s", row["cell"], status, error)
    return {**row, "status": status, "error": error}


def _trained_states(
    config: RunConfig, store: Optional[CheckpointStore]
) -> tuple[list[str], list[TrainState], Optional[float]]:
    trainer = Trainer(
        model_config=config.model,
        train_config=config.train,
        data=config.data,
        loss_weights=config.loss,
        schedule_config=config.schedule,
        checkpoints=store,
    )
    # a finished run in the store resumes at its last step; its loss comes from the checkpoint
    result = trainer.train()
    final_loss = result.state.last_loss
    if store is None:
        return [f"step-{result.state.step:06d}"], [result.state], final_loss

    labels = [label for label in store.labels() if label.startswith("step-")]
    labels = sorted(labels)[-config.eval.checkpoints :]
    states = [trainer.from_checkpoint(store.load(label)) for label in labels]
    return labels, states, final_loss


def _run_group(
    cells: list[AblationCell],
    store_for: Optional[Callable[[str], CheckpointStore]],
) -> list[dict[str, Any]]:
    rows = [_cell_row(cell) for cell in cells]
    config = cells[0].config
    key = cells[0].training_key
    logger.info("training cells=%s key=%s", ",".join(c.name for c in cells), key[:12])
    try:
        store = store_for(key) if store_for is not None else None
        labels, states, final_loss = _trained_states(config, store)
    except (MadformerError, RuntimeError) as e:
        return [_failed(row, "train_failed", str(e)) for row in rows]

    schedule = config.schedule.build()
    untrained = MadFormer(config.model, seed=config.train.seed)
    results = []
    for cell, row in zip(cells, rows):
        row["final_loss"] = "" if final_loss is None else final_loss
        steps = cell.inference_steps
        if steps < 1:
            results.append(
                _failed(row, "skipped", f"budget {cell.nfe_budget:g} affords no denoising step")
            )
            continue
        sampler = cell.config.sampler.model_copy(update={"num_inference_steps": steps})
        models = [s.ema_model() if sampler.use_ema else s.model for s in states]
        try:
            report = evaluate_models(
                models,
                untrained,
                cell.config.data,
                sampler,
                schedule,
                cell.config.eval,
                seed=cell.config.train.seed,
                labels=labels,
            )
        except (MadformerError, RuntimeError) as e:
            results.append(_failed(row, "eval_failed", str(e)))
            continue
        results.append({**row, **report.as_row()})
    return results


def run_ablation(
    grid: AblationGrid,
    base: RunConfig,
    sink: TableSink,
    store_for: Optional[Callable[[str], CheckpointStore]] = None,
    workers: int = 1,
) -> list[dict[str, Any]]:
    """
    Trains every distinct training configuration once, scores each cell,
    and writes one row per cell.

    Training groups may run on `workers` threads; rows are written from the
    calling thread in cell order. A failing cell is recorded and the sweep
    continues.
    """
    cells = grid.cells(base)
    groups: dict[str, list[AblationCell]] = {}
    for cell in cells:
        groups.setdefault(cell.training_key, []).append(cell)
    logger.info("ablation cells=%d trainings=%d workers=%d", len(cells), len(groups), workers)

    order = {cell.name: i for i, cell in enumerate(cells)}
    rows = []
    sink.begin(ABLATION_COLUMNS)
    try:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="ablation") as pool:
            for group_rows in pool.map(lambda g: _run_group(g, store_for), groups.values()):
                rows.extend(group_rows)
        rows.sort(key=lambda row: order[row["cell"]])
        for row in rows:
            sink.append(row)
    finally:
        sink.close()
    return rows
