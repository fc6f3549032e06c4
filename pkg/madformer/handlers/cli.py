"""Command-line interface for training, sampling, evaluating and sweeping madformer runs."""

import argparse
import logging
from pathlib import Path
from typing import Optional, Sequence

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from madformer.application import (
    ConfigError,
    ConfigSource,
    MadformerError,
    MadformerRunner,
    MaskMode,
    RunConfig,
)
from madformer.attention_mask import build_mask
from madformer.handlers.view import Terminal, mask_lines, schedule_table, token_labels
from madformer.infrastructure.checkpoint_store import LocalCheckpointStore
from madformer.infrastructure.config_loader import FileConfigLoader
from madformer.infrastructure.csv_sink import CsvSink
from madformer.infrastructure.sample_store import LocalSampleStore
from madformer.infrastructure.stub_handler import create_stub_denoiser
from madformer.layout import TokenRole, plan_sequence, strip_layout
from madformer.noise_schedule import spacing

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class CLIHandler:
    """
    Command-line interface handler for madformer.

    Each command method takes the loaded run configuration and prints its
    outcome through the Terminal.
    """

    def __init__(
        self,
        runner: MadformerRunner,
        config_source: ConfigSource,
        console: Console = None,
    ):
        self.runner = runner
        self.config_source = config_source
        self.console = console or Console()
        self.terminal = Terminal(self.console)

    def train(
        self, config: RunConfig, stop_at: Optional[int] = None, resume: bool = True
    ) -> None:
        self.terminal.heading_and_info(
            "Training",
            f"{config.train.steps} steps, batch {config.train.batch_size}, "
            f"N={config.model.n_layers} D={config.model.diffusion_depth} "
            f"l={config.model.ar_length}",
        )
        result = self.runner.train(config, stop_at=stop_at, resume=resume)
        if not result.history:
            self.terminal.update(f"Nothing to do: already trained to step {result.state.step}")
            return
        self.terminal.key_values(f"step {result.state.step}", result.history[-1])

    def sample(self, config: RunConfig, stub: bool = False, name: str = "samples") -> None:
        if stub:
            self.terminal.warn(
                short="Using the oracle stub denoiser",
                long="Samples are the data-generating class means, not model output.",
            )
            outcome = self.runner.sample(
                config, name, denoiser=lambda: create_stub_denoiser(config)
            )
        else:
            outcome = self.runner.sample(config, name)
        ledger = outcome.generation.ledger
        self.terminal.key_values(
            "samples",
            {
                "count": outcome.generation.grids.shape[0],
                "dump": outcome.samples_path,
                "preview": outcome.preview_path,
                "block_passes": ledger.block_passes,
                "denoise_passes": ledger.denoise_passes,
                "layer_weighted_nfe": ledger.layer_weighted,
                "raw_nfe": ledger.raw_passes,
            },
        )

    def evaluate(self, config: RunConfig) -> None:
        report = self.runner.evaluate(config)
        for label, distance in zip(report.labels, report.frechet_per_checkpoint):
            self.terminal.update(f"{label}: frechet={distance:.6g}")
        self.terminal.key_values("evaluation", report.as_row())
        if report.heldout.improvement < 0:
            self.terminal.warn(
                short="The model is worse than the mean predictor on held-out data",
                long=f"image_mse={report.heldout.model_mse:.6g} vs "
                f"mean_predictor_mse={report.heldout.mean_predictor_mse:.6g}",
            )

    def ablate(self, config: RunConfig, grid_path: Optional[Path], workers: int = 1) -> None:
        grid = self.config_source.load_grid(grid_path, config.model.n_layers)
        cells = grid.cells(config)
        axes = ", ".join(name for name, _ in grid.axes()) or "none"
        self.terminal.heading_and_info("Ablation", f"{len(cells)} cells over axes: {axes}")
        rows = self.runner.ablate(grid, config, workers=workers)

        columns = ("cell", "status", "frechet", "image_mse", "layer_weighted_nfe")
        table = Table(title="ablation")
        for column in columns:
            table.add_column(column)
        for row in rows:
            table.add_row(*(str(row.get(column, "")) for column in columns))
        self.console.print(table)
        failed = [row["cell"] for row in rows if row["status"] != "ok"]
        if failed:
            self.terminal.warn(
                short=f"{len(failed)} cell(s) did not finish",
                long="\n".join(failed),
            )

    def mask_dump(
        self,
        ar_length: int,
        tokens_per_block: int,
        text_len: int = 0,
        clean: bool = False,
        mode: MaskMode = MaskMode.FULL,
        with_delimiters: bool = False,
    ) -> None:
        """Prints the attention matrix of a one-row strip layout, image tokens only by default."""
        plan = plan_sequence(strip_layout(tokens_per_block, ar_length), text_len, clean)
        allowed = build_mask(plan, mode).allowed
        if with_delimiters:
            tokens = list(range(plan.seq_len))
        else:
            tokens = sorted(plan.indices(TokenRole.CLEAN) + plan.indices(TokenRole.NOISY))
            allowed = allowed[tokens][:, tokens]
        for line in mask_lines(allowed, token_labels(plan, tokens)):
            self.terminal.plain(line)

    def schedule_dump(self, config: RunConfig, steps: Optional[int] = None) -> None:
        schedule = config.schedule.build()
        timesteps = spacing(schedule.T, steps or config.sampler.num_inference_steps)
        self.terminal.plain(str(timesteps))
        self.console.print(schedule_table(schedule, timesteps))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="madformer", description="Hybrid autoregressive-diffusion transformer"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Run configuration (key = value or YAML)")
    common.add_argument("--seed", type=int, help="Overrides train.seed and sampler.seed")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="Run directory")
    common.add_argument("--verbose", action="store_true", help="Log at debug level")

    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", parents=[common], help="Train and checkpoint")
    train.add_argument("--stop-at", type=int, help="Stop after this step")
    train.add_argument("--fresh", action="store_true", help="Ignore existing checkpoints")

    sample = commands.add_parser("sample", parents=[common], help="Generate samples")
    sample.add_argument("--stub", action="store_true", help="Use the oracle stub denoiser")
    sample.add_argument("--name", default="samples", help="Base name of the sample files")

    commands.add_parser("eval", parents=[common], help="Score the latest checkpoints")

    ablate = commands.add_parser("ablate", parents=[common], help="Run an ablation sweep")
    ablate.add_argument("--grid", type=Path, help="Ablation grid file; default: published axes")
    ablate.add_argument("--workers", type=int, default=1, help="Concurrent trainings")

    mask = commands.add_parser("mask-dump", parents=[common], help="Print an attention mask")
    mask.add_argument("--ar-length", type=int, default=2)
    mask.add_argument("--tokens-per-block", type=int, default=2)
    mask.add_argument("--text-len", type=int, default=0)
    mask.add_argument("--clean", action="store_true", help="Prepend clean blocks")
    mask.add_argument("--mode", type=MaskMode, choices=list(MaskMode), default=MaskMode.FULL)
    mask.add_argument(
        "--with-delimiters", action="store_true", help="Include text, BOI and EOI rows"
    )

    schedule = commands.add_parser(
        "schedule-dump", parents=[common], help="Print sampling timesteps and schedule tables"
    )
    schedule.add_argument("--steps", type=int, help="Inference steps; default: sampler config")
    return parser


def create_runner(out: Path) -> MadformerRunner:
    return MadformerRunner(
        checkpoints=LocalCheckpointStore(out / "checkpoints"),
        metrics=CsvSink(out / "metrics.csv"),
        samples=LocalSampleStore(out / "samples"),
        results=CsvSink(out / "ablation.csv"),
        cell_checkpoints=lambda key: LocalCheckpointStore(out / "cells" / key[:16]),
    )


def configure_logging(console: Console, verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None, console: Optional[Console] = None) -> int:
    """
    Main entry point for the CLI.

    Returns 0 on success, 2 on a usage or configuration error and 1 on any
    other failure.

    Example usage:
    madformer train --config tiny.toml
    madformer sample --stub
    madformer mask-dump --ar-length 2 --tokens-per-block 2 --clean
    madformer schedule-dump --steps 4
    """
    console = console or Console()
    terminal = Terminal(console)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_CONFIG

    configure_logging(console, args.verbose)
    config_source = FileConfigLoader()
    cli_handler = CLIHandler(create_runner(args.out), config_source, console)

    try:
        config = config_source.load_config(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed)

        if args.command == "train":
            cli_handler.train(config, stop_at=args.stop_at, resume=not args.fresh)
        elif args.command == "sample":
            cli_handler.sample(config, stub=args.stub, name=args.name)
        elif args.command == "eval":
            cli_handler.evaluate(config)
        elif args.command == "ablate":
            cli_handler.ablate(config, args.grid, workers=args.workers)
        elif args.command == "mask-dump":
            cli_handler.mask_dump(
                args.ar_length,
                args.tokens_per_block,
                text_len=args.text_len,
                clean=args.clean,
                mode=args.mode,
                with_delimiters=args.with_delimiters,
            )
        elif args.command == "schedule-dump":
            cli_handler.schedule_dump(config, args.steps)
    except ConfigError as e:
        terminal.error(str(e))
        return EXIT_CONFIG
    except (MadformerError, RuntimeError, OSError) as e:
        terminal.error(str(e))
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
