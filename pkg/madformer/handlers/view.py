from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import torch
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from madformer.layout import SequencePlan, TokenRole
from madformer.noise_schedule import NoiseSchedule

_ROLE_LETTERS = {
    TokenRole.TEXT: "T",
    TokenRole.BOI: "B",
    TokenRole.CLEAN: "C",
    TokenRole.NOISY: "N",
    TokenRole.EOI: "E",
}


@dataclass
class Terminal:
    """Handles output to the terminal"""

    console: Console = field(default_factory=Console)

    def heading_and_info(self, heading: str, info: str) -> None:
        """Gives the user a heading"""
        self.console.print(Panel(f"[bold]{heading}[/bold]"))
        self.console.print(info)

    def update(self, text: str) -> None:
        """Update the user about the current status"""
        self.console.print(f"[blue]{text}[/blue]")

    def warn(self, short: str, long: str) -> None:
        """Warn the user about something"""
        self.console.print(f"[yellow][bold]Warning:[/bold] {short}[/yellow]\n{long}")

    def error(self, text: str) -> None:
        """Error out the user"""
        self.console.print(f"[red][bold]Error:[/bold] {text}[/red]")

    def plain(self, text: str) -> None:
        """Prints without markup so matrices and lists come out verbatim"""
        self.console.print(text, markup=False, highlight=False)

    def key_values(self, title: str, values: Mapping[str, Any]) -> None:
        table = Table(title=title, show_header=False)
        table.add_column("key", style="bold")
        table.add_column("value")
        for key, value in values.items():
            table.add_row(key, _format_value(value))
        self.console.print(table)


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def token_labels(plan: SequencePlan, tokens: Sequence[int]) -> list[str]:
    """Short role labels: T, B, E for text-like tokens, C<i> and N<i> for block tokens."""
    labels = []
    for token in tokens:
        role = plan.role_of(token)
        letter = _ROLE_LETTERS[role]
        if role in (TokenRole.CLEAN, TokenRole.NOISY):
            letter += str(plan.block_of(token))
        labels.append(letter)
    return labels


def mask_lines(allowed: torch.Tensor, labels: Sequence[str]) -> list[str]:
    """One line per query: its label, then 1 (may attend) or 0 for every key."""
    width = max((len(label) for label in labels), default=0)
    return [
        f"{label:>{width}} " + " ".join("1" if bit else "0" for bit in row)
        for label, row in zip(labels, allowed.tolist())
    ]


def schedule_table(schedule: NoiseSchedule, timesteps: Sequence[int]) -> Table:
    table = Table(title=f"noise schedule (T={schedule.T})")
    for column in ("t", "beta", "alpha_bar", "sigma"):
        table.add_column(column, justify="right")
    for t in timesteps:
        table.add_row(
            str(t),
            f"{float(schedule.beta[t - 1]):.6e}",
            f"{schedule.alpha_bar_at(t):.6e}",
            f"{float(schedule.sigma[t - 1]):.6e}",
        )
    return table
