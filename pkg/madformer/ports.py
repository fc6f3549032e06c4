import abc
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Self

import torch


@dataclass
class Checkpoint:
    """Everything needed to resume a run, grouped as named tensor tables."""

    step: int
    config_digest: str
    metadata: dict[str, Any] = field(default_factory=dict)
    tensors: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)


class CheckpointStore(abc.ABC):
    @abc.abstractmethod
    def save(self: Self, label: str, checkpoint: Checkpoint) -> None:
        """Persist a checkpoint under a label.

        Raises:
            CheckpointError: If the write fails
        """
        pass

    @abc.abstractmethod
    def load(self: Self, label: str) -> Checkpoint:
        """Load a checkpoint.

        Raises:
            NotFoundError: If the label does not exist
            CheckpointError: If the stored bytes are not a valid checkpoint
        """
        pass

    @abc.abstractmethod
    def labels(self: Self) -> list[str]:
        pass

    @abc.abstractmethod
    def delete(self: Self, label: str) -> None:
        """Remove a checkpoint; a missing label is not an error.

        Raises:
            CheckpointError: If the file exists but cannot be removed
        """
        pass

    def latest(self: Self, prefix: str = "step-") -> Optional[str]:
        """Most recent training checkpoint; labels sort by zero-padded step."""
        candidates = sorted(label for label in self.labels() if label.startswith(prefix))
        return candidates[-1] if candidates else None


class TableSink(abc.ABC):
    """Append-only table with a fixed header, used for metrics and sweep results."""

    @abc.abstractmethod
    def begin(self: Self, columns: list[str], keep_through: Optional[int] = None) -> None:
        """Open the table.

        Rows whose first column is an integer above `keep_through` are dropped,
        so a resumed run continues the file where its checkpoint left off.
        None discards every existing row.
        """
        pass

    @abc.abstractmethod
    def append(self: Self, row: dict[str, Any]) -> None:
        pass

    @abc.abstractmethod
    def close(self: Self) -> None:
        pass


class SampleStore(abc.ABC):
    @abc.abstractmethod
    def save_samples(self: Self, name: str, grids: torch.Tensor) -> Path:
        """Write a (count, H, W, C) sample dump and return where it went."""
        pass

    @abc.abstractmethod
    def save_preview(self: Self, name: str, grids: torch.Tensor) -> Path:
        """Write a grayscale rendering of channel 0."""
        pass
