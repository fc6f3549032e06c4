import csv
import logging
import os
from pathlib import Path
from typing import Any, Optional, Self, TextIO

from madformer.ports import TableSink

logger = logging.getLogger(__name__)


def _keeps(row: list[str], keep_through: int) -> bool:
    try:
        return int(row[0]) <= keep_through
    except (IndexError, ValueError):
        return False


class CsvSink(TableSink):
    """Writes rows to a CSV file, flushing after each one."""

    def __init__(self: Self, path: Path):
        self.path = Path(path)
        self._file: Optional[TextIO] = None
        self._writer = None
        self._columns: list[str] = []

    def begin(self: Self, columns: list[str], keep_through: Optional[int] = None) -> None:
        kept: list[list[str]] = []
        if keep_through is not None and self.path.is_file():
            with open(self.path, newline="") as file:
                existing = list(csv.reader(file))
            if existing and existing[0] == columns:
                kept = [row for row in existing[1:] if _keeps(row, keep_through)]
                logger.debug("kept %d rows of %s through %d", len(kept), self.path, keep_through)

        os.makedirs(self.path.parent, exist_ok=True)
        self._columns = list(columns)
        self._file = open(self.path, "w", newline="")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(self._columns)
        self._writer.writerows(kept)
        self._file.flush()

    def append(self: Self, row: dict[str, Any]) -> None:
        if self._writer is None:
            raise RuntimeError(f"{self.path} is not open; call begin() first")
        self._writer.writerow([row.get(column, "") for column in self._columns])
        self._file.flush()

    def close(self: Self) -> None:
        if self._file is not None:
            self._file.close()
        self._file = None
        self._writer = None
