"""Append-only metrics CSV with explicit flush points."""
from __future__ import annotations

import csv
import time
from pathlib import Path

COLUMNS = ("wall_clock", "real_samples", "task", "phase", "name", "value")


class MetricsWriter:
    """Buffers rows and appends them to ``path`` on ``flush``.

    Rows are flushed at task boundaries, so a crash leaves a consistent
    prefix. ``path=None`` keeps rows in memory only.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.rows: list[tuple] = []
        self._pending: list[tuple] = []
        self._last_samples = 0
        if self.path is not None and not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(COLUMNS)

    def log(self, real_samples: int, task: int, phase: str, **metrics: float) -> None:
        if real_samples < self._last_samples:
            raise ValueError("real-sample counter went backwards in metrics stream")
        self._last_samples = real_samples
        now = f"{time.time():.3f}"
        for name, value in metrics.items():
            row = (now, int(real_samples), int(task), phase, name, repr(float(value)))
            self._pending.append(row)

    def flush(self) -> None:
        if self.path is not None and self._pending:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerows(self._pending)
        self.rows.extend(self._pending)
        self._pending = []
