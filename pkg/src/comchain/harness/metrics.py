"""Append-only JSON Lines metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class MetricsError(ValueError):
    pass


@dataclass
class MetricsRow:
    run_id: str
    model: str
    epoch: int
    step: int
    l_task: float
    l_ifd: float
    l_total: float
    r1: float | None
    cumulative_macs: float
    wall_seconds: float
    t2i_r1: float | None = None
    i2t_r1: float | None = None
    proto_top1: float | None = None

    def validate(self) -> None:
        if not self.run_id or not self.model:
            raise MetricsError("run_id and model must be non-empty")
        if self.epoch < 0 or self.step < 0:
            raise MetricsError("epoch and step must be >= 0")
        for name in ("l_task", "l_ifd", "l_total", "cumulative_macs", "wall_seconds"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise MetricsError(f"{name} must be a finite number, got {v!r}")
        if self.cumulative_macs < 0:
            raise MetricsError("cumulative_macs must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> MetricsRow:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise MetricsError(f"unknown metrics fields {sorted(unknown)}")
        try:
            row = cls(**d)
        except TypeError as e:
            raise MetricsError(str(e)) from e
        row.validate()
        return row


class MetricsWriter:
    """Appends rows, enforcing per-run monotone step and cumulative MACs."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        self._last: dict[str, tuple[int, float]] = {}

    def write(self, row: MetricsRow) -> None:
        row.validate()
        last = self._last.get(row.run_id)
        if last and (row.step < last[0] or row.cumulative_macs < last[1]):
            raise MetricsError(f"run {row.run_id}: step/MACs went backwards")
        self._last[row.run_id] = (row.step, row.cumulative_macs)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(asdict(row), sort_keys=True) + "\n")


def read_metrics(path) -> list[MetricsRow]:
    rows = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            rows.append(MetricsRow.from_dict(json.loads(line)))
        except (json.JSONDecodeError, MetricsError) as e:
            raise MetricsError(f"{path}:{i + 1}: {e}") from e
    return rows
