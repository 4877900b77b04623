"""Rankings, Spearman correlation, and report files.

Report directory layout written by :func:`emit_report`::

    report.json          summary (schema below), keys sorted, 2-space indent
    scores_<method>.csv  per-method long table: method,client,round,score

report.json schema::

    {
      "schema": "coastfl-report/1",
      "config": {...flat experiment config...},
      "seed": int,
      "ground_truth": [1, ..., N],
      "runtime_sec": float,          # omitted from the file when None
      "methods": {
        "<method>": {"rho": float, "totals": [...], "rankings": [...],
                     "scores": "scores_<method>.csv"}
      }
    }
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from coastfl.errors import NumericError, StructuralError

if TYPE_CHECKING:
    from coastfl.coast import ScoreBoard

REPORT_SCHEMA = "coastfl-report/1"


def rank(totals: Sequence[float]) -> list[int]:
    """r_i = |{j : p_j >= p_i}|; ties share the larger (worse) rank."""
    p = np.asarray(totals, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise StructuralError("cannot rank an empty score vector")
    if np.isnan(p).any():
        raise NumericError("NaN score cannot be ranked")
    return [int((p >= v).sum()) for v in p]


def spearman(truth: Sequence[float], predicted: Sequence[float]) -> float:
    """rho = 1 - 6 * sum (o_i - o'_i)^2 / (n (n^2 - 1)) on the given ranks."""
    a = np.asarray(truth, dtype=np.float64)
    b = np.asarray(predicted, dtype=np.float64)
    if a.shape != b.shape:
        raise StructuralError(f"rank vectors differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise StructuralError("spearman needs at least two ranks")
    d2 = float(((a - b) ** 2).sum())
    den = n * (n * n - 1)
    # one rounding step: exact for integer ranks up to float precision
    return (den - 6.0 * d2) / den


@dataclass(eq=False)
class Report:
    config: dict
    seed: int
    ground_truth: list[int]
    boards: dict[str, "ScoreBoard"] = field(default_factory=dict)
    runtime_sec: float | None = None

    def rho(self, method: str) -> float:
        return spearman(self.ground_truth, self.boards[method].rankings)

    @property
    def rhos(self) -> dict[str, float]:
        return {m: self.rho(m) for m in self.boards}

    def summary(self) -> dict:
        methods = {}
        for m, board in sorted(self.boards.items()):
            methods[m] = {
                "rho": self.rho(m),
                "totals": [float(v) for v in board.totals],
                "rankings": board.rankings,
                "scores": f"scores_{m}.csv",
            }
        out = {
            "schema": REPORT_SCHEMA,
            "config": self.config,
            "seed": self.seed,
            "ground_truth": list(self.ground_truth),
            "methods": methods,
        }
        if self.runtime_sec is not None:
            out["runtime_sec"] = self.runtime_sec
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Report):
            return NotImplemented
        return (
            self.config == other.config
            and self.seed == other.seed
            and list(self.ground_truth) == list(other.ground_truth)
            and self.boards == other.boards
            and self.runtime_sec == other.runtime_sec
        )


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def emit_report(report: Report, path: str | Path) -> Path:
    """Write ``report.json`` and one score CSV per method under ``path``."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for m, board in sorted(report.boards.items()):
            (out / f"scores_{m}.csv").write_text(board.to_csv(), encoding="utf-8")
        (out / "report.json").write_text(_dump_json(report.summary()), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report under {out}: {exc}") from exc
    return out / "report.json"


def load_report(path: str | Path) -> Report:
    from coastfl.coast import ScoreBoard

    p = Path(path)
    summary_path = p / "report.json" if p.is_dir() else p
    try:
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read report {summary_path}: {exc}") from exc
    if summary.get("schema") != REPORT_SCHEMA:
        raise StructuralError(f"{summary_path}: unknown report schema {summary.get('schema')!r}")
    boards = {}
    for m, info in summary["methods"].items():
        text = (summary_path.parent / info["scores"]).read_text(encoding="utf-8")
        boards[m] = ScoreBoard.from_csv(text)
    return Report(
        config=summary["config"],
        seed=summary["seed"],
        ground_truth=summary["ground_truth"],
        boards=boards,
        runtime_sec=summary.get("runtime_sec"),
    )


def aggregate(reports: Sequence[Report]) -> dict:
    """Mean and per-seed rho for every method present in all reports."""
    methods = sorted(set.intersection(*(set(r.boards) for r in reports))) if reports else []
    out = {}
    for m in methods:
        values = [r.rho(m) for r in reports]
        out[m] = {"mean_rho": float(np.mean(values)), "rho": values, "seeds": [r.seed for r in reports]}
    return out


def format_table(rows: dict[str, dict[str, float]]) -> str:
    """Plain-text grid: one row per setting, one column per method."""
    methods = sorted({m for cols in rows.values() for m in cols})
    width = max([8, *(len(m) for m in methods)])
    lines = ["setting".ljust(12) + "".join(m.rjust(width + 2) for m in methods)]
    for setting, cols in rows.items():
        cells = "".join(
            (f"{cols[m]:.2f}" if m in cols and not math.isnan(cols[m]) else "-").rjust(width + 2) for m in methods
        )
        lines.append(setting.ljust(12) + cells)
    return "\n".join(lines)
