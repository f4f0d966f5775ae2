"""Best-of-N win-rate evaluation between checkpoints.

Each evaluation prompt (a condition id) gets ``n_seeds`` samples from each
model.  The per-metric best score over those samples is compared between two
models; the win rate is the fraction of prompts where model A's best is higher,
with exact ties worth ``tie_value``.  Both models see the same seeds.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffusion import DenoiserParams, NoiseSchedule, sample_many
from .prefcore import Stream, ValidationError, atomic_write_text
from .rewards import RewardRegistry, score_matrix

REPORT_COLUMNS = ("comparison", "metric", "win_rate_percent", "ties", "n")


@dataclass(frozen=True)
class EvalConfig:
    registry: RewardRegistry
    conditions: tuple[int, ...]
    n_seeds: int = 5
    tie_value: float = 0.5
    paired: bool = True  # share sampling seeds across compared models

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ValidationError("n_seeds must be at least 1")
        if not self.conditions:
            raise ValidationError("evaluation needs at least one prompt")
        if not 0.0 <= self.tie_value <= 1.0:
            raise ValidationError("tie_value must lie in [0, 1]")


@dataclass(frozen=True)
class BestScores:
    conditions: tuple[int, ...]
    metric_ids: tuple[str, ...]
    table: np.ndarray  # (n_prompts, K)


@dataclass(frozen=True)
class WinRateReport:
    model_a: str
    model_b: str
    metric_ids: tuple[str, ...]
    win_rates: tuple[float, ...]
    ties: tuple[int, ...]
    n_conditions: int

    @property
    def comparison(self) -> str:
        return f"{self.model_a}_vs_{self.model_b}"

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.metric_ids, self.win_rates))


def best_of(scores: np.ndarray) -> np.ndarray:
    """Per-prompt, per-metric maxima of an (n_prompts, n_seeds, K) score array."""
    return np.max(scores, axis=1)


def best_scores(params: DenoiserParams, schedule: NoiseSchedule, cfg: EvalConfig, rng: Stream,
                model: str = "") -> BestScores:
    """Sample ``n_seeds`` chains per prompt and keep each metric's best score.

    Chain (i, j) uses stream ``rng.split("eval", i, j)`` regardless of the
    model, so two checkpoints evaluated with the same ``rng`` share seeds.
    With ``cfg.paired`` off the streams are keyed by ``model`` as well.
    """
    if params.arch.T_steps != schedule.T_steps:
        raise ValidationError("checkpoint and schedule disagree on T_steps")
    if max(cfg.conditions) >= params.arch.C:
        raise ValidationError("evaluation prompt refers to a condition the checkpoint does not know")
    n_p, n_s = len(cfg.conditions), cfg.n_seeds
    conds = np.repeat(np.asarray(cfg.conditions, dtype=np.int64), n_s)
    if not cfg.paired:
        rng = rng.split("model", model)
    streams = [rng.split("eval", i, j) for i in range(n_p) for j in range(n_s)]
    xs = sample_many(params, schedule, conds, streams)
    scores = score_matrix(cfg.registry, conds, xs).reshape(n_p, n_s, len(cfg.registry))
    return BestScores(tuple(cfg.conditions), cfg.registry.metric_ids, best_of(scores))


def win_rate(best_a: BestScores, best_b: BestScores, tie_value: float = 0.5,
             model_a: str = "a", model_b: str = "b") -> WinRateReport:
    if best_a.conditions != best_b.conditions:
        raise ValidationError("win_rate needs both models evaluated on the same prompts")
    if best_a.metric_ids != best_b.metric_ids:
        raise ValidationError("win_rate needs both models scored with the same metrics")
    a, b = best_a.table, best_b.table
    n = a.shape[0]
    wins = np.sum(a > b, axis=0)
    ties = np.sum(a == b, axis=0)
    rates = (wins + tie_value * ties) / n
    return WinRateReport(model_a, model_b, best_a.metric_ids, tuple(rates.tolist()),
                         tuple(int(v) for v in ties), n)


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def report_csv(reports: Sequence[WinRateReport], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        for m, rate, tie in zip(r.metric_ids, r.win_rates, r.ties):
            w.writerow([r.comparison, m, _pct(rate), tie, r.n_conditions])
    return buf.getvalue()


def report_table(reports: Sequence[WinRateReport]) -> str:
    """Aligned text table, one row per comparison, one column per metric."""
    metrics = reports[0].metric_ids
    rows = [["comparison", *metrics]] + [[r.comparison, *map(_pct, r.win_rates)] for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(row))
             for row in rows]
    return "\n".join(lines) + "\n"


def report(reports: Sequence[WinRateReport], path, header_comment: str | None = None) -> list[str]:
    """Write the CSV at ``path`` plus one gnuplot data file per comparison.

    Returns the paths written.
    """
    if not reports:
        raise ValidationError("nothing to report")
    path = os.fspath(path)
    atomic_write_text(path, report_csv(reports, header_comment))
    stem = path[:-4] if path.endswith(".csv") else path
    written = [path]
    for r in reports:
        lines = [f"# {header_comment}"] if header_comment else []
        lines.append("# metric win_rate_percent ties")
        lines += [f"{m} {_pct(rate)} {tie}" for m, rate, tie in zip(r.metric_ids, r.win_rates, r.ties)]
        dat = f"{stem}.{r.comparison}.dat"
        atomic_write_text(dat, "\n".join(lines) + "\n")
        written.append(dat)
    txt = f"{stem}.txt"
    atomic_write_text(txt, (f"# {header_comment}\n" if header_comment else "") + report_table(reports))
    written.append(txt)
    return written
