"""Preference fine-tuning loop with periodic reference refresh.

Step t = 1..N: draw a batch with replacement, draw (timestep, eps_a, eps_b)
per pair, take one loss gradient, update theta with a linearly warmed-up rate,
then copy theta into the reference when t is a multiple of ``ref_update_interval``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dpo
from .diffusion import DenoiserParams, NoiseSchedule, NumericalError
from .dpo import DpoConfig, ModelPair, PairBatch
from .optim import OptimizerConfig, OptimizerState, optimizer_step
from .prefcore import PreferencePair, Stream, ValidationError, atomic_write_text

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "loss", "grad_norm", "ref_refreshed", "lr_effective")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 64
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    ref_update_interval: int | None = 100  # None disables refresh
    dpo: DpoConfig = DpoConfig()
    optimizer: OptimizerConfig = OptimizerConfig()

    def __post_init__(self):
        if self.steps < 0:
            raise ValidationError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.warmup_steps < 0:
            raise ValidationError("warmup_steps must be non-negative")
        if self.ref_update_interval is not None and self.ref_update_interval < 1:
            raise ValidationError("ref_update_interval must be >= 1 or disabled")


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    grad_norm: float
    ref_refreshed: bool
    lr_effective: float


@dataclass
class RunRecord:
    rows: list[StepRecord] = field(default_factory=list)
    checkpoint: str | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.rows])

    @property
    def refresh_count(self) -> int:
        return sum(r.ref_refreshed for r in self.rows)

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in self.rows:
            w.writerow([r.step, repr(r.loss), repr(r.grad_norm), int(r.ref_refreshed), repr(r.lr_effective)])
        return buf.getvalue()

    def write_csv(self, path, header_comment: str | None = None) -> None:
        atomic_write_text(path, self.to_csv(header_comment))


def effective_lr(cfg: TrainConfig, i: int) -> float:
    """Learning rate at 0-based step ``i``."""
    if i < cfg.warmup_steps:
        return cfg.learning_rate * (i + 1) / cfg.warmup_steps
    return cfg.learning_rate


def compute_loss_and_grad(models: ModelPair, schedule: NoiseSchedule, batch: PairBatch,
                          cfg: DpoConfig) -> tuple[float, np.ndarray]:
    """Dispatch on loss mode.

    Only ``direct`` sums per-metric loss terms; every other mode differs from
    ``balanced`` solely in how its dataset was labeled.
    """
    if cfg.loss_mode == "direct":
        return dpo.vanilla_loss_and_grad(models, schedule, batch, cfg.beta, cfg.weights)
    return dpo.balanced_loss_and_grad(models, schedule, batch, cfg.beta)


@dataclass(frozen=True)
class _DatasetArrays:
    x_a: np.ndarray
    x_b: np.ndarray
    c: np.ndarray
    s: np.ndarray | None
    votes: np.ndarray | None


def _as_arrays(pairs: Sequence[PreferencePair], cfg: DpoConfig) -> _DatasetArrays:
    if not pairs:
        raise ValidationError("cannot train on an empty dataset")
    if cfg.loss_mode == "direct":
        if any(p.votes is None for p in pairs):
            raise ValidationError("direct aggregation needs votes on every pair")
    elif any(p.consensus is None for p in pairs):
        bad = next(p.pair_id for p in pairs if p.consensus is None)
        raise ValidationError(f"pair {bad} has no consensus label; label the dataset first")
    s = None if any(p.consensus is None for p in pairs) else np.array([p.consensus.s for p in pairs], float)
    votes = None if any(p.votes is None for p in pairs) else np.array([p.votes for p in pairs], float)
    return _DatasetArrays(
        np.array([p.sample_a for p in pairs], dtype=np.float64),
        np.array([p.sample_b for p in pairs], dtype=np.float64),
        np.array([p.condition for p in pairs], dtype=np.int64),
        s, votes,
    )


def draw_batch(data: _DatasetArrays, schedule: NoiseSchedule, batch_size: int, rng: Stream) -> PairBatch:
    n = data.x_a.shape[0]
    idx = rng.split("batch").integers(0, n, size=batch_size)
    d = data.x_a.shape[1]
    return PairBatch(
        data.x_a[idx], data.x_b[idx], data.c[idx],
        rng.split("t").integers(1, schedule.T_steps + 1, size=batch_size),
        rng.split("eps_a").normal((batch_size, d)),
        rng.split("eps_b").normal((batch_size, d)),
        None if data.s is None else data.s[idx],
        None if data.votes is None else data.votes[idx],
    )


def train(dataset: Sequence[PreferencePair], init: DenoiserParams, schedule: NoiseSchedule,
          cfg: TrainConfig, rng: Stream) -> tuple[DenoiserParams, RunRecord]:
    record = RunRecord()
    if cfg.steps == 0:
        return init, record
    data = _as_arrays(dataset, cfg.dpo)
    theta = init.vec.copy()
    ref = init.copy()
    state = OptimizerState()
    for i in range(cfg.steps):
        step = i + 1
        batch = draw_batch(data, schedule, cfg.batch_size, rng.split("step", step))
        models = ModelPair(init.with_vec(theta), ref)
        loss, grad = compute_loss_and_grad(models, schedule, batch, cfg.dpo)
        if not math.isfinite(loss):
            raise NumericalError(f"training loss became {loss} at step {step}")
        lr = effective_lr(cfg, i)
        theta, state = optimizer_step(theta, grad, state, cfg.optimizer, lr)
        refreshed = cfg.ref_update_interval is not None and step % cfg.ref_update_interval == 0
        if refreshed:
            ref = init.with_vec(theta.copy())
        record.rows.append(StepRecord(step, loss, float(np.linalg.norm(grad)), refreshed, lr))
        if step % 250 == 0:
            log.debug("train step %d loss %.5f", step, loss)
    return init.with_vec(theta), record
