"""Stage functions shared by the CLI and the experiment scripts."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .aggregate import AggregationPolicy
from .diffusion import DenoiserParams, NoiseSchedule, sample_many
from .dpo import DpoConfig
from .prefcore import PreferencePair, ScoreVector, Stream, ValidationError
from .rewards import RewardRegistry, score_matrix

# training mode -> aggregation mode used to label its dataset
LABEL_MODE = {
    "balanced": "majority",
    "vanilla": "vanilla_sum",
    "normalized": "normalized_sum",
    "random": "random_metric",
    "single": "single_metric",
    "direct": "majority",
}


@dataclass(frozen=True)
class ModeSpec:
    """A training variant such as ``balanced``, ``single:metric_2`` or ``balanced/noref``."""

    mode: str
    metric: str | None = None
    refresh: bool = True

    @classmethod
    def parse(cls, text: str) -> "ModeSpec":
        text = text.strip()
        refresh = True
        if text.endswith("/noref"):
            text, refresh = text[: -len("/noref")], False
        mode, _, metric = text.partition(":")
        if mode not in LABEL_MODE:
            raise ValidationError(f"unknown training mode {mode!r}; expected one of {tuple(LABEL_MODE)}")
        if (mode == "single") != bool(metric):
            raise ValidationError("single mode takes a metric (single:<metric_id>); other modes take none")
        return cls(mode, metric or None, refresh)

    @property
    def name(self) -> str:
        base = self.mode if self.metric is None else f"{self.mode}-{self.metric}"
        return base if self.refresh else f"{base}-noref"

    def __str__(self) -> str:
        base = self.mode if self.metric is None else f"{self.mode}:{self.metric}"
        return base if self.refresh else f"{base}/noref"

    def policy(self, base: AggregationPolicy) -> AggregationPolicy:
        return replace(base, mode=LABEL_MODE[self.mode], chosen_metric=self.metric)

    def dpo_config(self, base: DpoConfig) -> DpoConfig:
        return replace(base, loss_mode=self.mode)


def gen_pairs(params: DenoiserParams, schedule: NoiseSchedule, registry: RewardRegistry,
              num_conditions: int, per_condition: int, rng: Stream) -> list[PreferencePair]:
    """Two base-model samples per pair, scored by every metric; pairs ordered by condition."""
    conds = np.repeat(np.arange(num_conditions), per_condition)
    n = conds.size
    streams = [rng.split("pair", i, side) for i in range(n) for side in ("a", "b")]
    xs = sample_many(params, schedule, np.repeat(conds, 2), streams)
    scores = score_matrix(registry, np.repeat(conds, 2), xs)
    ids = registry.metric_ids
    return [
        PreferencePair(
            pair_id=i,
            condition=int(conds[i]),
            sample_a=tuple(xs[2 * i].tolist()),
            sample_b=tuple(xs[2 * i + 1].tolist()),
            scores_a=ScoreVector(tuple(scores[2 * i].tolist()), ids),
            scores_b=ScoreVector(tuple(scores[2 * i + 1].tolist()), ids),
        )
        for i in range(n)
    ]
