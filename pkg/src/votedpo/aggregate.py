"""Turning per-metric score pairs into preference labels.

``majority`` is the vote-then-count rule: each metric casts a vote for the
sample it scores higher and the sign of the vote total decides the pair.  The
remaining modes are ablation baselines that label pairs from raw (or z-scored)
score sums, a single metric, or a randomly drawn metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .prefcore import ConsensusLabel, PreferencePair, Stream, ValidationError

MODES = ("majority", "vanilla_sum", "normalized_sum", "random_metric", "single_metric")
TIE_POLICIES = ("first_metric", "skip_pair", "fixed_plus")


class _Skip:
    """Sentinel for pairs that produce no usable label."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "SKIP"

    def __bool__(self) -> bool:
        return False


SKIP = _Skip()


@dataclass(frozen=True)
class AggregationPolicy:
    mode: str = "majority"
    weights: tuple[float, ...] | None = None
    chosen_metric: str | None = None
    tie_policy: str = "first_metric"
    margins: tuple[float, ...] | None = None
    paper_faithful_votes: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown aggregation mode {self.mode!r}; expected one of {MODES}")
        if self.tie_policy not in TIE_POLICIES:
            raise ValidationError(f"unknown tie policy {self.tie_policy!r}; expected one of {TIE_POLICIES}")
        if self.weights is not None:
            w = tuple(float(v) for v in self.weights)
            if not all(math.isfinite(v) for v in w) or not any(w):
                raise ValidationError("aggregation weights must be finite and not all zero")
            object.__setattr__(self, "weights", w)
        if self.margins is not None:
            m = tuple(float(v) for v in self.margins)
            if any(not (v >= 0 and math.isfinite(v)) for v in m):
                raise ValidationError("vote margins must be finite and non-negative")
            object.__setattr__(self, "margins", m)
        if self.mode == "single_metric" and not self.chosen_metric:
            raise ValidationError("single_metric mode requires chosen_metric")


@dataclass(frozen=True)
class NormalizationStats:
    metric_ids: tuple[str, ...]
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        for m, s in zip(self.metric_ids, self.std):
            if not s > 0:
                raise ValidationError(f"metric {m!r} has zero variance; cannot normalize")


def vote_metric(r_a: float, r_b: float, margin: float = 0.0, paper_faithful: bool = False) -> int:
    if paper_faithful and margin == 0:
        return 1 if r_a >= r_b else -1
    if r_a - r_b > margin:
        return 1
    if r_b - r_a > margin:
        return -1
    return 0


def majority_consensus(votes: Sequence[int], tie_policy: str = "first_metric"):
    """Sign of the vote total, or the tie policy's verdict when the total is zero.

    >>> majority_consensus((1, 1, -1, 1))
    ConsensusLabel(s=1, tie_broken=False)
    >>> majority_consensus((1, -1, 1, -1), "skip_pair")
    SKIP
    """
    if len(votes) == 0:
        raise ValidationError("cannot aggregate an empty vote vector")
    total = sum(votes)
    if total > 0:
        return ConsensusLabel(1, False)
    if total < 0:
        return ConsensusLabel(-1, False)
    return _break_tie(votes, tie_policy)


def _break_tie(votes: Sequence[int], tie_policy: str):
    if tie_policy == "skip_pair":
        return SKIP
    if tie_policy == "fixed_plus":
        return ConsensusLabel(1, True)
    if tie_policy == "first_metric":
        for v in votes:
            if v != 0:
                return ConsensusLabel(int(v), True)
        return SKIP
    raise ValidationError(f"unknown tie policy {tie_policy!r}")


def _sign_label(value: float, votes: Sequence[int], tie_policy: str):
    if value > 0:
        return ConsensusLabel(1, False)
    if value < 0:
        return ConsensusLabel(-1, False)
    return _break_tie(votes, tie_policy)


def compute_votes(pair: PreferencePair, policy: AggregationPolicy) -> tuple[int, ...]:
    k = pair.k
    margins = policy.margins if policy.margins is not None else (0.0,) * k
    if len(margins) != k:
        raise ValidationError(f"{len(margins)} margins for K={k}")
    return tuple(
        vote_metric(ra, rb, m, policy.paper_faithful_votes)
        for ra, rb, m in zip(pair.scores_a.values, pair.scores_b.values, margins)
    )


def _weights(policy: AggregationPolicy, k: int) -> tuple[float, ...]:
    if policy.weights is None:
        return (1.0 / k,) * k
    if len(policy.weights) != k:
        raise ValidationError(f"{len(policy.weights)} weights for K={k}")
    return policy.weights


def _metric_index(metric_ids: tuple[str, ...], metric_id: str) -> int:
    try:
        return metric_ids.index(metric_id)
    except ValueError:
        raise ValidationError(f"unknown metric id {metric_id!r}; dataset has {metric_ids}") from None


def label_pair(
    pair: PreferencePair,
    policy: AggregationPolicy,
    stats: NormalizationStats | None = None,
    rng: Stream | None = None,
):
    """Fill in votes and consensus for ``pair`` under ``policy``; may return SKIP.

    ``rng`` is only consulted in random_metric mode and should be the pair's own
    substream (see :func:`label_dataset`).
    """
    votes = compute_votes(pair, policy)
    mode = policy.mode
    if mode == "majority":
        label = majority_consensus(votes, policy.tie_policy)
    elif mode in ("vanilla_sum", "normalized_sum"):
        w = _weights(policy, pair.k)
        ra = np.asarray(pair.scores_a.values)
        rb = np.asarray(pair.scores_b.values)
        if mode == "normalized_sum":
            if stats is None:
                raise ValidationError("normalized_sum labeling requires normalization stats")
            if stats.metric_ids != pair.metric_ids:
                raise ValidationError("normalization stats were computed for different metrics")
            mean, std = np.asarray(stats.mean), np.asarray(stats.std)
            ra, rb = (ra - mean) / std, (rb - mean) / std
        total = math.fsum(wk * dk for wk, dk in zip(w, (ra - rb).tolist()))
        label = _sign_label(total, votes, policy.tie_policy)
    elif mode == "random_metric":
        if rng is None:
            raise ValidationError("random_metric labeling requires an rng substream")
        k = int(rng.integers(0, pair.k))
        label = _sign_label(votes[k], votes, policy.tie_policy)
    elif mode == "single_metric":
        k = _metric_index(pair.metric_ids, policy.chosen_metric)
        label = _sign_label(votes[k], votes, policy.tie_policy)
    else:  # unreachable: policy validates mode
        raise ValidationError(f"unknown mode {mode!r}")
    if label is SKIP:
        return SKIP
    return replace(pair, votes=votes, consensus=label)


def compute_normalization(pairs: Sequence[PreferencePair]) -> NormalizationStats:
    """Per-metric mean and population std (ddof=0) over all scores of both samples."""
    if len(pairs) < 2:
        raise ValidationError("normalization needs at least two pairs")
    metric_ids = pairs[0].metric_ids
    pooled = np.array(
        [p.scores_a.values for p in pairs] + [p.scores_b.values for p in pairs], dtype=np.float64
    )
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    for m, s in zip(metric_ids, std):
        if not s > 0:
            raise ValidationError(f"metric {m!r} has zero variance; cannot normalize")
    return NormalizationStats(metric_ids, tuple(mean.tolist()), tuple(std.tolist()))


def label_dataset(
    pairs: Sequence[PreferencePair],
    policy: AggregationPolicy,
    rng: Stream | None = None,
    stats: NormalizationStats | None = None,
) -> tuple[list[PreferencePair], int]:
    """Label every pair; returns the kept pairs and the number skipped.

    Random draws come from ``rng.split("label", pair_id)`` so a pair's label is
    independent of the order and company it is labeled in.
    """
    if policy.mode == "normalized_sum" and stats is None:
        stats = compute_normalization(pairs)
    kept, skipped = [], 0
    for p in pairs:
        sub = rng.split("label", p.pair_id) if rng is not None else None
        out = label_pair(p, policy, stats, sub)
        if out is SKIP:
            skipped += 1
        else:
            kept.append(out)
    return kept, skipped
