"""Synthetic reward functions over (condition, sample).

Four kinds with deliberately mismatched default scales so that a plain
weighted sum of rewards is dominated by one of them:

    target_proximity  scale * exp(-||x - mu_c||^2)
    compactness       scale * -||x||^2
    axis_preference   scale * x[0]
    ring_fit          scale * -(||x|| - rho)^2
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .prefcore import ScoreVector, ValidationError

KINDS = ("target_proximity", "compactness", "axis_preference", "ring_fit")
DEFAULT_SCALES = {"target_proximity": 1.0, "compactness": 100.0, "axis_preference": 0.01, "ring_fit": 1000.0}


class RewardConfigError(ValidationError):
    pass


def circle_targets(num_conditions: int, radius: float = 2.0, d: int = 2) -> tuple[tuple[float, ...], ...]:
    """Per-condition targets equally spaced on a circle in the first two coordinates."""
    if d < 2:
        return tuple((radius if c % 2 == 0 else -radius,) for c in range(num_conditions))
    out = []
    for c in range(num_conditions):
        angle = 2.0 * math.pi * c / num_conditions
        out.append((radius * math.cos(angle), radius * math.sin(angle)) + (0.0,) * (d - 2))
    return tuple(out)


@dataclass(frozen=True)
class RewardSpec:
    metric_id: str
    kind: str
    scale: float = 1.0
    # target_proximity: "targets" (one point per condition); ring_fit: "radius"
    params: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RewardConfigError(f"unknown reward kind {self.kind!r} for metric {self.metric_id!r}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise RewardConfigError(f"metric {self.metric_id!r}: scale must be positive, got {self.scale}")
        if self.kind == "target_proximity" and "targets" not in self.params:
            raise RewardConfigError(f"metric {self.metric_id!r}: target_proximity needs params['targets']")

    def with_scale(self, scale: float) -> "RewardSpec":
        return RewardSpec(self.metric_id, self.kind, scale, dict(self.params))


@dataclass(frozen=True)
class RewardRegistry:
    specs: tuple[RewardSpec, ...]

    def __post_init__(self):
        specs = tuple(self.specs)
        object.__setattr__(self, "specs", specs)
        if not specs:
            raise RewardConfigError("reward registry is empty")
        ids = [s.metric_id for s in specs]
        if len(set(ids)) != len(ids):
            raise RewardConfigError(f"duplicate metric ids in registry: {ids}")

    @property
    def metric_ids(self) -> tuple[str, ...]:
        return tuple(s.metric_id for s in self.specs)

    def __len__(self) -> int:
        return len(self.specs)

    def index(self, metric_id: str) -> int:
        try:
            return self.metric_ids.index(metric_id)
        except ValueError:
            raise RewardConfigError(f"unknown metric id {metric_id!r}") from None


def default_registry(num_conditions: int = 4, d: int = 2, radius: float = 2.0, ring_radius: float = 1.0,
                     scales: Sequence[float] | None = None) -> RewardRegistry:
    scales = list(scales) if scales is not None else [DEFAULT_SCALES[k] for k in KINDS]
    targets = circle_targets(num_conditions, radius, d)
    params = {
        "target_proximity": {"targets": targets},
        "compactness": {},
        "axis_preference": {},
        "ring_fit": {"radius": ring_radius},
    }
    return RewardRegistry(tuple(
        RewardSpec(f"metric_{i + 1}", kind, scale, params[kind])
        for i, (kind, scale) in enumerate(zip(KINDS, scales))
    ))


def evaluate_batch(spec: RewardSpec, c: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Vectorised reward: ``c`` has shape (n,), ``x`` shape (n, d)."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.int64)
    if spec.kind == "target_proximity":
        targets = np.asarray(spec.params["targets"], dtype=np.float64)
        if c.size and (c.min() < 0 or c.max() >= len(targets)):
            raise RewardConfigError(f"condition out of range for metric {spec.metric_id!r}")
        diff = x - targets[c]
        raw = np.exp(-np.sum(diff * diff, axis=-1))
    elif spec.kind == "compactness":
        raw = -np.sum(x * x, axis=-1)
    elif spec.kind == "axis_preference":
        raw = x[..., 0].copy()
    elif spec.kind == "ring_fit":
        rho = float(spec.params.get("radius", 1.0))
        r = np.sqrt(np.sum(x * x, axis=-1))
        raw = -(r - rho) ** 2
    else:  # unreachable: RewardSpec validates kind
        raise RewardConfigError(f"unknown reward kind {spec.kind!r}")
    return spec.scale * raw


def evaluate(spec: RewardSpec, c: int, x: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValidationError("sample must be finite")
    return float(evaluate_batch(spec, np.array([c]), x[None, :])[0])


def score_all(reg: RewardRegistry, c: int, x: Sequence[float]) -> ScoreVector:
    return ScoreVector(tuple(evaluate(spec, c, x) for spec in reg.specs), reg.metric_ids)


def score_matrix(reg: RewardRegistry, c: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Scores of many samples at once, shape (n, K)."""
    return np.stack([evaluate_batch(spec, c, x) for spec in reg.specs], axis=-1)
