"""Experiment configuration: an INI file read with :mod:`configparser`.

Every key has a default, so an empty file is a valid config.  ``load_config``
returns an :class:`ExperimentConfig` whose ``text`` is the fully defaulted
file; writing ``text`` back and reloading it reproduces the same config.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, replace
from typing import Callable

from .aggregate import AggregationPolicy
from .diffusion import Arch, MixtureData, NoiseSchedule, PretrainConfig, linear_schedule
from .dpo import DpoConfig
from .evalkit import EvalConfig
from .optim import OptimizerConfig
from .pipeline import ModeSpec
from .prefcore import ValidationError
from .rewards import DEFAULT_SCALES, KINDS, RewardRegistry, RewardSpec, circle_targets
from .trainer import TrainConfig


class ConfigError(ValidationError):
    """A config value is missing, malformed or inconsistent; message names the field path."""


DEFAULTS: dict[str, dict[str, str]] = {
    "experiment": {
        "seed": "0",
        "modes": "balanced, vanilla, normalized, single:metric_1, single:metric_2",
    },
    "data": {
        "d": "2",
        "num_conditions": "4",
        "target_radius": "2.0",
        "std": "0.5",
        "means": "",
        "stds": "",
    },
    "rewards": {"metrics": "metric_1, metric_2, metric_3, metric_4"},
    "diffusion": {
        "T_steps": "50",
        "time_frequencies": "4",
        "hidden": "64",
        "beta_start": "",
        "beta_end": "",
        "omega_mode": "constant_one",
        "init_out_scale": "0.1",
    },
    "pretrain": {
        "steps": "3000",
        "batch_size": "256",
        "learning_rate": "0.002",
        "optimizer": "adaptive_moments",
    },
    "pairs": {"per_condition": "250"},
    "aggregation": {
        "tie_policy": "first_metric",
        "weights": "",
        "margins": "",
        "paper_faithful_votes": "false",
    },
    "dpo": {"beta": "1.0", "weights": ""},
    "train": {
        "steps": "1500",
        "batch_size": "64",
        "learning_rate": "0.0001",
        "warmup_steps": "100",
        "ref_update_interval": "100",
        "optimizer": "adaptive_moments",
        "beta1": "0.9",
        "beta2": "0.999",
        "eps": "1e-8",
        "weight_decay": "0.0",
    },
    "eval": {"n_seeds": "5", "prompts_per_condition": "50", "tie_value": "0.5", "paired": "true"},
}

_DEFAULT_REWARDS = {
    f"metric_{i + 1}": {"kind": kind, "scale": repr(DEFAULT_SCALES[kind])}
    for i, kind in enumerate(KINDS)
}
_DEFAULT_REWARDS["metric_1"]["targets"] = ""
_DEFAULT_REWARDS["metric_4"]["radius"] = "1.0"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    modes: tuple[ModeSpec, ...]
    data: MixtureData
    registry: RewardRegistry
    arch: Arch
    schedule: NoiseSchedule
    omega_mode: str
    init_out_scale: float
    pretrain: PretrainConfig
    pairs_per_condition: int
    aggregation: AggregationPolicy
    dpo: DpoConfig
    train: TrainConfig
    eval: EvalConfig
    text: str

    @property
    def hash(self) -> str:
        return config_hash(self.text)

    def header(self, seed: int | None = None) -> dict[str, str]:
        return {"config": self.hash, "seed": str(self.seed if seed is None else seed)}

    def train_config(self, spec: ModeSpec) -> TrainConfig:
        return replace(
            self.train,
            dpo=spec.dpo_config(self.dpo),
            ref_update_interval=self.train.ref_update_interval if spec.refresh else None,
        )


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _get(cp: configparser.ConfigParser, section: str, key: str, conv: Callable, what: str = ""):
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except (ValueError, ValidationError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {what or exc}") from None


def _floats(raw: str) -> tuple[float, ...] | None:
    raw = raw.strip()
    if not raw:
        return None
    return tuple(float(v) for v in raw.split(","))


def _points(raw: str) -> tuple[tuple[float, ...], ...] | None:
    raw = raw.strip()
    if not raw:
        return None
    return tuple(tuple(float(v) for v in chunk.replace(",", " ").split()) for chunk in raw.split(";"))


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _interval(raw: str) -> int | None:
    low = raw.strip().lower()
    if low in ("", "none", "off", "inf", "disabled"):
        return None
    return int(low)


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # keep key case (T_steps)
    return cp


def parse_config_text(text: str, seed: int | None = None) -> ExperimentConfig:
    user = _parser()
    try:
        user.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None

    cp = _parser()
    for section, values in DEFAULTS.items():
        cp[section] = dict(values)
    for section in user.sections():
        if section.startswith("rewards."):
            continue
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in user[section].items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            cp[section][key] = value
    if seed is not None:
        cp["experiment"]["seed"] = str(seed)

    metric_ids = [m.strip() for m in cp["rewards"]["metrics"].split(",") if m.strip()]
    if not metric_ids:
        raise ConfigError("[rewards] metrics: at least one metric is required")
    for mid in metric_ids:
        sec = f"rewards.{mid}"
        if user.has_section(sec):
            cp[sec] = dict(user[sec])
        elif mid in _DEFAULT_REWARDS:
            cp[sec] = dict(_DEFAULT_REWARDS[mid])
        else:
            raise ConfigError(f"[rewards] metric {mid!r} has no [{sec}] section")
    for sec in user.sections():
        if sec.startswith("rewards.") and sec[len("rewards."):] not in metric_ids:
            raise ConfigError(f"[{sec}] is not listed in [rewards] metrics")

    return _build(cp, metric_ids)


def _build(cp: configparser.ConfigParser, metric_ids: list[str]) -> ExperimentConfig:
    seed = _get(cp, "experiment", "seed", int)
    modes = _get(cp, "experiment", "modes",
                 lambda r: tuple(ModeSpec.parse(m) for m in r.split(",") if m.strip()))

    d = _get(cp, "data", "d", int)
    n_cond = _get(cp, "data", "num_conditions", int)
    if d < 1 or n_cond < 1:
        raise ConfigError("[data] d and num_conditions must be positive")
    means = _get(cp, "data", "means", _points) or circle_targets(n_cond, _get(cp, "data", "target_radius", float), d)
    std = _get(cp, "data", "std", float)
    stds = _get(cp, "data", "stds", _points) or tuple((std,) * d for _ in range(n_cond))
    if len(means) != n_cond or len(stds) != n_cond:
        raise ConfigError(f"[data] means/stds must list {n_cond} points (num_conditions)")
    if any(len(m) != d for m in means) or any(len(s) != d for s in stds):
        raise ConfigError(f"[data] means/stds points must have d = {d} coordinates")
    data = MixtureData(means, stds)

    specs = []
    for mid in metric_ids:
        sec = f"rewards.{mid}"
        kind = cp.get(sec, "kind", fallback="")
        params = {}
        if kind == "target_proximity":
            targets = _get(cp, sec, "targets", _points) if cp.has_option(sec, "targets") else None
            targets = targets or means
            if len(targets) != n_cond or any(len(t) != d for t in targets):
                raise ConfigError(f"[{sec}] targets must list {n_cond} points of dimension {d}")
            params["targets"] = targets
        elif kind == "ring_fit":
            params["radius"] = _get(cp, sec, "radius", float) if cp.has_option(sec, "radius") else 1.0
        scale = _get(cp, sec, "scale", float) if cp.has_option(sec, "scale") else 1.0
        try:
            specs.append(RewardSpec(mid, kind, scale, params))
        except ValidationError as exc:
            raise ConfigError(f"[{sec}] {exc}") from None
    registry = RewardRegistry(tuple(specs))
    k = len(registry)

    T = _get(cp, "diffusion", "T_steps", int)
    arch = Arch(d=d, m=_get(cp, "diffusion", "time_frequencies", int), C=n_cond,
                h=_get(cp, "diffusion", "hidden", int), T_steps=T)
    bs = _get(cp, "diffusion", "beta_start", lambda r: float(r) if r.strip() else None)
    be = _get(cp, "diffusion", "beta_end", lambda r: float(r) if r.strip() else None)
    schedule = _get(cp, "diffusion", "T_steps", lambda r: linear_schedule(T, bs, be))
    omega_mode = cp.get("diffusion", "omega_mode")
    if omega_mode not in ("constant_one", "snr"):
        raise ConfigError(f"[diffusion] omega_mode = {omega_mode!r}: expected constant_one or snr")

    pretrain = PretrainConfig(
        steps=_get(cp, "pretrain", "steps", int),
        batch_size=_get(cp, "pretrain", "batch_size", int),
        learning_rate=_get(cp, "pretrain", "learning_rate", float),
        omega_mode=omega_mode,
        optimizer=_get(cp, "pretrain", "optimizer", lambda r: OptimizerConfig(kind=r.strip())),
    )

    agg = _get(cp, "aggregation", "tie_policy", lambda r: AggregationPolicy(
        tie_policy=r.strip(),
        weights=_get(cp, "aggregation", "weights", _floats),
        margins=_get(cp, "aggregation", "margins", _floats),
        paper_faithful_votes=_get(cp, "aggregation", "paper_faithful_votes", _bool),
    ))
    for key, val in (("weights", agg.weights), ("margins", agg.margins)):
        if val is not None and len(val) != k:
            raise ConfigError(f"[aggregation] {key}: {len(val)} values for K = {k} metrics")
    for spec in modes:
        if spec.metric is not None and spec.metric not in registry.metric_ids:
            raise ConfigError(f"[experiment] modes: unknown metric {spec.metric!r}")

    dpo_cfg = _get(cp, "dpo", "beta", lambda r: DpoConfig(beta=float(r), weights=_get(cp, "dpo", "weights", _floats)))
    if dpo_cfg.weights is not None and len(dpo_cfg.weights) != k:
        raise ConfigError(f"[dpo] weights: {len(dpo_cfg.weights)} values for K = {k} metrics")

    opt = _get(cp, "train", "optimizer", lambda r: OptimizerConfig(
        kind=r.strip(), beta1=float(cp["train"]["beta1"]), beta2=float(cp["train"]["beta2"]),
        eps=float(cp["train"]["eps"]), weight_decay=float(cp["train"]["weight_decay"])))
    train = _get(cp, "train", "steps", lambda r: TrainConfig(
        steps=int(r),
        batch_size=_get(cp, "train", "batch_size", int),
        learning_rate=_get(cp, "train", "learning_rate", float),
        warmup_steps=_get(cp, "train", "warmup_steps", int),
        ref_update_interval=_get(cp, "train", "ref_update_interval", _interval),
        dpo=dpo_cfg,
        optimizer=opt,
    ))

    ppc = _get(cp, "eval", "prompts_per_condition", int)
    if ppc < 1:
        raise ConfigError("[eval] prompts_per_condition must be positive")
    prompts = tuple(c for _ in range(ppc) for c in range(n_cond))
    evalcfg = _get(cp, "eval", "n_seeds", lambda r: EvalConfig(
        registry, prompts, int(r), _get(cp, "eval", "tie_value", float), _get(cp, "eval", "paired", _bool)))

    per_cond = _get(cp, "pairs", "per_condition", int)
    if per_cond < 1:
        raise ConfigError("[pairs] per_condition must be positive")

    buf = io.StringIO()
    cp.write(buf)
    return ExperimentConfig(
        seed=seed, modes=modes, data=data, registry=registry, arch=arch, schedule=schedule,
        omega_mode=omega_mode, init_out_scale=_get(cp, "diffusion", "init_out_scale", float),
        pretrain=pretrain, pairs_per_condition=per_cond, aggregation=agg, dpo=dpo_cfg,
        train=train, eval=evalcfg, text=buf.getvalue(),
    )


def load_config(path=None, seed: int | None = None) -> ExperimentConfig:
    text = ""
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_config_text(text, seed)
