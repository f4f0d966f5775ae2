"""Preference losses for the diffusion denoiser.

The per-pair log-ratio surrogate at a sampled timestep t is

    l = -[(|eps_a - eps_theta(x_t^a)|^2 - |eps_a - eps_ref(x_t^a)|^2)
          - (|eps_b - eps_theta(x_t^b)|^2 - |eps_b - eps_ref(x_t^b)|^2)]

(positive when theta denoises A better than the reference does, relative to B).
Constant factors of the ELBO are folded into ``beta``.

    balanced:  mean_i  -log sigmoid(beta * s_i * l_i)
    direct:    mean_i  sum_k -w_k log sigmoid(beta * s_ik * l_i)

A zero vote s_ik contributes w_k * log 2 and no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .diffusion import DenoiserParams, NoiseSchedule, backward, forward, forward_noise
from .prefcore import PreferencePair, ValidationError

LOSS_MODES = ("balanced", "vanilla", "normalized", "random", "single", "direct")


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 1.0
    loss_mode: str = "balanced"
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError(f"beta must be positive, got {self.beta}")
        if self.loss_mode not in LOSS_MODES:
            raise ValidationError(f"unknown loss mode {self.loss_mode!r}; expected one of {LOSS_MODES}")


@dataclass
class ModelPair:
    theta: DenoiserParams
    ref: DenoiserParams

    def __post_init__(self):
        if self.theta.arch != self.ref.arch:
            raise ValidationError("theta and ref architectures differ")


@dataclass
class PairBatch:
    """Everything the surrogate needs for n pairs at their sampled timesteps.

    ``s`` holds consensus labels and ``votes`` the (n, K) per-metric votes;
    either may be None when the loss in use does not read it.
    """

    x_a: np.ndarray
    x_b: np.ndarray
    c: np.ndarray
    t: np.ndarray
    eps_a: np.ndarray
    eps_b: np.ndarray
    s: np.ndarray | None = None
    votes: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x_a.shape[0]

    def swapped(self) -> "PairBatch":
        return PairBatch(
            self.x_b, self.x_a, self.c, self.t, self.eps_b, self.eps_a,
            None if self.s is None else -self.s,
            None if self.votes is None else -self.votes,
        )


def pair_batch(pairs: Sequence[PreferencePair], t, eps_a, eps_b) -> PairBatch:
    """Assemble a :class:`PairBatch` from dataset records and drawn noise."""
    s = votes = None
    if all(p.consensus is not None for p in pairs):
        s = np.array([p.consensus.s for p in pairs], dtype=np.float64)
    if all(p.votes is not None for p in pairs):
        votes = np.array([p.votes for p in pairs], dtype=np.float64).reshape(len(pairs), -1)
    return PairBatch(
        np.array([p.sample_a for p in pairs], dtype=np.float64),
        np.array([p.sample_b for p in pairs], dtype=np.float64),
        np.array([p.condition for p in pairs], dtype=np.int64),
        np.asarray(t, dtype=np.int64),
        np.asarray(eps_a, dtype=np.float64),
        np.asarray(eps_b, dtype=np.float64),
        s, votes,
    )


# --------------------------------------------------------------------------
# Bradley-Terry
# --------------------------------------------------------------------------


def bt_probability(r_w: float, r_l: float) -> float:
    return float(expit(r_w - r_l))


def bt_loss(pairs) -> float:
    """Mean negative log-likelihood of the winners over (r_w, r_l) pairs."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if arr.shape[0] == 0:
        raise ValidationError("bt_loss needs at least one pair")
    return float(-np.mean(log_expit(arr[:, 0] - arr[:, 1])))


# --------------------------------------------------------------------------
# surrogate log-ratio
# --------------------------------------------------------------------------


def l_theta_batch(models: ModelPair, schedule: NoiseSchedule,
                  batch: PairBatch) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Per-pair surrogate values and a function mapping dL/dl to dL/dtheta."""
    n = len(batch)
    if n == 0:
        raise ValidationError("empty pair batch")
    x_a = forward_noise(schedule, batch.x_a, batch.t, batch.eps_a)
    x_b = forward_noise(schedule, batch.x_b, batch.t, batch.eps_b)
    x = np.concatenate([x_a, x_b])
    tt = np.concatenate([batch.t, batch.t])
    cc = np.concatenate([batch.c, batch.c])
    eps = np.concatenate([batch.eps_a, batch.eps_b])

    out_theta, cache = forward(models.theta, x, tt, cc)
    out_ref, _ = forward(models.ref, x, tt, cc)
    r_theta = eps - out_theta
    r_ref = eps - out_ref
    err_theta = np.sum(r_theta * r_theta, axis=1)
    err_ref = np.sum(r_ref * r_ref, axis=1)
    gap = err_theta - err_ref
    l = -(gap[:n] - gap[n:])

    def vjp(dl: np.ndarray) -> np.ndarray:
        dl = np.asarray(dl, dtype=np.float64)
        # dl/dout_a = 2 (eps_a - out_a); dl/dout_b = -2 (eps_b - out_b)
        sign = np.concatenate([dl, -dl])[:, None]
        return backward(models.theta, cache, 2.0 * sign * r_theta)

    return l, vjp


def l_theta(models: ModelPair, schedule: NoiseSchedule, batch: PairBatch) -> tuple[float, np.ndarray]:
    """Surrogate value and gradient for a single-pair batch."""
    if len(batch) != 1:
        raise ValidationError("l_theta expects exactly one pair; use l_theta_batch for more")
    l, vjp = l_theta_batch(models, schedule, batch)
    return float(l[0]), vjp(np.ones(1))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def balanced_loss_and_grad(models: ModelPair, schedule: NoiseSchedule, batch: PairBatch,
                           beta: float) -> tuple[float, np.ndarray]:
    if batch.s is None:
        raise ValidationError("balanced loss needs consensus labels for every pair")
    s = np.asarray(batch.s, dtype=np.float64)
    if not np.all(np.abs(s) == 1):
        raise ValidationError("consensus labels must be +1 or -1")
    l, vjp = l_theta_batch(models, schedule, batch)
    z = beta * s * l
    loss = float(-np.mean(log_expit(z)))
    dl = -beta * s * expit(-z) / len(batch)
    return loss, vjp(dl)


def dpo_loss_and_grad(models: ModelPair, schedule: NoiseSchedule, batch: PairBatch,
                      beta: float) -> tuple[float, np.ndarray]:
    """Single-preference loss with sample A always the winner."""
    l, vjp = l_theta_batch(models, schedule, batch)
    z = beta * l
    return float(-np.mean(log_expit(z))), vjp(-beta * expit(-z) / len(batch))


def vanilla_loss_and_grad(models: ModelPair, schedule: NoiseSchedule, batch: PairBatch, beta: float,
                          weights: Sequence[float] | None = None) -> tuple[float, np.ndarray]:
    if batch.votes is None:
        raise ValidationError("vanilla loss needs per-metric votes for every pair")
    votes = np.asarray(batch.votes, dtype=np.float64)
    k = votes.shape[1]
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise ValidationError(f"{w.size} weights for K={k} votes")
    l, vjp = l_theta_batch(models, schedule, batch)
    z = beta * votes * l[:, None]
    loss = float(-np.mean(log_expit(z) @ w))
    dl = -(beta * votes * expit(-z)) @ w / len(batch)
    return loss, vjp(dl)
