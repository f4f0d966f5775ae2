"""A small conditional denoising diffusion model with hand-written gradients.

Forward process: x_t = alpha_t * x0 + sigma_t * eps with alpha_t = sqrt(abar_t)
and sigma_t = sqrt(1 - abar_t).  The denoiser is a two-hidden-layer tanh MLP
over [x_t, sin/cos time features, one-hot condition] that predicts eps.

Reverse step (ancestral sampling, eps parameterisation):

    beta_t   = 1 - abar_t / abar_{t-1}
    mean     = (x_t - beta_t / sigma_t * eps_hat) / sqrt(1 - beta_t)
    var      = beta_t * (1 - abar_{t-1}) / (1 - abar_t)      # posterior variance
    x_{t-1}  = mean + sqrt(var) * z

``var`` is zero at t = 1, so the final step is noiseless.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .optim import OptimizerConfig, OptimizerState, optimizer_step
from .prefcore import Stream, ValidationError, atomic_write_text

log = logging.getLogger(__name__)

OMEGA_MODES = ("constant_one", "snr")
CKPT_MAGIC = "#votedpo-ckpt"
CKPT_VERSION = "v1"


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


# --------------------------------------------------------------------------
# noise schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alpha_bar: np.ndarray  # index 0..T, alpha_bar[0] == 1

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise ValidationError("alpha_bar needs at least two entries (t = 0 and t = 1)")
        if ab[0] != 1.0 or not np.all(np.diff(ab) < 0) or not ab[-1] > 0:
            raise ValidationError("alpha_bar must start at 1, decrease strictly and stay positive")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T_steps(self) -> int:
        return self.alpha_bar.size - 1

    def alpha(self, t):
        return np.sqrt(self.alpha_bar[t])

    def sigma(self, t):
        return np.sqrt(1.0 - self.alpha_bar[t])

    def snr(self, t):
        ab = self.alpha_bar[t]
        return ab / (1.0 - ab)

    def beta(self, t):
        return 1.0 - self.alpha_bar[t] / self.alpha_bar[np.asarray(t) - 1]

    def posterior_variance(self, t):
        t = np.asarray(t)
        return self.beta(t) * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 1 or t.max() > self.T_steps):
            raise ValidationError(f"timestep out of range 1..{self.T_steps}")
        return t


def linear_schedule(T_steps: int = 50, beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    """Per-step variances linear in t, cumulative product for abar.

    Defaults rescale the usual (1e-4, 0.02) at T=1000 to the requested length,
    with the last variance capped at 0.5 so short chains stay well conditioned.
    """
    if T_steps < 1:
        raise ValidationError("T_steps must be positive")
    beta_start = 0.1 / T_steps if beta_start is None else beta_start
    beta_end = min(20.0 / T_steps, 0.5) if beta_end is None else beta_end
    betas = np.linspace(beta_start, beta_end, T_steps) if T_steps > 1 else np.array([beta_start])
    if not (np.all(betas > 0) and np.all(betas < 1)):
        raise ValidationError("per-step variances must lie in (0, 1)")
    return NoiseSchedule(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))


def forward_noise(schedule: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """``alpha_t * x0 + sigma_t * eps``; broadcasts over a leading batch axis."""
    t = schedule.check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    a, s = schedule.alpha(t), schedule.sigma(t)
    if x0.ndim > 1:
        a, s = a[..., None], s[..., None]
    return a * x0 + s * eps


def omega(schedule: NoiseSchedule, t, mode: str) -> np.ndarray:
    t = np.asarray(t)
    if mode == "constant_one":
        return np.ones(t.shape)
    if mode == "snr":
        return schedule.snr(t)
    raise ValidationError(f"unknown omega mode {mode!r}; expected one of {OMEGA_MODES}")


# --------------------------------------------------------------------------
# denoiser parameters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Arch:
    d: int = 2
    m: int = 4  # number of time frequencies; 2m time features
    C: int = 4
    h: int = 64
    T_steps: int = 50

    @property
    def in_dim(self) -> int:
        return self.d + 2 * self.m + self.C

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [
            ("W1", (self.in_dim, self.h)), ("b1", (self.h,)),
            ("W2", (self.h, self.h)), ("b2", (self.h,)),
            ("W3", (self.h, self.d)), ("b3", (self.d,)),
        ]

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for _, s in self.shapes())


class DenoiserParams:
    """All weights of the denoiser stored in one flat float64 vector.

    Layer arrays (``W1``, ``b1`` ... ``b3``) are reshaped views into ``vec``, in
    the order the checkpoint format uses.
    """

    def __init__(self, arch: Arch, vec: np.ndarray | None = None):
        self.arch = arch
        if vec is None:
            vec = np.zeros(arch.n_params)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (arch.n_params,):
            raise ValidationError(f"expected {arch.n_params} parameters for {arch}, got shape {vec.shape}")
        self.vec = vec
        offset = 0
        for name, shape in arch.shapes():
            size = math.prod(shape)
            setattr(self, name, vec[offset:offset + size].reshape(shape))
            offset += size

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.arch, self.vec.copy())

    def with_vec(self, vec: np.ndarray) -> "DenoiserParams":
        return DenoiserParams(self.arch, vec)

    def __eq__(self, other) -> bool:
        return (isinstance(other, DenoiserParams) and self.arch == other.arch
                and np.array_equal(self.vec, other.vec))

    def __repr__(self) -> str:
        return f"DenoiserParams({self.arch}, |vec|={self.vec.size})"


def init_params(arch: Arch, rng: Stream, out_scale: float = 0.1) -> DenoiserParams:
    p = DenoiserParams(arch)
    p.W1[...] = rng.split("W1").normal(p.W1.shape) / math.sqrt(arch.in_dim)
    p.W2[...] = rng.split("W2").normal(p.W2.shape) / math.sqrt(arch.h)
    p.W3[...] = out_scale * rng.split("W3").normal(p.W3.shape) / math.sqrt(arch.h)
    return p


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def time_features(t, arch: Arch) -> np.ndarray:
    tau = np.asarray(t, dtype=np.float64)[:, None] / arch.T_steps
    freqs = math.pi * 2.0 ** np.arange(arch.m) / 2.0
    ang = tau * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _inputs(arch: Arch, x_t, t, c) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    t = np.asarray(t)
    c = np.asarray(c, dtype=np.int64)
    if x_t.ndim != 2 or x_t.shape[1] != arch.d:
        raise ValidationError(f"x_t must have shape (n, {arch.d}), got {x_t.shape}")
    n = x_t.shape[0]
    if t.shape != (n,) or c.shape != (n,):
        raise ValidationError("t and c must be 1-d with one entry per row of x_t")
    if n and (c.min() < 0 or c.max() >= arch.C):
        raise ValidationError(f"condition out of range 0..{arch.C - 1}")
    onehot = np.zeros((n, arch.C))
    onehot[np.arange(n), c] = 1.0
    return np.concatenate([x_t, time_features(t, arch), onehot], axis=1)


def forward(params: DenoiserParams, x_t, t, c) -> tuple[np.ndarray, tuple]:
    inp = _inputs(params.arch, x_t, t, c)
    a1 = np.tanh(inp @ params.W1 + params.b1)
    a2 = np.tanh(a1 @ params.W2 + params.b2)
    out = a2 @ params.W3 + params.b3
    return out, (inp, a1, a2)


def backward(params: DenoiserParams, cache: tuple, dout: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product: gradient of sum(dout * out) w.r.t. the flat params."""
    inp, a1, a2 = cache
    g = DenoiserParams(params.arch)
    g.W3[...] = a2.T @ dout
    g.b3[...] = dout.sum(axis=0)
    dz2 = (dout @ params.W3.T) * (1.0 - a2 * a2)
    g.W2[...] = a1.T @ dz2
    g.b2[...] = dz2.sum(axis=0)
    dz1 = (dz2 @ params.W2.T) * (1.0 - a1 * a1)
    g.W1[...] = inp.T @ dz1
    g.b1[...] = dz1.sum(axis=0)
    return g.vec


def denoise(params: DenoiserParams, x_t, t, c) -> np.ndarray:
    """eps prediction; accepts a single (d,) sample or an (n, d) batch."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim == 1:
        return forward(params, x_t[None, :], np.array([t]), np.array([c]))[0][0]
    return forward(params, x_t, t, c)[0]


# --------------------------------------------------------------------------
# pretraining loss
# --------------------------------------------------------------------------


def dm_loss_and_grad_at(params: DenoiserParams, x0, c, t, eps, schedule: NoiseSchedule,
                        omega_mode: str = "constant_one") -> tuple[float, np.ndarray]:
    """Weighted denoising loss for explicit timesteps and noises."""
    if params.arch.T_steps != schedule.T_steps:
        raise ValidationError("model and schedule disagree on T_steps")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    n = x0.shape[0]
    if n == 0:
        raise ValidationError("empty batch")
    t = schedule.check_t(t)
    x_t = forward_noise(schedule, x0, t, eps)
    out, cache = forward(params, x_t, t, c)
    resid = eps - out
    w = omega(schedule, t, omega_mode)
    loss = float(np.mean(w * np.sum(resid * resid, axis=1)))
    dout = (-2.0 / n) * w[:, None] * resid
    return loss, backward(params, cache, dout)


def dm_loss_and_grad(params: DenoiserParams, x0, c, schedule: NoiseSchedule, omega_mode: str,
                     rng: Stream) -> tuple[float, np.ndarray]:
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    t = rng.split("t").integers(1, schedule.T_steps + 1, size=n)
    eps = rng.split("eps").normal(x0.shape)
    return dm_loss_and_grad_at(params, x0, c, t, eps, schedule, omega_mode)


# --------------------------------------------------------------------------
# synthetic pretraining data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureData:
    """Condition c draws x0 ~ N(means[c], diag(stds[c]**2)); conditions are uniform."""

    means: tuple[tuple[float, ...], ...]
    stds: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if len(self.means) != len(self.stds) or not self.means:
            raise ValidationError("mixture needs one mean and one std vector per condition")
        if any(len(m) != len(s) for m, s in zip(self.means, self.stds)):
            raise ValidationError("mixture mean/std dimensions differ")

    @property
    def num_conditions(self) -> int:
        return len(self.means)

    @property
    def d(self) -> int:
        return len(self.means[0])

    def draw(self, rng: Stream, n: int) -> tuple[np.ndarray, np.ndarray]:
        c = rng.split("c").integers(0, self.num_conditions, size=n)
        z = rng.split("z").normal((n, self.d))
        means = np.asarray(self.means)[c]
        stds = np.asarray(self.stds)[c]
        return means + stds * z, c


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 256
    learning_rate: float = 2e-3
    omega_mode: str = "constant_one"
    optimizer: OptimizerConfig = OptimizerConfig()


def pretrain(params: DenoiserParams, data: MixtureData, schedule: NoiseSchedule, cfg: PretrainConfig,
             rng: Stream) -> tuple[DenoiserParams, np.ndarray]:
    """Fit the denoiser to ``data``; returns the trained params and per-step losses."""
    vec = params.vec.copy()
    state = OptimizerState()
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        srng = rng.split("step", step)
        x0, c = data.draw(srng.split("data"), cfg.batch_size)
        loss, grad = dm_loss_and_grad(params.with_vec(vec), x0, c, schedule, cfg.omega_mode, srng.split("noise"))
        if not math.isfinite(loss):
            raise NumericalError(f"pretraining loss became {loss} at step {step}")
        losses[step] = loss
        vec, state = optimizer_step(vec, grad, state, cfg.optimizer, cfg.learning_rate)
        if step % 500 == 0:
            log.debug("pretrain step %d loss %.5f", step, loss)
    return params.with_vec(vec), losses


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def sampling_noise(schedule: NoiseSchedule, d: int, rng: Stream) -> np.ndarray:
    """Row 0 is x_T, row j >= 1 is the injected noise of reverse step t = T - j + 1."""
    return rng.normal((schedule.T_steps, d))


def sample_batch(params: DenoiserParams, schedule: NoiseSchedule, conditions, noises) -> np.ndarray:
    """Ancestral sampling for many chains at once; ``noises`` has shape (n, T, d)."""
    if params.arch.T_steps != schedule.T_steps:
        raise ValidationError("model and schedule disagree on T_steps")
    noises = np.asarray(noises, dtype=np.float64)
    c = np.asarray(conditions, dtype=np.int64)
    n, T = c.shape[0], schedule.T_steps
    if noises.shape != (n, T, params.arch.d):
        raise ValidationError(f"noise array must have shape {(n, T, params.arch.d)}, got {noises.shape}")
    x = noises[:, 0, :].copy()
    for t in range(T, 0, -1):
        tt = np.full(n, t)
        eps_hat = forward(params, x, tt, c)[0]
        beta = schedule.beta(t)
        x = (x - beta / schedule.sigma(t) * eps_hat) / math.sqrt(1.0 - beta)
        if t > 1:
            x = x + math.sqrt(schedule.posterior_variance(t)) * noises[:, T - t + 1, :]
    return x


def sample(params: DenoiserParams, schedule: NoiseSchedule, c: int, rng: Stream) -> np.ndarray:
    noise = sampling_noise(schedule, params.arch.d, rng)
    return sample_batch(params, schedule, np.array([c]), noise[None])[0]


def sample_many(params: DenoiserParams, schedule: NoiseSchedule, conditions: Sequence[int],
                streams: Sequence[Stream]) -> np.ndarray:
    """One chain per (condition, stream); equal to calling :func:`sample` on each."""
    noises = np.stack([sampling_noise(schedule, params.arch.d, s) for s in streams]) if streams else \
        np.zeros((0, schedule.T_steps, params.arch.d))
    return sample_batch(params, schedule, np.asarray(conditions, dtype=np.int64), noises)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(params: DenoiserParams, path, extra: dict | None = None) -> None:
    """Text checkpoint: one header line, then one parameter per line in layer order."""
    a = params.arch
    head = [CKPT_MAGIC, CKPT_VERSION, f"d={a.d}", f"m={a.m}", f"C={a.C}", f"h={a.h}", f"T={a.T_steps}"]
    head += [f"{k}={v}" for k, v in (extra or {}).items()]
    body = "\n".join(repr(float(v)) for v in params.vec)
    atomic_write_text(path, " ".join(head) + "\n" + body + ("\n" if body else ""))


def load_checkpoint(path) -> DenoiserParams:
    with open(os.fspath(path), encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) < 7 or header[0] != CKPT_MAGIC or header[1] != CKPT_VERSION:
            raise ValidationError(f"{path}: not a checkpoint file")
        fields = dict(tok.split("=", 1) for tok in header[2:])
        try:
            arch = Arch(int(fields["d"]), int(fields["m"]), int(fields["C"]), int(fields["h"]), int(fields["T"]))
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"{path}: bad checkpoint header ({exc})") from None
        vec = np.array([float(line) for line in fh if line.strip()], dtype=np.float64)
    return DenoiserParams(arch, vec)
