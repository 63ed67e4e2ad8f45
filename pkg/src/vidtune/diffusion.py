"""Gaussian diffusion: schedules, forward process, posterior, DDIM, guidance.

Tables are indexed by timestep ``t = 0..T`` with the convention
``alpha_bar[0] = 1`` so that ``t - 1`` lookups need no special casing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError
from .functional import mse
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta / alpha / alpha_bar / posterior-variance tables."""

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)

    @property
    def beta(self) -> np.ndarray:
        """``beta[t]`` for t = 0..T, with ``beta[0] = 0``."""
        return np.concatenate([[0.0], self.betas])

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    @property
    def beta_tilde(self) -> np.ndarray:
        ab = self.alpha_bar
        bt = np.zeros(self.T + 1)
        bt[1:] = (1.0 - ab[:-1]) / (1.0 - ab[1:]) * self.betas
        return bt

    def check_t(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ContractError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over ``T`` steps."""
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    betas.setflags(write=False)
    return NoiseSchedule(int(T), float(beta_start), float(beta_end), betas)


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.array(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) < 1:
        raise ConfigurationError("betas must be a non-empty vector")
    if not ((betas > 0) & (betas < 1)).all():
        raise ConfigurationError("every beta must lie in (0, 1)")
    betas.setflags(write=False)
    return NoiseSchedule(len(betas), float(betas[0]), float(betas[-1]), betas)


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    guidance_scale: float = 7.5
    ddim_steps: int = 50
    eta: float = 0.0

    def __post_init__(self):
        if not 1 <= self.ddim_steps <= self.T:
            raise ConfigurationError(f"need 1 <= ddim_steps <= T, got {self.ddim_steps}, T={self.T}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must be in [0, 1], got {self.eta}")

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end)


# ---------------------------------------------------------------------------
# forward process


def q_sample(x0, t: int, eps, s: NoiseSchedule):
    """Draw from ``q(x_t | x_0)``: ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    t = s.check_t(t)
    if np.shape(eps) != np.shape(x0 if not isinstance(x0, Tensor) else x0.data):
        raise ContractError(f"eps shape {np.shape(eps)} differs from x0 shape {np.shape(x0)}")
    ab = s.alpha_bar[t]
    return np.sqrt(ab) * _arr(x0) + np.sqrt(1.0 - ab) * _arr(eps)


def forward_chain_step(x_prev, t: int, noise, s: NoiseSchedule):
    """One Markov transition ``q(x_t | x_{t-1})``."""
    t = s.check_t(t)
    b = s.betas[t - 1]
    return np.sqrt(1.0 - b) * _arr(x_prev) + np.sqrt(b) * _arr(noise)


def posterior_params(x0, xt, t: int, s: NoiseSchedule):
    """Mean and variance of ``q(x_{t-1} | x_t, x_0)``.

    The coefficient on ``x0`` is ``sqrt(ab_{t-1}) beta_t / (1 - ab_t)``,
    the form obtained by completing the square in Bayes' rule.
    """
    t = s.check_t(t)
    ab = s.alpha_bar
    beta_t = s.betas[t - 1]
    if t == 1:
        return np.array(_arr(x0), dtype=np.float64, copy=True), 0.0
    c0 = np.sqrt(ab[t - 1]) * beta_t / (1.0 - ab[t])
    ct = np.sqrt(1.0 - beta_t) * (1.0 - ab[t - 1]) / (1.0 - ab[t])
    return c0 * _arr(x0) + ct * _arr(xt), float(s.beta_tilde[t])


def eps_loss(model, x0, t, eps, cond) -> Tensor:
    """Mean squared error between the true noise and ``model(x_t, t, cond)``.

    ``t`` may be an int or one timestep per leading batch entry.
    """
    x0, eps = _arr(x0), _arr(eps)
    if eps.shape != x0.shape:
        raise ContractError(f"eps shape {eps.shape} differs from x0 shape {x0.shape}")
    tt = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if tt.size == 1:
        xt = q_sample(x0, int(tt[0]), eps, _model_schedule(model))
    else:
        s = _model_schedule(model)
        ab = s.alpha_bar[tt].reshape((-1,) + (1,) * (x0.ndim - 1))
        xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    pred = model(Tensor(xt), t, cond)
    if pred.shape != eps.shape:
        raise ContractError(f"prediction shape {pred.shape} differs from eps shape {eps.shape}")
    return mse(pred, Tensor(eps))


def _model_schedule(model) -> NoiseSchedule:
    s = getattr(model, "schedule", None)
    if s is None:
        raise ContractError("eps_loss model must expose the noise schedule as .schedule")
    return s


# ---------------------------------------------------------------------------
# reverse process


def ddim_step(xt, eps_pred, t: int, t_prev: int, eta: float, s: NoiseSchedule, noise=None):
    """Move from ``x_t`` to ``x_{t_prev}`` with the DDIM update.

    ``x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`` and
    ``x_prev = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev - sigma^2) eps + sigma z``
    where ``sigma = eta * sqrt((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev))``.
    ``t_prev = 0`` lands on the clean sample (``ab_0 = 1``).
    """
    t, t_prev = int(t), int(t_prev)
    if not 0 <= t_prev < t:
        raise ContractError(f"ddim_step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    s.check_t(t)
    xt, eps_pred = _arr(xt), _arr(eps_pred)
    ab = s.alpha_bar
    ab_t, ab_prev = ab[t], ab[t_prev]
    x0_hat = (xt - np.sqrt(1.0 - ab_t) * eps_pred) / np.sqrt(ab_t)
    sigma = 0.0
    if eta > 0.0:
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))
    direction = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_pred
    out = np.sqrt(ab_prev) * x0_hat + direction
    if sigma > 0.0:
        if noise is None:
            raise ContractError("eta > 0 requires a noise tensor")
        out = out + sigma * _arr(noise)
    return out


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniform descending subsequence ``[t_1 > t_2 > ... > t_steps]`` ending at >= 1."""
    if not 1 <= steps <= T:
        raise ConfigurationError(f"need 1 <= steps <= T, got steps={steps}, T={T}")
    stride = T // steps
    ts = [T - i * stride for i in range(steps)]
    return ts


def cfg_combine(eps_uncond, eps_cond, w: float):
    """Classifier-free guidance: ``eps_uncond + w (eps_cond - eps_uncond)``."""
    eu, ec = _arr(eps_uncond), _arr(eps_cond)
    if eu.shape != ec.shape:
        raise ContractError(f"guidance branches differ in shape: {eu.shape} vs {ec.shape}")
    return eu + w * (ec - eu)


def _arr(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


__all__ = [
    "NoiseSchedule",
    "DiffusionConfig",
    "build_schedule",
    "schedule_from_betas",
    "q_sample",
    "forward_chain_step",
    "posterior_params",
    "eps_loss",
    "ddim_step",
    "ddim_timesteps",
    "cfg_combine",
]
