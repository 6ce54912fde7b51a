"""Noise schedules, log-SNR algebra, timestep shift and loss weighting.

Two schedule families are supported:

``rectified_flow``
    alpha(t) = 1 - t, sigma(t) = t, lambda(t) = 2 log((1 - t) / t).
    The network head predicts the velocity ``eps - x0``.

``ddpm_sqrt``
    The "scaled linear" discrete DDPM schedule: per-step betas are a linear
    interpolation in sqrt-space between ``beta_0`` and ``beta_T_minus_1``,
    alpha_bar is their cumulative product of ``1 - beta``. Continuous t maps
    onto the discrete index ``t * (T - 1)`` with log-SNR interpolated linearly
    between grid points. The network head predicts ``eps``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np
from scipy.special import expit

from .errors import InvalidShift, OutOfRange

T_MIN = 1e-4
T_MAX = 1.0 - 1e-4
# log-SNR training range for rectified flow (lambda ~ U[-10, 10])
RF_LAMBDA_RANGE = (-10.0, 10.0)


@lru_cache(maxsize=8)
def _ddpm_log_snr_grid(beta_0: float, beta_last: float, num_steps: int) -> np.ndarray:
    k = np.arange(num_steps, dtype=np.float64)
    sqrt_b = np.sqrt(beta_0) + k / (num_steps - 1) * (np.sqrt(beta_last) - np.sqrt(beta_0))
    betas = sqrt_b**2
    log_alpha_bar = np.cumsum(np.log1p(-betas))
    # log(abar / (1 - abar)) computed without cancellation
    grid = log_alpha_bar - np.log(-np.expm1(log_alpha_bar))
    grid.setflags(write=False)
    return grid


@dataclass(frozen=True)
class NoiseSchedule:
    kind: Literal["ddpm_sqrt", "rectified_flow"] = "rectified_flow"
    t_min: float = T_MIN
    t_max: float = T_MAX
    beta_0: float = 0.00085
    beta_T_minus_1: float = 0.012
    num_discrete_steps: int = 1000

    def __post_init__(self):
        if self.kind not in ("ddpm_sqrt", "rectified_flow"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 < self.t_min < self.t_max < 1.0:
            raise ValueError("need 0 < t_min < t_max < 1")
        if self.kind == "ddpm_sqrt" and self.num_discrete_steps < 2:
            raise ValueError("ddpm_sqrt needs at least 2 discrete steps")

    @property
    def head(self) -> str:
        """Quantity predicted by the network: ``"eps"`` or ``"velocity"``."""
        return "velocity" if self.kind == "rectified_flow" else "eps"

    def clamp(self, t):
        return np.clip(t, self.t_min, self.t_max)

    def lam(self, t):
        """log(alpha^2 / sigma^2) without range checks (vectorised)."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "rectified_flow":
            return 2.0 * (np.log1p(-t) - np.log(t))
        grid = _ddpm_log_snr_grid(self.beta_0, self.beta_T_minus_1, self.num_discrete_steps)
        pos = t * (self.num_discrete_steps - 1)
        return np.interp(pos, np.arange(self.num_discrete_steps, dtype=np.float64), grid)

    def lambda_prime(self, t):
        """d lambda / dt.

        Exact for rectified flow. For ``ddpm_sqrt`` this is the slope of the
        piecewise-linear interpolant; losses never use it and treat it as -1.
        """
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "rectified_flow":
            return -2.0 / (t * (1.0 - t))
        grid = _ddpm_log_snr_grid(self.beta_0, self.beta_T_minus_1, self.num_discrete_steps)
        n = self.num_discrete_steps
        idx = np.clip(np.floor(t * (n - 1)).astype(int), 0, n - 2)
        return (grid[idx + 1] - grid[idx]) * (n - 1)

    def alpha(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "rectified_flow":
            return 1.0 - t
        return np.sqrt(expit(self.lam(t)))

    def sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "rectified_flow":
            return t
        return np.sqrt(expit(-self.lam(t)))

    def t_from_lambda(self, lam):
        """Inverse of ``lam`` (rectified flow only)."""
        if self.kind != "rectified_flow":
            raise NotImplementedError("t_from_lambda is only defined for rectified_flow")
        return expit(-0.5 * np.asarray(lam, dtype=np.float64))


@dataclass(frozen=True)
class WeightingSpec:
    kind: Literal["constant", "sigmoid"] = "sigmoid"
    bias: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "sigmoid"):
            raise ValueError(f"unknown weighting kind {self.kind!r}")


def log_snr(schedule: NoiseSchedule, t):
    """Log signal-to-noise ratio of ``schedule`` at ``t``.

    Raises OutOfRange when any ``t`` lies outside ``[t_min, t_max]``.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t_arr)) or np.any(t_arr < schedule.t_min) or np.any(t_arr > schedule.t_max):
        raise OutOfRange(f"t must lie in [{schedule.t_min}, {schedule.t_max}], got {t}")
    out = schedule.lam(t_arr)
    return float(out) if np.ndim(out) == 0 else out


def loss_weight(spec: WeightingSpec, lam):
    """Per-timestep weight on the eps-prediction error: 1 or sigmoid(b - lambda)."""
    lam = np.asarray(lam, dtype=np.float64)
    if spec.kind == "constant":
        out = np.ones_like(lam)
    else:
        out = expit(spec.bias - lam)
    return float(out) if out.ndim == 0 else out


def flow_weight(b: float, lam):
    """1 / (exp((lam - b)/2) + exp(-(lam - b)/2)), the velocity-loss counterpart
    of sigmoid(b - lam) on the eps loss."""
    u = np.abs(np.asarray(lam, dtype=np.float64) - b)
    e = np.exp(-0.5 * u)
    out = e / (1.0 + e * e)
    return float(out) if out.ndim == 0 else out


def head_weight(schedule: NoiseSchedule, spec: WeightingSpec, lam):
    """Weight applied to the squared error of the network's native head.

    eps heads use ``loss_weight``; velocity heads use ``flow_weight`` for the
    sigmoid kind and 1 for the constant kind.
    """
    if schedule.head == "velocity" and spec.kind == "sigmoid":
        return flow_weight(spec.bias, lam)
    return loss_weight(spec, lam)


def shift_timestep(t, s: float):
    """t * s / (1 + t (s - 1)); s > 1 moves the grid toward high noise."""
    if not s > 0:
        raise InvalidShift(f"shift scale must be positive, got {s}")
    t = np.asarray(t, dtype=np.float64)
    # same as 1 + t (s - 1), written so both endpoints map exactly onto themselves
    ts = t * s
    out = ts / (ts + (1.0 - t))
    return float(out) if out.ndim == 0 else out


def draw_train_times(schedule: NoiseSchedule, rng: np.random.Generator, n: int) -> np.ndarray:
    """Timesteps for preference fine-tuning.

    ``ddpm_sqrt``: t ~ U(t_min, t_max). ``rectified_flow``: lambda ~ U[-10, 10]
    mapped back to t.
    """
    if schedule.kind == "rectified_flow":
        lam = rng.uniform(*RF_LAMBDA_RANGE, size=n)
        return schedule.t_from_lambda(lam)
    return rng.uniform(schedule.t_min, schedule.t_max, size=n)


def draw_pretrain_times(schedule: NoiseSchedule, rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(schedule.t_min, schedule.t_max, size=n)
