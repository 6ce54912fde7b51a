"""DPO, IPO and calibrated-regression preference losses for the toy denoiser.

All three share the same computation: noise both members of each pair at a
shared timestep with independent noise draws, compute the implicit reward
``r = -w(lambda) (err_theta - err_ref)`` for each, and feed
``u = beta * (r_plus - r_minus)`` to a scalar link:

    dpo   -log sigmoid(u)
    ipo   (1 - u)^2
    capo  (delta_R - u)^2
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .diffmodel import DenoiserParams, NoisedBatch, _check_same_arch, backward, squared_errors
from .errors import MissingDeltaR
from .schedule import NoiseSchedule, WeightingSpec, draw_train_times, head_weight


@dataclass
class PairBatch:
    x_plus: np.ndarray
    x_minus: np.ndarray
    prompt_idx: np.ndarray
    delta_r: np.ndarray | None
    t: np.ndarray
    eps_plus: np.ndarray
    eps_minus: np.ndarray
    schedule: NoiseSchedule

    def __len__(self):
        return self.x_plus.shape[0]

    def halves(self) -> NoisedBatch:
        """Positives followed by negatives as one noised batch."""
        return NoisedBatch(
            np.concatenate([self.x_plus, self.x_minus]),
            np.concatenate([self.eps_plus, self.eps_minus]),
            np.concatenate([self.t, self.t]),
            np.concatenate([self.prompt_idx, self.prompt_idx]),
            self.schedule,
        )

    def with_delta(self, delta_r) -> "PairBatch":
        d = np.broadcast_to(np.asarray(delta_r, dtype=np.float64), (len(self),)).copy()
        return PairBatch(self.x_plus, self.x_minus, self.prompt_idx, d, self.t,
                         self.eps_plus, self.eps_minus, self.schedule)

    def swapped(self) -> "PairBatch":
        """Exchange the roles of the two members (noise travels with its sample)."""
        d = None if self.delta_r is None else -self.delta_r
        return PairBatch(self.x_minus, self.x_plus, self.prompt_idx, d, self.t,
                         self.eps_minus, self.eps_plus, self.schedule)


def make_pair_batch(x_plus, x_minus, prompt_idx, delta_r, schedule: NoiseSchedule,
                    rng: np.random.Generator, t=None) -> PairBatch:
    """One shared t per pair; eps+ and eps- drawn independently."""
    x_plus = np.atleast_2d(np.asarray(x_plus, dtype=np.float64))
    x_minus = np.atleast_2d(np.asarray(x_minus, dtype=np.float64))
    b = x_plus.shape[0]
    if t is None:
        t = draw_train_times(schedule, rng, b)
    eps_plus = rng.standard_normal(x_plus.shape)
    eps_minus = rng.standard_normal(x_minus.shape)
    d = None if delta_r is None else np.broadcast_to(np.asarray(delta_r, dtype=np.float64), (b,)).copy()
    return PairBatch(x_plus, x_minus, np.broadcast_to(np.asarray(prompt_idx, dtype=np.int64), (b,)).copy(),
                     d, np.asarray(t, dtype=np.float64), eps_plus, eps_minus, schedule)


def _dpo_link(u, _):
    return np.logaddexp(0.0, -u), -expit(-u)


def _capo_link(u, delta):
    resid = delta - u
    return resid * resid, -2.0 * resid


def _preference_loss(theta: DenoiserParams, ref: DenoiserParams, batch: PairBatch, beta: float,
                     spec: WeightingSpec, link, target, with_grad: bool = True):
    if not beta > 0:
        raise ValueError("beta must be positive")
    _check_same_arch(theta, ref)
    nb = batch.halves()
    b = len(batch)
    w = head_weight(batch.schedule, spec, nb.lam)
    err_ref = squared_errors(ref, nb)
    if with_grad:
        err, resid, cache = squared_errors(theta, nb, keep=True)
    else:
        err = squared_errors(theta, nb)
    r = -w * (err - err_ref)
    u = beta * (r[:b] - r[b:])
    per_pair, dldu = link(u, target)
    loss = float(np.mean(per_pair))
    if not with_grad:
        return loss, None
    # d loss / d err_theta for positives and negatives
    up = np.concatenate([dldu * beta * -w[:b], dldu * beta * w[b:]]) / b
    grad = backward(theta, cache, 2.0 * up[:, None] * resid)
    return loss, grad


def dpo_loss(theta, ref, batch: PairBatch, beta: float, spec: WeightingSpec, with_grad: bool = True):
    """Mean of -log sigmoid(beta (r+ - r-)) and its gradient."""
    return _preference_loss(theta, ref, batch, beta, spec, _dpo_link, None, with_grad)


def capo_loss(theta, ref, batch: PairBatch, beta: float, spec: WeightingSpec, with_grad: bool = True):
    """Mean of (delta_R - beta (r+ - r-))^2 and its gradient."""
    if batch.delta_r is None or not np.all(np.isfinite(batch.delta_r)):
        raise MissingDeltaR("calibrated reward gaps are required for every pair")
    return _preference_loss(theta, ref, batch, beta, spec, _capo_link, batch.delta_r, with_grad)


def ipo_loss(theta, ref, batch: PairBatch, beta: float, spec: WeightingSpec, with_grad: bool = True):
    """Mean of (1 - beta (r+ - r-))^2: the calibrated loss with every gap set to 1."""
    return capo_loss(theta, ref, batch.with_delta(1.0), beta, spec, with_grad)


OBJECTIVES = {"dpo": dpo_loss, "ipo": ipo_loss, "capo": capo_loss}
