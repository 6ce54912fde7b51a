"""Desk-scale benchmarks: per-prompt Gaussian mixtures plus analytic rewards.

The shipped ``conflicting_rewards`` benchmark gives every prompt three modes on
a circle. Two rewards disagree about which mode is best:

* ``align``     -- negative distance to the prompt's own target mode (the mode
  whose projection on the preferred direction is the median of the three)
* ``aesthetic`` -- projection onto a fixed, prompt-independent direction

The mode with the highest projection is far from the target, so pushing one
reward alone tends to cost the other; the lowest-projection mode is bad on
both, which leaves room for a policy that improves both at once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .reward import BT, AnalyticReward, RewardKind, SyntheticRewards


@dataclass
class Mixture:
    means: np.ndarray      # K x d
    covs: np.ndarray       # K x d x d
    weights: np.ndarray    # K

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k, d = self.means.shape
        covs = np.asarray(self.covs, dtype=np.float64)
        if covs.ndim == 1:
            covs = np.stack([np.eye(d) * c for c in covs])
        elif covs.ndim == 2:
            covs = np.broadcast_to(covs, (k, d, d)).copy()
        self.covs = covs
        w = np.asarray(self.weights, dtype=np.float64)
        self.weights = w / w.sum()
        self.chol = np.linalg.cholesky(self.covs)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self.chol[comp], z)


@dataclass
class ToyBenchmark:
    name: str
    prompts: list[str]
    mixtures: dict[str, Mixture]
    rewards: SyntheticRewards

    @property
    def dim(self) -> int:
        return next(iter(self.mixtures.values())).dim

    def sample_data(self, rng: np.random.Generator, prompt_idx: np.ndarray) -> np.ndarray:
        """Clean training samples for a batch of prompt indices."""
        x = np.empty((len(prompt_idx), self.dim))
        for i in np.unique(prompt_idx):
            mask = prompt_idx == i
            x[mask] = self.mixtures[self.prompts[i]].sample(rng, int(mask.sum()))
        return x

    def conflict_probe(self, prompt_id: str) -> np.ndarray:
        """A point where the gradients of the first two rewards point apart."""
        target = self.rewards.targets[prompt_id]
        u = np.zeros(self.dim)
        u[0] = 1.0
        direction = next((r.direction for r in self.rewards.rewards if r.form == "direction"), None)
        if direction is not None:
            u = np.asarray(direction, dtype=np.float64)
            u = u / np.linalg.norm(u)
        return np.asarray(target) + 0.5 * u


def conflicting_rewards(n_prompts: int = 32, dim: int = 2, seed: int = 0, radius: float = 2.0,
                        mode_std: float = 0.35, align_scale: float = 2.0, aesthetic_scale: float = 2.0,
                        align_kind: RewardKind = BT) -> ToyBenchmark:
    rng = np.random.default_rng([seed, 0xC0FFEE])
    u = np.zeros(dim)
    u[0] = 1.0
    prompts = [f"p{i:02d}" for i in range(n_prompts)]
    mixtures, targets = {}, {}
    for p in prompts:
        if dim == 2:
            base = rng.uniform(0, 2 * np.pi)
            gaps = rng.uniform(0.6, 1.4, size=3)
            angles = base + np.cumsum(2 * np.pi * gaps / gaps.sum())
            means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        else:
            v = rng.standard_normal((3, dim))
            means = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
        order = np.argsort(means @ u)
        means = means[order]            # low, median, high projection
        mixtures[p] = Mixture(means, np.full(3, mode_std**2), np.ones(3))
        targets[p] = means[1].copy()
    if align_kind.name == "power_ratio":
        align = AnalyticReward("align", "mode_likelihood", align_kind, scale=align_scale)
    else:
        align = AnalyticReward("align", "mode_distance", align_kind, scale=align_scale)
    rewards = SyntheticRewards(
        [align, AnalyticReward("aesthetic", "direction", BT, scale=aesthetic_scale, direction=tuple(u))],
        targets,
    )
    return ToyBenchmark("conflicting_rewards", prompts, mixtures, rewards)


def single_gaussian(mean, cov, prompt_id: str = "p00") -> ToyBenchmark:
    mean = np.asarray(mean, dtype=np.float64)
    mix = Mixture(mean[None, :], np.asarray(cov, dtype=np.float64)[None], np.ones(1))
    rewards = SyntheticRewards([AnalyticReward("align", "mode_distance")], {prompt_id: mean})
    return ToyBenchmark("single_gaussian", [prompt_id], {prompt_id: mix}, rewards)


BENCHMARKS = {"conflicting_rewards": conflicting_rewards}
