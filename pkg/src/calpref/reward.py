"""Raw reward scores, pairwise win-rates and calibrated rewards.

A calibrated reward is the average Bradley-Terry win-rate of a candidate
against the other N - 1 candidates generated for the same prompt. Columns of
the calibrated matrix are bounded in (0, 1) and always average to 1/2, which
makes rewards with very different raw ranges comparable before ensembling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.special import expit

from .errors import DegenerateSet, EmptyReference, NonPositiveScore, ShapeMismatch, UnknownPrompt

# rows per block when building the N x N win matrix for large candidate sets
_BLOCK = 512


@dataclass(frozen=True)
class RewardKind:
    """How raw scores of one reward are turned into pairwise preferences.

    ``bt_logit``      sigmoid(r_i - r_j)
    ``power_ratio``   r_i^a / (r_i^a + r_j^a), scores must be positive
    ``bounded_score`` bounded ratings (e.g. 1-10 aesthetics), used as BT logits
    """

    name: Literal["bt_logit", "power_ratio", "bounded_score"] = "bt_logit"
    alpha: float = 1.0

    def __post_init__(self):
        if self.name not in ("bt_logit", "power_ratio", "bounded_score"):
            raise ValueError(f"unknown reward kind {self.name!r}")
        if self.name == "power_ratio" and not self.alpha > 0:
            raise ValueError("power_ratio temperature must be positive")

    def to_dict(self) -> dict:
        if self.name == "power_ratio":
            return {"name": self.name, "alpha": self.alpha}
        return {"name": self.name}

    @classmethod
    def from_dict(cls, d) -> "RewardKind":
        if isinstance(d, str):
            return cls(d)
        return cls(d["name"], float(d.get("alpha", 1.0)))


BT = RewardKind("bt_logit")


def _as_kind(kind) -> RewardKind:
    if isinstance(kind, RewardKind):
        return kind
    return RewardKind.from_dict(kind)


def _logits(scores: np.ndarray, kind: RewardKind) -> np.ndarray:
    """Map raw scores to the additive scale on which win-rate is sigmoid(diff)."""
    if kind.name == "power_ratio":
        if np.any(scores <= 0):
            raise NonPositiveScore("power_ratio rewards need strictly positive scores")
        return kind.alpha * np.log(scores)
    return scores


def _win(diff: np.ndarray) -> np.ndarray:
    # sigmoid(|d|) >= 1/2, so 1 - p is exact and W_ij + W_ji == 1 bit-for-bit
    p = expit(np.abs(diff))
    return np.where(diff >= 0, p, 1.0 - p)


def pairwise_winrate(r_i: float, r_j: float, kind=BT) -> float:
    """Probability that the candidate scored ``r_i`` beats the one scored ``r_j``."""
    kind = _as_kind(kind)
    z = _logits(np.array([r_i, r_j], dtype=np.float64), kind)
    return float(_win(np.asarray(z[0] - z[1])))


def win_matrix(scores: Sequence[float], kind=BT) -> np.ndarray:
    """Full N x N pairwise win-rate matrix; the diagonal holds 1/2."""
    z = _logits(np.asarray(scores, dtype=np.float64), _as_kind(kind))
    return _win(z[:, None] - z[None, :])


@dataclass
class CandidateSet:
    prompt_id: str
    samples: np.ndarray | list
    scores: np.ndarray
    reward_names: list[str]
    reward_kinds: list[RewardKind]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim == 1:
            self.scores = self.scores[:, None]
        if self.scores.ndim != 2:
            raise ShapeMismatch("scores must be an N x L matrix")
        self.reward_kinds = [_as_kind(k) for k in self.reward_kinds]
        n, l = self.scores.shape
        if len(self.reward_names) != l or len(self.reward_kinds) != l:
            raise ShapeMismatch(f"{l} score columns but {len(self.reward_names)} names / {len(self.reward_kinds)} kinds")
        if len(self.samples) != n:
            raise ShapeMismatch(f"{len(self.samples)} samples but {n} score rows")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"prompt {self.prompt_id!r}: non-finite raw scores")

    @property
    def n(self) -> int:
        return self.scores.shape[0]


@dataclass
class CalibratedScores:
    prompt_id: str
    calibrated: np.ndarray
    ensemble: np.ndarray
    weights: np.ndarray = field(default=None)

    @property
    def n(self) -> int:
        return self.calibrated.shape[0]


def calibrate_column(scores: Sequence[float], kind=BT) -> np.ndarray:
    """Mean win-rate of each candidate against the other N - 1 candidates."""
    z = _logits(np.asarray(scores, dtype=np.float64), _as_kind(kind))
    n = z.shape[0]
    if n < 2:
        raise DegenerateSet(f"calibration needs at least 2 candidates, got {n}")
    out = np.empty(n)
    for lo in range(0, n, _BLOCK):
        block = _win(z[lo:lo + _BLOCK, None] - z[None, :])
        # the diagonal contributes exactly 0.5
        out[lo:lo + _BLOCK] = (block.sum(axis=1) - 0.5) / (n - 1)
    return out


def ensemble_weights(num_rewards: int, weights=None) -> np.ndarray:
    if weights is None:
        return np.full(num_rewards, 1.0 / num_rewards)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (num_rewards,) or np.any(w < 0) or not w.sum() > 0:
        raise ValueError(f"ensemble weights must be {num_rewards} non-negative numbers with positive sum")
    return w / w.sum()


def calibrate(cset: CandidateSet, weights=None) -> CalibratedScores:
    """Calibrate every reward column of ``cset`` and average them.

    ``weights`` optionally replaces the uniform 1/L ensemble average.
    """
    if cset.n < 2:
        raise DegenerateSet(f"calibration needs at least 2 candidates, got {cset.n}", cset.prompt_id)
    cols = [calibrate_column(cset.scores[:, j], k) for j, k in enumerate(cset.reward_kinds)]
    cal = np.stack(cols, axis=1)
    w = ensemble_weights(cal.shape[1], weights)
    if np.all(w == w[0]):
        ens = cal.mean(axis=1)
    else:
        ens = cal @ w
    return CalibratedScores(cset.prompt_id, cal, ens, w)


def expected_winrate_mc(x_score: float, ref_scores: Sequence[float], kind=BT) -> float:
    """Monte Carlo estimate of the win-rate of one candidate against a reference pool."""
    ref = np.asarray(ref_scores, dtype=np.float64).ravel()
    if ref.size == 0:
        raise EmptyReference("need at least one reference score")
    kind = _as_kind(kind)
    z = _logits(np.concatenate([[x_score], ref]), kind)
    return float(np.mean(_win(z[0] - z[1:])))


# --- synthetic analytic rewards -------------------------------------------------

@dataclass(frozen=True)
class AnalyticReward:
    """A closed-form reward on R^d standing in for a learned reward model.

    forms
    -----
    ``mode_distance``   -scale * ||x - target(prompt)||; 0 at the prompt's target
    ``direction``       scale * <u, x> for a fixed unit vector u (prompt-agnostic)
    ``norm_penalty``    -scale * ||x||^2
    ``mode_likelihood`` sigmoid(scale * (1 - ||x - target||^2)), a positive
                        probability-like score meant for ``power_ratio``
    """

    name: str
    form: Literal["mode_distance", "direction", "norm_penalty", "mode_likelihood"]
    kind: RewardKind = BT
    scale: float = 1.0
    direction: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.form not in ("mode_distance", "direction", "norm_penalty", "mode_likelihood"):
            raise ValueError(f"unknown reward form {self.form!r}")
        if self.form == "direction":
            if self.direction is None:
                raise ValueError("direction reward needs a direction vector")
            u = np.asarray(self.direction, dtype=np.float64)
            if not np.linalg.norm(u) > 0:
                raise ValueError("direction must be non-zero")

    def __call__(self, x: np.ndarray, target: np.ndarray | None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.form == "mode_distance":
            return -self.scale * np.linalg.norm(x - target, axis=1)
        if self.form == "direction":
            u = np.asarray(self.direction, dtype=np.float64)
            return self.scale * (x @ (u / np.linalg.norm(u)))
        if self.form == "norm_penalty":
            return -self.scale * np.sum(x * x, axis=1)
        return expit(self.scale * (1.0 - np.sum((x - target) ** 2, axis=1)))

    def grad(self, x: np.ndarray, target: np.ndarray | None) -> np.ndarray:
        """Analytic gradient with respect to ``x`` (single point)."""
        x = np.asarray(x, dtype=np.float64)
        if self.form == "mode_distance":
            diff = x - target
            return -self.scale * diff / np.linalg.norm(diff)
        if self.form == "direction":
            u = np.asarray(self.direction, dtype=np.float64)
            return self.scale * u / np.linalg.norm(u)
        if self.form == "norm_penalty":
            return -2.0 * self.scale * x
        s = float(self(x, target)[0])
        return s * (1 - s) * self.scale * (-2.0) * (x - target)


@dataclass
class SyntheticRewards:
    """L analytic rewards plus the per-prompt target points they refer to."""

    rewards: list[AnalyticReward]
    targets: dict[str, np.ndarray]

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.rewards]

    @property
    def kinds(self) -> list[RewardKind]:
        return [r.kind for r in self.rewards]

    def score(self, samples: np.ndarray, prompt_id: str) -> np.ndarray:
        """N x L raw score matrix for samples generated under ``prompt_id``."""
        if prompt_id not in self.targets:
            raise UnknownPrompt(prompt_id)
        target = np.asarray(self.targets[prompt_id], dtype=np.float64)
        return np.stack([r(samples, target) for r in self.rewards], axis=1)


def synth_rewards(rewards: SyntheticRewards, sample, prompt_id: str) -> list[float]:
    """Raw scores of a single sample under every configured reward."""
    return rewards.score(np.atleast_2d(sample), prompt_id)[0].tolist()
