"""Preference-pair selection from calibrated scores.

Three strategies are available:

* ``best_worst`` -- top-1 vs worst-1 under a single calibrated reward
* ``sum``        -- top-1 vs worst-1 under the ensemble of calibrated rewards
* ``frs``        -- positives from the upper Pareto front, negatives from the
  lower Pareto front (frontier-based rejection sampling)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import DegenerateSet, DimensionMismatch, EmptyPool
from .reward import CalibratedScores

log = logging.getLogger(__name__)


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """Strict Pareto dominance for maximisation: a >= b everywhere, > somewhere."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise DimensionMismatch(f"cannot compare reward vectors of shapes {a.shape} and {b.shape}")
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_front(points, sense: Literal["max", "min"] = "max") -> list[int]:
    """Indices of the non-dominated points (rank-0 front), in ascending order.

    Uses the domination-count pass of fast non-dominated sorting, vectorised
    over all ordered pairs. ``sense="min"`` gives the lower front.
    """
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if sense == "min":
        p = -p
    elif sense != "max":
        raise ValueError(f"sense must be 'max' or 'min', got {sense!r}")
    ge = np.all(p[:, None, :] >= p[None, :, :], axis=2)
    gt = np.any(p[:, None, :] > p[None, :, :], axis=2)
    # dom[i, j]: i dominates j
    dom = ge & gt
    counts = dom.sum(axis=0)
    return np.flatnonzero(counts == 0).tolist()


@dataclass
class PairPool:
    prompt_id: str
    positives: list[int]
    negatives: list[int]
    strategy: str
    gap_values: np.ndarray
    reward_index: int | None = None
    # valid (i+, i-) pairs; filled lazily
    _pairs: np.ndarray | None = field(default=None, repr=False)

    def delta(self, i_plus: int, i_minus: int) -> float:
        return float(self.gap_values[i_plus] - self.gap_values[i_minus])

    @property
    def pairs(self) -> np.ndarray:
        """All (i+, i-) index pairs with a non-negative gap, in lexicographic order."""
        if self._pairs is None:
            pos = np.asarray(self.positives, dtype=np.int64)
            neg = np.asarray(self.negatives, dtype=np.int64)
            pp, nn = np.meshgrid(pos, neg, indexing="ij")
            pp, nn = pp.ravel(), nn.ravel()
            keep = self.gap_values[pp] - self.gap_values[nn] >= 0
            self._pairs = np.stack([pp[keep], nn[keep]], axis=1)
        return self._pairs

    def pair_records(self):
        for i, j in self.pairs:
            yield int(i), int(j), self.delta(i, j)


def _extreme_pair(values: np.ndarray, prompt_id: str, what: str) -> tuple[int, int]:
    hi, lo = int(np.argmax(values)), int(np.argmin(values))
    if values[hi] == values[lo]:
        raise DegenerateSet(f"all candidates tie under {what}", prompt_id)
    return hi, lo


def _unique_row_fronts(cal: np.ndarray) -> tuple[list[int], list[int]]:
    # identical rows share one representative so they land on the same fronts
    uniq, inverse = np.unique(cal, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    upper_u = set(pareto_front(uniq, "max"))
    lower_u = set(pareto_front(uniq, "min"))
    both = upper_u & lower_u
    upper = [i for i in range(cal.shape[0]) if inverse[i] in upper_u - both]
    lower = [i for i in range(cal.shape[0]) if inverse[i] in lower_u - both]
    return upper, lower


def select_pairs(cal: CalibratedScores, strategy: str = "frs", reward_index: int = 0) -> PairPool:
    """Build the positive and negative index sets for one prompt.

    ``frs`` falls back to ``sum`` when duplicate removal empties either front
    or when no positive/negative combination has a non-negative ensemble gap;
    ``sum`` and ``best_worst`` raise DegenerateSet when every candidate ties.
    """
    scores = np.asarray(cal.calibrated, dtype=np.float64)
    n, num_rewards = scores.shape
    if n < 2:
        raise DegenerateSet("need at least 2 candidates", cal.prompt_id)
    if np.all(scores == scores[0]):
        raise DegenerateSet("all calibrated rows are identical", cal.prompt_id)

    if strategy == "best_worst":
        if not 0 <= reward_index < num_rewards:
            raise IndexError(f"reward index {reward_index} out of range for {num_rewards} rewards")
        col = scores[:, reward_index]
        hi, lo = _extreme_pair(col, cal.prompt_id, f"reward {reward_index}")
        return PairPool(cal.prompt_id, [hi], [lo], "best_worst", col, reward_index)

    if strategy == "frs" and num_rewards >= 2:
        upper, lower = _unique_row_fronts(scores)
        if upper and lower:
            pool = PairPool(cal.prompt_id, upper, lower, "frs", np.asarray(cal.ensemble))
            if len(pool.pairs):
                return pool
        log.info("prompt %s: frontier selection empty after filtering, using sum", cal.prompt_id)
    elif strategy == "frs":
        hi, lo = _extreme_pair(scores[:, 0], cal.prompt_id, "reward 0")
        return PairPool(cal.prompt_id, [hi], [lo], "best_worst", scores[:, 0], 0)
    elif strategy != "sum":
        raise ValueError(f"unknown strategy {strategy!r}")

    ens = np.asarray(cal.ensemble, dtype=np.float64)
    hi, lo = _extreme_pair(ens, cal.prompt_id, "the reward ensemble")
    return PairPool(cal.prompt_id, [hi], [lo], "sum", ens)


def select_all(cals: Sequence[CalibratedScores], strategy: str = "frs", reward_index: int = 0) -> list[PairPool]:
    """Run ``select_pairs`` per prompt, dropping degenerate prompts with a log line."""
    pools = []
    for cal in cals:
        try:
            pools.append(select_pairs(cal, strategy, reward_index))
        except DegenerateSet as exc:
            log.warning("dropping %s", exc)
    return pools


def sample_pair(pool: PairPool, rng_seed, counter: int = 0) -> tuple[int, int, float]:
    """Draw one (i+, i-, delta_R) uniformly from the pool's valid pairs.

    ``rng_seed`` may be an integer (combined with ``counter`` so that each draw
    is reproducible on its own) or a ``numpy.random.Generator``.
    """
    pairs = pool.pairs
    if len(pairs) == 0:
        raise EmptyPool(f"prompt {pool.prompt_id!r} has no valid pairs")
    if isinstance(rng_seed, np.random.Generator):
        rng = rng_seed
    else:
        rng = np.random.default_rng([int(rng_seed), int(counter)])
    i, j = pairs[rng.integers(len(pairs))]
    return int(i), int(j), pool.delta(i, j)
