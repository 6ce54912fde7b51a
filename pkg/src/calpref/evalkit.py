"""K x K win-rate evaluation, score summaries and report files."""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from . import seeding
from .diffmodel import SCHEMA_VERSION, DenoiserParams, sample_from_noise
from .errors import ArchMismatch, EmptyScores
from .reward import SyntheticRewards
from .schedule import NoiseSchedule


def _win_counts(model_scores: np.ndarray, base_scores: np.ndarray) -> tuple[int, int, int]:
    base = np.sort(base_scores)
    lo = np.searchsorted(base, model_scores, side="left")
    hi = np.searchsorted(base, model_scores, side="right")
    wins = int(lo.sum())
    ties = int((hi - lo).sum())
    return wins, ties, model_scores.size * base_scores.size


def _half_rate(numerator: int, denominator: int) -> float:
    # compute the >= 1/2 side directly so rate(A, B) + rate(B, A) == 1 exactly
    if 2 * numerator >= denominator:
        return numerator / denominator
    return 1.0 - (denominator - numerator) / denominator


def winrate(model_scores: Sequence[float], base_scores: Sequence[float], kind=None) -> float:
    """Fraction of the K_m x K_b ordered comparisons won by the model; ties count 1/2.

    ``kind`` is accepted for symmetry with the calibration API; comparisons only
    depend on the order of raw scores, which every reward kind preserves.
    """
    m = np.asarray(model_scores, dtype=np.float64).ravel()
    b = np.asarray(base_scores, dtype=np.float64).ravel()
    if m.size == 0 or b.size == 0:
        raise EmptyScores("win-rate needs at least one score on each side")
    wins, ties, total = _win_counts(m, b)
    return _half_rate(2 * wins + ties, 2 * total)


def pooled_winrate(model_groups, base_groups) -> float:
    """All per-prompt K^2 comparisons pooled into one fraction."""
    num = den = 0
    for m, b in zip(model_groups, base_groups):
        w, t, n = _win_counts(np.asarray(m, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel())
        num += 2 * w + t
        den += 2 * n
    if den == 0:
        raise EmptyScores("no comparisons")
    return _half_rate(num, den)


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Multivariate energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| (V-statistic)."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    return float(2 * cdist(x, y).mean() - cdist(x, x).mean() - cdist(y, y).mean())


def draw_samples(params: DenoiserParams, prompts: Sequence[str], k: int, seed: int, stage: int,
                 schedule: NoiseSchedule, steps: int = 50, shift: float | None = None) -> np.ndarray:
    """``len(prompts) x k x d`` samples; the noise for each prompt has its own stream."""
    d = params.arch.input_dim
    idx = params.arch.prompt_index(prompts)
    noise = np.stack([seeding.stage_rng(seed, stage, i).standard_normal((k, d)) for i in idx])
    x = sample_from_noise(params, noise.reshape(-1, d), np.repeat(idx, k), steps, schedule, shift)
    return x.reshape(len(prompts), k, d)


def score_samples(samples: np.ndarray, prompts: Sequence[str], rewards: SyntheticRewards) -> np.ndarray:
    return np.stack([rewards.score(samples[i], p) for i, p in enumerate(prompts)])


def winrate_table(model_scores: np.ndarray, base_scores: np.ndarray) -> np.ndarray:
    """P x L per-prompt win-rates from P x K x L score arrays."""
    p, _, l = model_scores.shape
    return np.array([[winrate(model_scores[i, :, j], base_scores[i, :, j]) for j in range(l)] for i in range(p)])


def mean_over_prompts(table: np.ndarray) -> np.ndarray:
    # fsum is exactly rounded, so the result does not depend on prompt order
    return np.array([math.fsum(table[:, j]) / table.shape[0] for j in range(table.shape[1])])


@dataclass
class EvalReport:
    reward_names: list[str]
    win_rate: np.ndarray
    mean_score: np.ndarray
    base_mean_score: np.ndarray
    per_prompt: np.ndarray
    prompts: list[str]
    k: int
    seed: int
    pooled: bool = False
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def ensemble_win_rate(self) -> float:
        """Average of the per-reward win-rates."""
        return math.fsum(self.win_rate) / len(self.win_rate)

    def to_dict(self) -> dict:
        return {
            "reward_names": list(self.reward_names),
            "win_rate": [float(v) for v in self.win_rate],
            "mean_score": [float(v) for v in self.mean_score],
            "base_mean_score": [float(v) for v in self.base_mean_score],
            "per_prompt": [[float(v) for v in row] for row in self.per_prompt],
            "prompts": list(self.prompts),
            "k": self.k,
            "seed": self.seed,
            "pooled": self.pooled,
            "config_hash": self.config_hash,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["reward_names"], np.array(d["win_rate"]), np.array(d["mean_score"]),
                   np.array(d["base_mean_score"]), np.array(d["per_prompt"]), d["prompts"],
                   d["k"], d["seed"], d.get("pooled", False), d.get("config_hash", ""), d.get("extra", {}))


def summarize(model_scores: np.ndarray, base_scores: np.ndarray, names, prompts, k, seed,
              pooled: bool = False, config_hash: str = "") -> EvalReport:
    table = winrate_table(model_scores, base_scores)
    if pooled:
        rates = np.array([pooled_winrate(model_scores[:, :, j], base_scores[:, :, j]) for j in range(len(names))])
    else:
        rates = mean_over_prompts(table)
    l = model_scores.shape[2]
    return EvalReport(list(names), rates, model_scores.reshape(-1, l).mean(axis=0),
                      base_scores.reshape(-1, l).mean(axis=0), table, list(prompts), k, seed, pooled, config_hash)


def evaluate(model: DenoiserParams, base: DenoiserParams, prompts: Sequence[str], k: int,
             rewards: SyntheticRewards, seed: int, schedule: NoiseSchedule, steps: int = 50,
             shift: float | None = None, pooled: bool = False, config_hash: str = "") -> EvalReport:
    """Win-rate of ``model`` against ``base`` with K samples per prompt from each.

    Both models start from the same noise, so a model evaluated against itself
    scores exactly 1/2 on every reward.
    """
    if model.arch != base.arch:
        raise ArchMismatch("model and base must share an architecture")
    prompts = list(prompts)
    if not prompts:
        raise ValueError("need at least one prompt")
    xm = draw_samples(model, prompts, k, seed, seeding.EVALUATE, schedule, steps, shift)
    xb = draw_samples(base, prompts, k, seed, seeding.EVALUATE, schedule, steps, shift)
    sm = score_samples(xm, prompts, rewards)
    sb = score_samples(xb, prompts, rewards)
    return summarize(sm, sb, rewards.names, prompts, k, seed, pooled, config_hash)


# --- report files -------------------------------------------------------------------

def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    buf.write(f"# schema_version={SCHEMA_VERSION} config_hash={report.config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["reward", "win_rate", "mean_score"])
    for name, rate, score in zip(report.reward_names, report.win_rate, report.mean_score):
        w.writerow([name, repr(float(rate)), repr(float(score))])
    return buf.getvalue()


def winrate_svg(report: EvalReport, width: int = 480, height: int = 300) -> str:
    """Static bar chart of per-reward win-rates with a dashed line at 0.5."""
    names = list(report.reward_names)
    pad_l, pad_r, pad_t, pad_b = 50, 20, 30, 50
    plot_w = width - pad_l - pad_r
    plot_h = height - pad_t - pad_b
    slot = plot_w / max(len(names), 1)
    bar_w = slot * 0.6
    y_of = lambda v: pad_t + plot_h * (1.0 - v)  # noqa: E731
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f"<!-- schema_version={SCHEMA_VERSION} config_hash={report.config_hash} -->",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">win-rate vs base</text>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + plot_h}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t + plot_h}" x2="{pad_l + plot_w}" y2="{pad_t + plot_h}" stroke="black"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = y_of(tick)
        out.append(f'<text x="{pad_l - 6}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{tick:.2f}</text>')
    for i, (name, rate) in enumerate(zip(names, report.win_rate)):
        x = pad_l + i * slot + (slot - bar_w) / 2
        y = y_of(float(rate))
        out.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" height="{pad_t + plot_h - y:.1f}" fill="#4878a8"/>')
        out.append(f'<text x="{x + bar_w / 2:.1f}" y="{y - 4:.1f}" text-anchor="middle" font-family="sans-serif" font-size="10">{float(rate):.3f}</text>')
        out.append(f'<text x="{x + bar_w / 2:.1f}" y="{pad_t + plot_h + 16:.1f}" text-anchor="middle" font-family="sans-serif" font-size="11">{name}</text>')
    y = y_of(0.5)
    out.append(f'<line x1="{pad_l}" y1="{y:.1f}" x2="{pad_l + plot_w}" y2="{y:.1f}" stroke="gray" stroke-dasharray="4 3"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(report: EvalReport, out_dir) -> list[Path]:
    """Write ``report.csv`` and ``winrates.svg``; nothing is written on failure."""
    if not report.prompts:
        raise ValueError("report has no prompts")
    if not report.reward_names:
        raise ValueError("report has no rewards")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    contents = {"report.csv": report_csv(report), "winrates.svg": winrate_svg(report)}
    staged = []
    try:
        for name, text in contents.items():
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.")
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            staged.append((Path(tmp), out_dir / name))
    except OSError:
        for tmp, _ in staged:
            tmp.unlink(missing_ok=True)
        raise
    for tmp, final in staged:
        tmp.replace(final)
    return [final for _, final in staged]


def read_report_csv(path) -> list[tuple[str, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if rows[0] != ["reward", "win_rate", "mean_score"]:
        raise ValueError(f"unexpected header {rows[0]}")
    return [(r[0], float(r[1]), float(r[2])) for r in rows[1:]]
