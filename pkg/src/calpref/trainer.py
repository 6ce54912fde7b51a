"""Reference pretraining, candidate generation and preference fine-tuning."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import seeding
from .diffmodel import (SCHEMA_VERSION, Arch, DenoiserParams, NoisedBatch, denoise_grad,
                        init_params)
from .errors import DegenerateSet, DivergenceDetected, NonConvergence
from .evalkit import draw_samples, energy_distance, mean_over_prompts, score_samples, winrate_table
from .objectives import OBJECTIVES, make_pair_batch
from .pairing import PairPool
from .reward import CandidateSet
from .schedule import NoiseSchedule, WeightingSpec, draw_pretrain_times
from .toy import ToyBenchmark

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, n: int, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def warmup_lr(lr: float, step: int, warmup_steps: int) -> float:
    """Learning rate for update number ``step`` (1-based); linear ramp then flat."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr * step / warmup_steps
    return lr


# --- pretraining --------------------------------------------------------------------

@dataclass
class PretrainConfig:
    lr: float = 2e-3
    warmup_steps: int = 200
    batch_size: int = 256
    max_steps: int = 20000
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    prompt_dim: int = 8
    # mean per-prompt energy distance that counts as converged
    energy_threshold: float | None = 0.05
    eval_samples: int = 256
    sampler_steps: int = 50
    shift: float | None = None
    # lr is cosine-annealed to lr * final_lr_frac after warmup when set
    final_lr_frac: float | None = 0.05


@dataclass
class PretrainResult:
    params: DenoiserParams
    losses: np.ndarray
    energy: float | None


def pretrain_loss_and_grad(params: DenoiserParams, batch: NoisedBatch):
    """Constant-weighted denoising loss: mean squared error of the network head."""
    b = len(batch)
    grad, err = denoise_grad(params, batch, np.full(b, 1.0 / b))
    return float(err.mean()), grad


def pretrain_lr(cfg: PretrainConfig, step: int) -> float:
    lr = warmup_lr(cfg.lr, step, cfg.warmup_steps)
    if cfg.final_lr_frac is None or step < cfg.warmup_steps:
        return lr
    span = max(cfg.max_steps - cfg.warmup_steps, 1)
    frac = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.lr * (cfg.final_lr_frac + (1 - cfg.final_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))


def pretrain(cfg: PretrainConfig, bench: ToyBenchmark, schedule: NoiseSchedule,
             init: DenoiserParams | None = None) -> PretrainResult:
    """Fit the reference denoiser to the benchmark's per-prompt mixtures.

    Raises NonConvergence (carrying the result) when the held-out energy
    distance stays above ``cfg.energy_threshold``.
    """
    arch = Arch(bench.dim, tuple(cfg.hidden), tuple(bench.prompts), cfg.prompt_dim)
    params = init.trainable_copy() if init is not None else init_params(arch, int(seeding.stage_rng(cfg.seed, seeding.INIT).integers(2**63)))
    opt = Adam(arch.n_params)
    losses = np.empty(cfg.max_steps)
    n_prompts = len(bench.prompts)
    for step in range(1, cfg.max_steps + 1):
        rng = seeding.stage_rng(cfg.seed, seeding.PRETRAIN, step)
        idx = rng.integers(n_prompts, size=cfg.batch_size)
        x0 = bench.sample_data(rng, idx)
        t = draw_pretrain_times(schedule, rng, cfg.batch_size)
        batch = NoisedBatch(x0, rng.standard_normal(x0.shape), t, idx, schedule)
        loss, grad = pretrain_loss_and_grad(params, batch)
        if not np.isfinite(loss):
            raise DivergenceDetected(f"pretraining loss became {loss} at step {step}")
        opt.step(params.theta, grad, pretrain_lr(cfg, step))
        losses[step - 1] = loss
    params.meta = {"stage": "pretrain", "seed": cfg.seed, "step": cfg.max_steps, "schedule": schedule.kind}
    energy = None
    if cfg.energy_threshold is not None and cfg.max_steps > 0:
        energy = held_out_energy(params, bench, schedule, cfg.eval_samples, cfg.seed, cfg.sampler_steps, cfg.shift)
        result = PretrainResult(params, losses, energy)
        if energy > cfg.energy_threshold:
            err = NonConvergence(f"energy distance {energy:.4f} above threshold {cfg.energy_threshold}")
            err.result = result
            raise err
        return result
    return PretrainResult(params, losses, energy)


def held_out_energy(params, bench: ToyBenchmark, schedule, n: int, seed: int, steps: int = 50, shift=None) -> float:
    """Mean over prompts of the energy distance between model samples and fresh data."""
    xs = draw_samples(params, bench.prompts, n, seed, seeding.HOLDOUT, schedule, steps, shift)
    dists = []
    for i, p in enumerate(bench.prompts):
        ref = bench.mixtures[p].sample(seeding.stage_rng(seed, seeding.HOLDOUT, 10**6 + i), n)
        dists.append(energy_distance(xs[i], ref))
    return float(np.mean(dists))


# --- candidates -----------------------------------------------------------------

def generate_candidates(ref: DenoiserParams, bench: ToyBenchmark, n: int, seed: int, schedule: NoiseSchedule,
                        steps: int = 50, shift: float | None = None,
                        prompts: Sequence[str] | None = None) -> list[CandidateSet]:
    """N reference samples per prompt, scored by the benchmark rewards."""
    if n < 2:
        raise DegenerateSet(f"need at least 2 candidates per prompt, got {n}")
    prompts = list(prompts or bench.prompts)
    xs = draw_samples(ref, prompts, n, seed, seeding.GENERATE, schedule, steps, shift)
    scores = score_samples(xs, prompts, bench.rewards)
    return [CandidateSet(p, xs[i], scores[i], bench.rewards.names, bench.rewards.kinds) for i, p in enumerate(prompts)]


# --- fine-tuning -----------------------------------------------------------------

@dataclass
class TrainConfig:
    objective: str = "capo"
    strategy: str = "frs"
    reward_index: int = 0
    beta: float = 1.0
    weighting: WeightingSpec = field(default_factory=WeightingSpec)
    lr: float = 1e-3
    warmup_steps: int = 200
    batch_size: int = 64
    max_steps: int = 2000
    eval_every: int = 250
    seed: int = 0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    val_samples: int = 16
    val_seed: int = 1
    sampler_steps: int = 50
    shift: float | None = None
    # override every pair's calibrated gap (1.0 turns capo into ipo)
    delta_override: float | None = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if not (self.beta > 0 and self.lr >= 0 and self.batch_size >= 1 and self.max_steps >= 1
                and self.eval_every >= 1 and self.warmup_steps >= 0):
            raise ValueError("invalid training configuration")
        if self.eval_every > self.max_steps:
            raise ValueError("eval_every must not exceed max_steps")


@dataclass
class EvalPoint:
    step: int
    win_rates: np.ndarray
    mean: float


@dataclass
class RunLog:
    reward_names: list[str]
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    evals: list[EvalPoint] = field(default_factory=list)
    chosen_step: int = 0

    def to_csv(self, config_hash: str = "") -> str:
        buf = io.StringIO()
        buf.write(f"# schema_version={SCHEMA_VERSION} config_hash={config_hash} chosen_step={self.chosen_step}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr", *[f"val_{n}" for n in self.reward_names], "val_mean"])
        evals = {e.step: e for e in self.evals}
        if 0 in evals:
            e = evals[0]
            w.writerow([0, "", "", *[repr(float(v)) for v in e.win_rates], repr(e.mean)])
        for s, (loss, lr) in enumerate(zip(self.losses, self.lrs), start=1):
            e = evals.get(s)
            val = [repr(float(v)) for v in e.win_rates] + [repr(e.mean)] if e else [""] * (len(self.reward_names) + 1)
            w.writerow([s, repr(loss), repr(lr), *val])
        return buf.getvalue()


@dataclass
class PairData:
    """Flattened valid pairs of all pools, for vectorised minibatch sampling."""

    x_plus: np.ndarray
    x_minus: np.ndarray
    delta: np.ndarray
    prompt_idx: np.ndarray
    offsets: np.ndarray
    counts: np.ndarray

    @classmethod
    def build(cls, pools: Sequence[PairPool], candidates: dict[str, CandidateSet], arch: Arch) -> "PairData":
        xp, xm, dl, pi, counts = [], [], [], [], []
        for pool in pools:
            samples = np.asarray(candidates[pool.prompt_id].samples, dtype=np.float64)
            pairs = pool.pairs
            if len(pairs) == 0:
                continue
            xp.append(samples[pairs[:, 0]])
            xm.append(samples[pairs[:, 1]])
            dl.append(pool.gap_values[pairs[:, 0]] - pool.gap_values[pairs[:, 1]])
            pi.append(np.full(len(pairs), arch.prompt_index(pool.prompt_id)[0]))
            counts.append(len(pairs))
        if not counts:
            raise ValueError("no usable pair pools")
        counts = np.array(counts)
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        return cls(np.concatenate(xp), np.concatenate(xm), np.concatenate(dl), np.concatenate(pi), offsets, counts)

    def draw(self, rng: np.random.Generator, b: int) -> np.ndarray:
        """Pair rows: prompt uniformly, then a pair uniformly within the prompt."""
        which = rng.integers(len(self.counts), size=b)
        within = np.floor(rng.random(b) * self.counts[which]).astype(np.int64)
        return self.offsets[which] + within


class Validator:
    """Win-rate of a model against the frozen reference on fixed validation noise."""

    def __init__(self, ref: DenoiserParams, bench: ToyBenchmark, schedule: NoiseSchedule, k: int, seed: int,
                 steps: int = 50, shift=None, prompts: Sequence[str] | None = None):
        self.bench, self.schedule, self.k, self.seed, self.steps, self.shift = bench, schedule, k, seed, steps, shift
        self.prompts = list(prompts or bench.prompts)
        xb = draw_samples(ref, self.prompts, k, seed, seeding.VALIDATE, schedule, steps, shift)
        self.base_scores = score_samples(xb, self.prompts, bench.rewards)

    def __call__(self, params: DenoiserParams) -> np.ndarray:
        xm = draw_samples(params, self.prompts, self.k, self.seed, seeding.VALIDATE, self.schedule, self.steps, self.shift)
        sm = score_samples(xm, self.prompts, self.bench.rewards)
        return mean_over_prompts(winrate_table(sm, self.base_scores))


def finetune(cfg: TrainConfig, ref: DenoiserParams, pools: Sequence[PairPool], candidates: Sequence[CandidateSet],
             bench: ToyBenchmark, schedule: NoiseSchedule, validator: Validator | None = None,
             loss_only_steps: bool = False) -> tuple[DenoiserParams, RunLog]:
    """Preference fine-tuning from the frozen reference; returns the best validated checkpoint."""
    ref = ref if ref.role == "reference" else ref.frozen()
    loss_fn = OBJECTIVES[cfg.objective]
    data = PairData.build(pools, {c.prompt_id: c for c in candidates}, ref.arch)
    theta = ref.trainable_copy()
    opt = Adam(ref.arch.n_params, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    if validator is None:
        validator = Validator(ref, bench, schedule, cfg.val_samples, cfg.val_seed, cfg.sampler_steps, cfg.shift)
    runlog = RunLog(bench.rewards.names)

    def record_eval(step):
        if loss_only_steps:
            return
        rates = validator(theta)
        point = EvalPoint(step, rates, math.fsum(rates) / len(rates))
        runlog.evals.append(point)
        best = max(runlog.evals, key=lambda e: e.mean)   # first maximum wins ties
        if best is point:
            runlog.chosen_step = step
            record_eval.best = theta.theta.copy()

    record_eval.best = theta.theta.copy()
    record_eval(0)
    for step in range(1, cfg.max_steps + 1):
        rng = seeding.stage_rng(cfg.seed, seeding.FINETUNE, step)
        rows = data.draw(rng, cfg.batch_size)
        delta = data.delta[rows] if cfg.delta_override is None else np.full(cfg.batch_size, cfg.delta_override)
        batch = make_pair_batch(data.x_plus[rows], data.x_minus[rows], data.prompt_idx[rows], delta, schedule, rng)
        loss, grad = loss_fn(theta, ref, batch, cfg.beta, cfg.weighting)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergenceDetected(f"{cfg.objective} loss became {loss} at step {step} (beta={cfg.beta}, lr={cfg.lr})")
        lr = warmup_lr(cfg.lr, step, cfg.warmup_steps)
        opt.step(theta.theta, grad, lr)
        runlog.losses.append(loss)
        runlog.lrs.append(lr)
        if step % cfg.eval_every == 0:
            record_eval(step)
    best = DenoiserParams(ref.arch, record_eval.best, "trainable",
                          {"stage": "finetune", "seed": cfg.seed, "step": runlog.chosen_step,
                           "schedule": schedule.kind, "objective": cfg.objective, "strategy": cfg.strategy,
                           "beta": cfg.beta})
    return best, runlog


def sweep_beta(cfg: TrainConfig, betas: Sequence[float], ref, pools, candidates, bench, schedule):
    """Fine-tune once per beta and keep the run with the best validation win-rate."""
    validator = Validator(ref, bench, schedule, cfg.val_samples, cfg.val_seed, cfg.sampler_steps, cfg.shift)
    runs = []
    for beta in betas:
        params, runlog = finetune(replace(cfg, beta=float(beta)), ref, pools, candidates, bench, schedule, validator)
        best = next(e for e in runlog.evals if e.step == runlog.chosen_step)
        runs.append((float(beta), params, runlog, best.mean))
    chosen = max(runs, key=lambda r: r[3])
    return chosen, runs
