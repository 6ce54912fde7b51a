"""Declarative run configuration (YAML), validated before any work starts."""
from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigInvalid
from .reward import AnalyticReward, RewardKind, SyntheticRewards
from .schedule import NoiseSchedule, WeightingSpec
from .toy import ToyBenchmark, conflicting_rewards


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ScheduleCfg(_Strict):
    kind: Literal["rectified_flow", "ddpm_sqrt"] = "rectified_flow"


class SamplerCfg(_Strict):
    steps: int = Field(50, ge=1)
    shift: Optional[float] = Field(None, gt=0)


class WeightingCfg(_Strict):
    kind: Literal["constant", "sigmoid"] = "sigmoid"
    bias: float = 0.0


class RewardCfg(_Strict):
    name: str
    form: Literal["mode_distance", "direction", "norm_penalty", "mode_likelihood"]
    kind: Literal["bt_logit", "power_ratio", "bounded_score"] = "bt_logit"
    alpha: float = Field(1.0, gt=0)
    scale: float = Field(1.0, gt=0)
    direction: Optional[list[float]] = None


class BenchmarkCfg(_Strict):
    name: Literal["conflicting_rewards"] = "conflicting_rewards"
    n_prompts: int = Field(32, ge=1)
    dim: int = Field(2, ge=1)
    seed: int = 0
    radius: float = Field(2.0, gt=0)
    mode_std: float = Field(0.35, gt=0)


class PretrainCfg(_Strict):
    lr: float = Field(2e-3, gt=0)
    warmup_steps: int = Field(200, ge=0)
    batch_size: int = Field(256, ge=1)
    max_steps: int = Field(10000, ge=0)
    hidden: list[int] = [64, 64]
    prompt_dim: int = Field(8, ge=1)
    energy_threshold: Optional[float] = Field(0.05, gt=0)
    eval_samples: int = Field(256, ge=2)
    final_lr_frac: Optional[float] = Field(0.05, ge=0, le=1)


class TrainCfg(_Strict):
    objective: Literal["dpo", "ipo", "capo"] = "capo"
    strategy: Literal["best_worst", "sum", "frs"] = "frs"
    reward_index: int = Field(0, ge=0)
    beta: float = Field(0.3, gt=0)
    lr: float = Field(1e-3, gt=0)
    warmup_steps: int = Field(200, ge=0)
    batch_size: int = Field(64, ge=1)
    max_steps: int = Field(5000, ge=1)
    eval_every: int = Field(500, ge=1)
    val_samples: int = Field(16, ge=1)
    val_seed: int = 1

    @model_validator(mode="after")
    def _eval_within_run(self):
        if self.eval_every > self.max_steps:
            raise ValueError("eval_every must not exceed max_steps")
        return self


class EvalCfg(_Strict):
    k: int = Field(1000, ge=1)
    seed: int = 1234
    pooled: bool = False


class MergeCfg(_Strict):
    method: Literal["slerp", "lerp"] = "slerp"
    lam: float = Field(0.5, ge=0, le=1)


class RunConfig(_Strict):
    seed: int = 0
    benchmark: BenchmarkCfg = BenchmarkCfg()
    schedule: ScheduleCfg = ScheduleCfg()
    sampler: SamplerCfg = SamplerCfg()
    weighting: WeightingCfg = WeightingCfg()
    rewards: Optional[list[RewardCfg]] = None
    ensemble_weights: Optional[list[float]] = None
    n_candidates: int = Field(16, ge=2)
    pretrain: PretrainCfg = PretrainCfg()
    train: TrainCfg = TrainCfg()
    beta_sweep: list[float] = [0.3, 1.0, 3.0, 10.0]
    eval: EvalCfg = EvalCfg()
    merge: MergeCfg = MergeCfg()

    @field_validator("beta_sweep")
    @classmethod
    def _positive_betas(cls, v):
        if not v or any(b <= 0 for b in v):
            raise ValueError("beta_sweep needs at least one positive beta")
        return v

    @model_validator(mode="after")
    def _weights_match(self):
        if self.ensemble_weights is not None:
            n = len(self.rewards) if self.rewards else 2
            if len(self.ensemble_weights) != n or any(w < 0 for w in self.ensemble_weights) \
                    or sum(self.ensemble_weights) <= 0:
                raise ValueError("ensemble_weights must be non-negative, one per reward, not all zero")
        return self

    # --- derived objects ---

    def config_hash(self) -> str:
        """Short digest of everything that can influence a stored artifact.

        The ``eval`` section is left out: it only shapes the final report,
        which records k and seed itself.
        """
        blob = json.dumps(self.model_dump(mode="json", exclude={"eval"}), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.schedule.kind)

    def weighting_spec(self) -> WeightingSpec:
        return WeightingSpec(self.weighting.kind, self.weighting.bias)

    def benchmark_obj(self) -> ToyBenchmark:
        b = self.benchmark
        bench = conflicting_rewards(b.n_prompts, b.dim, b.seed, b.radius, b.mode_std)
        if self.rewards:
            rewards = []
            for r in self.rewards:
                kind = RewardKind(r.kind, r.alpha)
                direction = tuple(r.direction) if r.direction is not None else None
                rewards.append(AnalyticReward(r.name, r.form, kind, r.scale, direction))
            bench.rewards = SyntheticRewards(rewards, bench.rewards.targets)
        return bench


def load_config(path=None, seed: int | None = None) -> RunConfig:
    """Parse and validate a YAML config; ``None`` loads the shipped toy config."""
    try:
        if path is None:
            text = resources.files("calpref").joinpath("configs/toy.yaml").read_text()
        else:
            text = Path(path).read_text()
        raw = yaml.safe_load(text) or {}
        if not isinstance(raw, dict):
            raise ConfigInvalid("config must be a mapping")
        if seed is not None:
            raw["seed"] = seed
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigInvalid(str(exc)) from exc
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
