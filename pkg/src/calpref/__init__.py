"""Calibrated preference optimization for a toy conditional denoiser.

Pipeline: pretrain a reference denoiser, draw N candidates per prompt, turn raw
scores into calibrated win-rates, pick preference pairs (optionally along the
Pareto frontier of several rewards), fine-tune with a regression loss on the
calibrated gap, and evaluate by K x K win-rate against the reference.
"""
from .diffmodel import (Arch, DenoiserParams, NoisedBatch, denoise, implicit_reward, init_params,
                        load_checkpoint, noise_batch, sample, save_checkpoint)
from .evalkit import EvalReport, emit_report, evaluate, winrate
from .objectives import OBJECTIVES, PairBatch, capo_loss, dpo_loss, ipo_loss, make_pair_batch
from .pairing import PairPool, dominates, pareto_front, sample_pair, select_all, select_pairs
from .reward import (BT, AnalyticReward, CalibratedScores, CandidateSet, RewardKind, SyntheticRewards,
                     calibrate, calibrate_column, pairwise_winrate, synth_rewards)
from .schedule import (NoiseSchedule, WeightingSpec, flow_weight, log_snr, loss_weight, shift_timestep)
from .soup import merge3, slerp2
from .toy import ToyBenchmark, conflicting_rewards, single_gaussian
from .trainer import PretrainConfig, RunLog, TrainConfig, finetune, generate_candidates, pretrain

__version__ = "0.1.0"
