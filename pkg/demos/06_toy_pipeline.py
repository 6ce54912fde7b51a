"""The whole pipeline on a shrunken copy of the toy benchmark, in under a minute.

Pretrain a reference, draw and calibrate candidates, pick frontier pairs,
fine-tune with the calibrated loss and compare against the reference.
The full-size run is ``calpref`` with the shipped config (see README).

Run: python demos/06_toy_pipeline.py
"""
import time

import numpy as np

from calpref.evalkit import evaluate
from calpref.pairing import select_all
from calpref.reward import calibrate
from calpref.schedule import NoiseSchedule
from calpref.toy import conflicting_rewards
from calpref.trainer import PretrainConfig, TrainConfig, finetune, generate_candidates, pretrain

t0 = time.time()
schedule = NoiseSchedule("rectified_flow")
bench = conflicting_rewards(n_prompts=8)
res = pretrain(PretrainConfig(max_steps=4000, energy_threshold=None), bench, schedule)
ref = res.params.frozen()
print(f"reference: final velocity MSE {res.losses[-100:].mean():.4f} ({time.time() - t0:.0f}s)")

cands = generate_candidates(ref, bench, 16, 0, schedule)
cals = [calibrate(c) for c in cands]
print("calibrated ensemble of the first prompt:", np.round(cals[0].ensemble, 2))

for name, strategy, idx in [("CaPO+FRS", "frs", 0), ("align only", "best_worst", 0),
                            ("aesthetic only", "best_worst", 1)]:
    cfg = TrainConfig(strategy=strategy, reward_index=idx, beta=0.3, max_steps=2000, eval_every=500)
    params, log = finetune(cfg, ref, select_all(cals, strategy, idx), cands, bench, schedule)
    rep = evaluate(params, ref, bench.prompts, 300, bench.rewards, 7, schedule)
    rates = ", ".join(f"{n} {r:.3f}" for n, r in zip(rep.reward_names, rep.win_rate))
    print(f"{name:15s} chosen step {log.chosen_step:4d}: win-rate vs reference {rates}")
print(f"done in {time.time() - t0:.0f}s")
