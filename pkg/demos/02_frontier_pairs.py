"""Pair selection: upper and lower Pareto fronts of the calibrated scores.

Run: python demos/02_frontier_pairs.py
"""
import numpy as np

from calpref.pairing import pareto_front, select_pairs
from calpref.reward import CandidateSet, calibrate

rng = np.random.default_rng(3)
scores = rng.normal(size=(16, 2))
cal = calibrate(CandidateSet("demo", list(range(16)), scores, ["align", "aesthetic"], ["bt_logit"] * 2))

upper = pareto_front(cal.calibrated, "max")
lower = pareto_front(cal.calibrated, "min")
print("upper front (positives):", upper)
print("lower front (negatives):", lower)

for strategy in ("frs", "sum", "best_worst"):
    pool = select_pairs(cal, strategy)
    print(f"\n{strategy}: {len(pool.positives)} x {len(pool.negatives)} pairs")
    for i, j, d in list(pool.pair_records())[:3]:
        print(f"  +{i:2d} -{j:2d}  calibrated gap {d:+.3f}")

# Identical candidates sit on both fronts; they are dropped and the chain
# falls back to the summed score.
flat = calibrate(CandidateSet("flat", [0, 1, 2], np.ones((3, 2)), ["a", "b"], ["bt_logit"] * 2))
try:
    select_pairs(flat, "frs")
except Exception as exc:
    print(f"\nall-identical candidates: {type(exc).__name__}: {exc}")
