"""Calibrated rewards: raw scores become estimated win-rates against the reference.

Run: python demos/01_calibration.py
"""
import numpy as np

from calpref.reward import CandidateSet, RewardKind, calibrate, calibrate_column, expected_winrate_mc

rng = np.random.default_rng(0)

# Two rewards on very different scales; calibration puts both on [0, 1].
scores = np.column_stack([rng.normal(0, 1, 8), rng.normal(50, 20, 8)])
cset = CandidateSet("demo", list(range(8)), scores, ["align", "aesthetic"], ["bt_logit", "bt_logit"])
cal = calibrate(cset)
print("raw scores (align, aesthetic):")
print(np.round(scores, 2))
print("calibrated:")
print(np.round(cal.calibrated, 3))
print("column means (always 1/2):", cal.calibrated.mean(axis=0))
print("ensemble (uniform average):", np.round(cal.ensemble, 3))

# Power-ratio rewards use r_i^a / (r_i^a + r_j^a) instead of a sigmoid.
pr = calibrate_column([1.0, 2.0, 4.0], RewardKind("power_ratio", 1.0))
print("\npower-ratio calibration of [1, 2, 4]:", np.round(pr, 4))

# With more candidates the calibrated value of a fixed sample approaches its
# expected win-rate against fresh reference draws.
x = 1.0
truth = expected_winrate_mc(x, rng.standard_normal(2_000_000))
print(f"\nsample scoring {x}: expected win-rate vs N(0,1) reference ~ {truth:.4f}")
for n in (4, 16, 64, 1024):
    est = calibrate_column(np.concatenate([[x], rng.standard_normal(n - 1)]))[0]
    print(f"  N={n:5d}: calibrated {est:.4f}")
