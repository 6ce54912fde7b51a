"""Preference losses on a tiny denoiser: DPO, IPO and the calibrated regression target.

Run: python demos/03_losses.py
"""
import math

import numpy as np

from calpref.diffmodel import Arch, init_params
from calpref.objectives import capo_loss, dpo_loss, ipo_loss, make_pair_batch
from calpref.schedule import NoiseSchedule, WeightingSpec

rng = np.random.default_rng(0)
arch = Arch(2, (32, 32), ("p0", "p1"), 4)
ref = init_params(arch, 0, zero_last=False).frozen()
schedule = NoiseSchedule("rectified_flow")
spec = WeightingSpec("sigmoid", 0.0)

batch = make_pair_batch(rng.normal(size=(64, 2)), rng.normal(size=(64, 2)), rng.integers(2, size=64),
                        rng.uniform(0, 0.6, 64), schedule, rng)
theta = ref.trainable_copy()
print("at the reference model:")
print(f"  dpo  {dpo_loss(theta, ref, batch, 1.0, spec)[0]:.6f}  (ln 2 = {math.log(2):.6f})")
print(f"  ipo  {ipo_loss(theta, ref, batch, 1.0, spec)[0]:.6f}")
print(f"  capo {capo_loss(theta, ref, batch, 1.0, spec)[0]:.6f}  (mean gap^2 = {np.mean(batch.delta_r**2):.6f})")

# Plain gradient descent on the calibrated loss drives the implicit reward gap
# toward the calibrated gap instead of pushing it without bound.
for step in range(301):
    loss, grad = capo_loss(theta, ref, batch, 1.0, spec)
    if step % 75 == 0:
        print(f"step {step:3d}: capo loss {loss:.5f}")
    theta.theta -= 0.05 * grad
