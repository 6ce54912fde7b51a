"""Merging fine-tuned checkpoints by spherical interpolation of task vectors.

Run: python demos/04_soup.py
"""
import numpy as np

from calpref.soup import lerp2, merge3, slerp2

rng = np.random.default_rng(0)
anchor = rng.normal(size=1000)
q, _ = np.linalg.qr(rng.normal(size=(1000, 3)))
a, b, c = (anchor + 2.0 * q[:, i] for i in range(3))

for lam in (0.0, 0.25, 0.5, 1.0):
    s = slerp2(anchor, a, b, lam) - anchor
    l = lerp2(anchor, a, b, lam) - anchor
    print(f"lam {lam:4.2f}: |task vector| slerp {np.linalg.norm(s):.3f}  lerp {np.linalg.norm(l):.3f}")

m = merge3(anchor, a, b, c)
tau = m - anchor
print("\nthree-way merge, task-vector norm:", round(float(np.linalg.norm(tau)), 3))
print("component along each input:", np.round([tau @ q[:, i] for i in range(3)], 3))
print("merging three copies of one model returns it unchanged:", np.array_equal(merge3(anchor, a, a, a), a))
