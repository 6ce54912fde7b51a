"""K x K win-rate evaluation and the report files.

Run: python demos/05_evaluation.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from calpref.evalkit import emit_report, summarize, winrate

rng = np.random.default_rng(0)
a = rng.normal(0.3, 1, 500)
b = rng.normal(0.0, 1, 500)
print(f"winrate(A, B) = {winrate(a, b):.4f}, winrate(B, A) = {winrate(b, a):.4f}, sum {winrate(a, b) + winrate(b, a)}")
print("ties count as half:", winrate([1.0, 1.0], [1.0, 0.0]))

# Per-prompt tables for two rewards, averaged over prompts.
model = np.stack([rng.normal([0.4, -0.1], 1, size=(200, 2)) for _ in range(5)])
base = np.stack([rng.normal(0, 1, size=(200, 2)) for _ in range(5)])
report = summarize(model, base, ["align", "aesthetic"], [f"p{i:02d}" for i in range(5)], 200, 0)
print("per-reward win-rate:", np.round(report.win_rate, 4), "ensemble", round(report.ensemble_win_rate, 4))

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo_report")
for path in emit_report(report, out):
    print("wrote", path)
