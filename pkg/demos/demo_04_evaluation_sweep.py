"""
How much history does a prediction need?
========================================

Refit the naive baseline and the FM at several observation checkpoints and
score the same held-out late levels each time.
"""

import numpy as np

from fm_difficulty.dataset import SplitSpec
from fm_difficulty.evaluation import SweepSpec, run_sweep
from fm_difficulty.synth import SynthConfig, generate

out = generate(SynthConfig(n_players=600, n_levels=220, seed=4))
spec = SweepSpec(checkpoints=(10, 30, 100), methods=("naive", "fm"), seeds=(0, 1, 2), iterations=100,
                 group_by_block=True)
report = run_sweep(out.dataset, spec, SplitSpec(observed_levels=10, test_fraction=0.03))

for (method, k, n), cell in report.cells.items():
    lo, hi = cell.ci95_mae
    print("%-6s checkpoint %3d  MAE %.3f [%.3f, %.3f]  RMSE %.3f" % (method, n, cell.mae, lo, hi, cell.rmse))

# FM minus naive, per level, smoothed: negative means the FM is ahead
c = report.curve("fm", 30)
for a, b in ((31, 80), (130, 220)):
    m = (c.levels >= a) & (c.levels <= b)
    print("levels %3d-%3d  mean smoothed difference %+.3f" % (a, b, np.mean(c.smoothed_diff[m])))
