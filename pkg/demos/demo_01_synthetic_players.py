"""
Synthetic players with known skill
==================================

Generate telemetry where every player's skill and every level's difficulty
is known, then look at the attempt distribution and the best error any
predictor could reach.
"""

import numpy as np

from fm_difficulty.synth import SynthConfig, generate, oracle_metrics, truncation_share
from fm_difficulty.dataset import SplitSpec, split_players

out = generate(SynthConfig(n_players=300, n_levels=220, seed=1))
print(out.dataset)

# attempts are heavy tailed; only a sliver is cut at the 30-attempt cap
att = np.array([r.attempts for r in out.dataset.records])
print("mean attempts %.2f, median %d, share truncated %.4f" % (att.mean(), np.median(att), truncation_share(out)))

# levels with the highest true difficulty, and the tutorials in between
t = out.truth
hardest = t.level_ids[np.argsort(t.difficulty)[-5:]]
print("hardest levels:", hardest.tolist())
print("tutorial levels below 40:", t.level_ids[t.tutorial & (t.level_ids < 40)].tolist())

# the Bayes oracle predicts the exact expected attempts from the true p
split = split_players(out.dataset, SplitSpec(observed_levels=10, test_fraction=0.05, seed=0))
orc = oracle_metrics(t, split)
print("oracle on %d test rows: MAE %.3f  RMSE %.3f" % (orc.n, orc.mae, orc.rmse))
