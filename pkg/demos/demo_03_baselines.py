"""
Baselines: level means and a random forest
==========================================

The naive model ignores the player entirely. The forest sees level
attributes and the player's early-game telemetry.
"""

from fm_difficulty.baselines import ForestConfig, fit_forest, fit_naive, predict_forest, predict_naive_batch
from fm_difficulty.dataset import SplitSpec, split_players
from fm_difficulty.evaluation import mae, rmse
from fm_difficulty.features import build_rf_matrix, build_schema
from fm_difficulty.fm import clamp
from fm_difficulty.synth import SynthConfig, generate

out = generate(SynthConfig(n_players=300, n_levels=220, seed=3))
split = split_players(out.dataset, SplitSpec(observed_levels=20, test_fraction=0.05, seed=0))
_, lid, truth = split.test.arrays()

naive = fit_naive(split.train)
pred = clamp(predict_naive_batch(naive, lid))
print("naive  MAE %.3f  RMSE %.3f" % (mae(pred, truth), rmse(pred, truth)))

schema = build_schema(split, out.level_attributes, out.telemetry, augment=True)
X, y = build_rf_matrix(split, schema, "train")
Xt, yt = build_rf_matrix(split, schema, "test")
forest = fit_forest(X, y, ForestConfig(n_estimators=30, min_samples_leaf=20, seed=0),
                    feature_names=schema.real_feature_names)
pred = clamp(predict_forest(forest, Xt))
print("forest MAE %.3f  RMSE %.3f" % (mae(pred, yt), rmse(pred, yt)))

# which inputs the trees leaned on
for name, imp in sorted(zip(forest.feature_names, forest.feature_importances), key=lambda t: -t[1])[:5]:
    print("  %-28s %.3f" % (name, imp))
