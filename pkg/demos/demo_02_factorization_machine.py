"""
A factorization machine, by hand and by sampling
================================================

Predict with a tiny model, check the linear-time formula against the pairwise
sum, then fit one with the Gibbs sampler on synthetic players.
"""

import numpy as np

from fm_difficulty.fm import FmModel, Param, multilinear_terms, predict
from fm_difficulty.features import DesignRow, build_fm_rows, build_schema
from fm_difficulty.dataset import SplitSpec, split_players
from fm_difficulty.synth import SynthConfig, generate
from fm_difficulty.trainer import McmcConfig, train_predict
from fm_difficulty.evaluation import mae

rng = np.random.default_rng(0)
model = FmModel(rng.normal(size=6), rng.normal(size=(6, 2)))
x = DesignRow([1, 4], [1.0, 1.0], 0.0)  # one player column, one level column

# with two active one-hot columns the model is w_p + w_l + <v_p, v_l>
print("predict %.6f  by hand %.6f" % (predict(model, x), model.w[1] + model.w[4] + model.V[1] @ model.V[4]))

# every parameter enters linearly: y = g + h * theta
g, h = multilinear_terms(model, x, Param("v", 4, 0))
print("slope of y in v[4,0]: %.6f (equals v[1,0] = %.6f)" % (h, model.V[1, 0]))

# now learn one
out = generate(SynthConfig(n_players=300, n_levels=220, seed=2))
split = split_players(out.dataset, SplitSpec(observed_levels=30, test_fraction=0.05, seed=0))
schema = build_schema(split)
res = train_predict(build_fm_rows(split, schema, False, "train"), build_fm_rows(split, schema, False, "test"),
                    McmcConfig(k=2, iterations=150, seed=0, group_by_block=True),
                    groups=schema.block_ids(), fingerprint=schema.fingerprint)
_, _, truth = split.test.arrays()
print("test MAE after 150 sweeps: %.3f" % mae(res.prediction.clamped(), truth))
print("train RMSE: first sweep %.3f, last %.3f" % (res.log[0]["train_rmse"], res.log[-1]["train_rmse"]))
