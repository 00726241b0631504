"""
Reading a trained model
=======================

Pull the per-level and per-player parameters out of a fitted FM and rank
correlate them with attempt statistics and with the generator's truth.
"""

from fm_difficulty.analysis import build_factor_tables, interpretation_report
from fm_difficulty.dataset import SplitSpec, split_players
from fm_difficulty.features import build_fm_rows, build_schema
from fm_difficulty.synth import SynthConfig, generate
from fm_difficulty.trainer import McmcConfig, train_predict

out = generate(SynthConfig(n_players=800, n_levels=220, seed=5))
split = split_players(out.dataset, SplitSpec(observed_levels=50, test_fraction=0.02, seed=0))
schema = build_schema(split)
res = train_predict(build_fm_rows(split, schema), None, McmcConfig(k=2, iterations=150, seed=0, group_by_block=True),
                    groups=schema.block_ids(), fingerprint=schema.fingerprint)

# factors are centred and sign-fixed; predictions are unchanged by either step
players, levels = build_factor_tables(res.model, schema, split.train)
t = out.truth
report = interpretation_report(players, levels, dict(zip(t.player_ids, t.skill)),
                               {int(lv): d for lv, d in zip(t.level_ids, t.difficulty)})
for name, (rho, n) in report.pairs.items():
    print("%-40s %+.3f  (n=%d)" % (name, rho, n))
