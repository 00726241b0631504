import numpy as np
import pytest

from fm_difficulty.analysis import build_factor_tables, spearman
from fm_difficulty.baselines import fit_naive, predict_naive_batch
from fm_difficulty.dataset import Dataset, InteractionRecord, SplitSpec, split_players
from fm_difficulty.evaluation import centered_rolling_mean, rmse
from fm_difficulty.features import build_fm_rows, build_schema
from fm_difficulty.synth import (SynthConfig, SynthTruth, expected_attempts, generate, oracle_metrics, read_truth,
                                 sample_attempts, truncated_geometric_mean, truncation_share)
from fm_difficulty.trainer import McmcConfig, train_predict


def test_certain_success_means_one_attempt():
    a = sample_attempts(np.ones(1000), np.random.default_rng(0))
    assert np.all(a == 1)


def test_half_probability_mean_two():
    a = sample_attempts(np.full(100_000, 0.5), np.random.default_rng(1))
    assert abs(a.mean() - 2.0) / 2.0 < 0.02


def test_truncated_mean_matches_direct_sum():
    p, cap = 0.5, 30
    direct = sum(k * p * (1 - p) ** (k - 1) for k in range(1, cap)) + cap * (1 - p) ** (cap - 1)
    assert truncated_geometric_mean(p, cap) == pytest.approx(direct, rel=1e-12)
    for p in (0.03, 0.1, 0.9):
        direct = sum(k * p * (1 - p) ** (k - 1) for k in range(1, cap)) + cap * (1 - p) ** (cap - 1)
        assert expected_attempts(p) == pytest.approx(direct, rel=1e-12)


def test_truncated_mean_matches_monte_carlo():
    a = sample_attempts(np.full(200_000, 0.05), np.random.default_rng(2))
    assert a.mean() == pytest.approx(truncated_geometric_mean(0.05), rel=0.01)


def test_higher_skill_fewer_attempts():
    # two players at a fixed level: skill enters the logit additively
    cfg = SynthConfig()
    lo = 1 / (1 + np.exp(-(cfg.base_logit - 0.5 - 1.0)))
    hi = 1 / (1 + np.exp(-(cfg.base_logit - 0.5 + 1.0)))
    rng = np.random.default_rng(3)
    assert sample_attempts(np.full(10_000, hi), rng).mean() < sample_attempts(np.full(10_000, lo), rng).mean()


def test_generated_skill_ordering():
    out = generate(SynthConfig(n_players=400, n_levels=60, seed=4))
    att = np.array([r.attempts for r in out.dataset.records]).reshape(400, 60)
    top = out.truth.skill >= np.quantile(out.truth.skill, 0.75)
    bottom = out.truth.skill <= np.quantile(out.truth.skill, 0.25)
    assert att[top].mean() < att[bottom].mean()


def test_probability_bounds_and_determinism():
    a = generate(SynthConfig(n_players=30, n_levels=40, seed=9))
    b = generate(SynthConfig(n_players=30, n_levels=40, seed=9))
    assert a.dataset.records == b.dataset.records
    assert np.all((a.truth.p >= 1 / 30) & (a.truth.p <= 1))
    np.testing.assert_array_equal(a.telemetry.values, b.telemetry.values)


def test_distribution_shape_late_levels():
    out = generate(SynthConfig(n_players=500, n_levels=300, seed=5))
    late = np.array([r.attempts for r in out.dataset.records if r.level_id > 200])
    counts = np.bincount(late)
    assert counts.argmax() == 1
    assert np.mean(late > 10) > 0
    assert truncation_share(out) < 0.02


def test_difficulty_curve_ramps_up():
    out = generate(SynthConfig(n_players=500, n_levels=300, seed=6))
    att = np.array([r.attempts for r in out.dataset.records]).reshape(500, 300).mean(axis=0)
    smooth = centered_rolling_mean(att, 12)
    assert smooth[250:].mean() > smooth[10:60].mean()
    assert spearman(np.arange(300), smooth) > 0


def test_oracle_is_zero_when_certain():
    d = Dataset.from_records(InteractionRecord(f"p{i}", lv, 1) for i in range(3) for lv in (1, 2))
    truth = SynthTruth([f"p{i}" for i in range(3)], np.array([1, 2]), np.zeros(3), np.zeros((3, 2)), np.zeros(3),
                       np.zeros(2), np.ones(2), np.zeros(2, bool), np.ones((3, 2)), 1 / 30)
    rep = oracle_metrics(truth, d)
    assert rep.mae == 0.0 and rep.rmse == 0.0


def test_oracle_beats_naive(small_synth):
    split = split_players(small_synth.dataset, SplitSpec(observed_levels=10, test_fraction=0.1))
    _, lid, att = split.test.arrays()
    naive = np.clip(predict_naive_batch(fit_naive(split.train), lid), 1, 30)
    assert oracle_metrics(small_synth.truth, split).rmse <= rmse(naive, att)


def test_oracle_unknown_ids(small_synth):
    with pytest.raises(KeyError):
        oracle_metrics(small_synth.truth, Dataset.from_records([InteractionRecord("ghost", 1, 1)]))


def test_written_files(tmp_path):
    out = generate(SynthConfig(n_players=10, n_levels=5, seed=1))
    paths = out.write(tmp_path)
    assert sorted(p.name for p in paths.values()) == [
        "interactions.csv", "level_attributes.csv", "telemetry.csv", "truth.csv"]
    skill, diff = read_truth(paths["truth"])
    assert skill["p0001"] == out.truth.skill[0]
    assert diff[5] == out.truth.difficulty[4]


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_players=0)
    with pytest.raises(ValueError):
        SynthConfig(p_min=2.0)


def test_level_bias_recovers_difficulty():
    # separate player/level priors keep the level main effect in w instead of v_l . v_u
    out = generate(SynthConfig(n_players=200, n_levels=500, seed=7))
    split = split_players(out.dataset, SplitSpec(observed_levels=10, seed=0))
    schema = build_schema(split)
    res = train_predict(build_fm_rows(split, schema), None, McmcConfig(k=2, iterations=150, seed=0, group_by_block=True),
                        groups=schema.block_ids(), fingerprint=schema.fingerprint)
    _, levels = build_factor_tables(res.model, schema, split.train)
    assert spearman(levels.w, out.truth.difficulty) >= 0.9
