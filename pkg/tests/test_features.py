import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fm_difficulty.dataset import Dataset, InteractionRecord, SplitSpec, split_players
from fm_difficulty.features import (LEVEL_FLAGS, TELEMETRY_FIELDS, EncodingError, FeatureSchema, LevelAttributes,
                                    Telemetry, aggregate_player, build_fm_rows, build_rf_matrix, build_schema,
                                    color_entropy, level_average_attempts, read_level_attributes,
                                    write_level_attributes)

from conftest import make_dataset


@pytest.mark.parametrize("weights, expected", [
    ([1], 0.0),
    ([0.5, 0.5], math.log(2)),
    ([1, 1, 1, 1, 1], math.log(5)),
])
def test_color_entropy_examples(weights, expected):
    assert color_entropy(weights) == pytest.approx(expected, abs=1e-12)


@given(st.lists(st.floats(min_value=0.0, max_value=1e3), min_size=1, max_size=12).filter(lambda w: sum(w) > 0))
def test_color_entropy_bounds(weights):
    h = color_entropy(weights)
    assert 0.0 <= h <= math.log(len(weights)) + 1e-9


@pytest.mark.parametrize("bad", [[], [0, 0], [-1, 2], [float("nan")]])
def test_color_entropy_rejects(bad):
    with pytest.raises(ValueError):
        color_entropy(bad)


def test_level_attributes_validation():
    with pytest.raises(ValueError):
        LevelAttributes(1, 2.0, color_entropy=2.0, color_count=2)
    with pytest.raises(ValueError):
        LevelAttributes(1, 2.0, color_entropy=0.1, color_count=2, flags={"teleport": 2})


def _records(pid, attempts):
    return [InteractionRecord(pid, i + 1, a) for i, a in enumerate(attempts)]


def test_aggregate_mean_attempts():
    assert aggregate_player(_records("p", [2, 4])).mean_attempts == 3.0
    assert aggregate_player(_records("p", [5]), n_observed=1).mean_attempts == 5.0
    # levels past the observation count are ignored
    assert aggregate_player(_records("p", [2, 4, 30]), n_observed=2).mean_attempts == 3.0


def test_aggregate_telemetry_matches_recomputation():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(6, len(TELEMETRY_FIELDS)))
    tel = Telemetry(["p"] * 6, range(1, 7), vals)
    agg = aggregate_player(_records("p", [1, 2, 3, 4, 5, 6]), tel, n_observed=4)
    for j, f in enumerate(TELEMETRY_FIELDS):
        expected = sum(vals[i, j] for i in range(4)) / 4
        assert getattr(agg, "mean_" + f) == pytest.approx(expected, rel=1e-12)
    assert agg.missing == ()


def test_aggregate_missing_telemetry_defaults_to_zero():
    tel = Telemetry(["p"], [1], [[1.0]], fields=("moves_used_ratio",))
    agg = aggregate_player(_records("p", [3]), tel)
    assert agg.mean_moves_used_ratio == 1.0
    assert agg.mean_rocket_bomb == 0.0
    assert "rocket_bomb" in agg.missing


def test_aggregate_rejects_mixed_players():
    with pytest.raises(ValueError):
        aggregate_player([InteractionRecord("a", 1, 1), InteractionRecord("b", 1, 1)])


def test_telemetry_csv_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tel = Telemetry(["a", "b"], [1, 2], rng.normal(size=(2, len(TELEMETRY_FIELDS))))
    tel.write_csv(tmp_path / "t.csv")
    back = Telemetry.read_csv(tmp_path / "t.csv")
    assert back.fields == tel.fields
    np.testing.assert_array_equal(back.values, tel.values)


def test_level_attributes_round_trip(tmp_path):
    attrs = {lv: LevelAttributes(lv, 1.5 * lv, color_entropy([1, lv]), 2, {f: lv % 2 for f in LEVEL_FLAGS})
             for lv in (1, 2, 3)}
    write_level_attributes(attrs, tmp_path / "l.csv")
    assert read_level_attributes(tmp_path / "l.csv") == attrs


@pytest.fixture
def split(small_dataset):
    return split_players(small_dataset, SplitSpec(observed_levels=10, test_fraction=0.05, seed=2))


@pytest.fixture
def attrs(small_dataset):
    return {lv: LevelAttributes(lv, 0.0, color_entropy([1, 2, lv % 5 + 1]), 3,
                                {"teleport": int(lv % 7 == 0), "layer_cake_cg": int(lv % 3 == 0)})
            for lv in small_dataset.levels}


def test_two_hot_row():
    d = Dataset.from_records([InteractionRecord("p3", 7, 4), InteractionRecord("p1", 2, 1)])
    schema = FeatureSchema(players=("p1", "p3"), levels=(2, 7), observed_levels=10)
    dm = build_fm_rows(d, schema)
    row = next(r for r, pid in zip(dm.rows(), dm.player_ids) if pid == "p3")
    assert row.indices.tolist() == [schema.player_column("p3"), schema.level_column(7)]
    assert row.values.tolist() == [1.0, 1.0]
    assert row.target == 4.0


def test_level_column_offset_and_decode(split):
    schema = build_schema(split)
    for lv in (1, 7, 200):
        col = schema.level_column(lv)
        assert col == schema.levels.index(lv) + schema.n_players
        assert schema.decode(col) == ("level", lv)
    assert schema.decode(schema.player_column(schema.players[5])) == ("player", schema.players[5])


def test_unknown_entity_is_an_encoding_error(split):
    schema = build_schema(split)
    with pytest.raises(EncodingError):
        schema.player_column("nobody")
    with pytest.raises(EncodingError):
        schema.level_column(9999)


def test_augmented_rows_width_and_sparsity(split, attrs):
    schema = build_schema(split, attrs, augment=True)
    dm = build_fm_rows(split, schema, augment=True, part="test")
    assert dm.width == schema.width
    assert dm.X.nnz == np.count_nonzero(dm.X.toarray())
    for row in list(dm.rows())[:50]:
        assert row.indices.max() < schema.width


def test_augmented_values_follow_definitions(split, attrs):
    schema = build_schema(split, attrs, augment=True)
    tp = sorted(split.test_players)[0]
    observed = [r.attempts for r in split.train.records if r.player_id == tp]
    assert len(observed) == 10
    assert schema.player_values[tp][0] == pytest.approx(np.mean(observed))
    # level average over non-test training players
    lv = 160
    others = [r.attempts for r in split.train.records if r.level_id == lv and r.player_id not in split.test_players]
    assert schema.level_values[lv][0] == pytest.approx(np.mean(others))
    X, _ = build_rf_matrix(split, schema, "test")
    pid, lid, _ = split.test.arrays()
    i = int(np.nonzero((pid == tp) & (lid == lv))[0][0])
    assert X[i, 0] == pytest.approx(np.mean(observed))
    assert X[i, len(schema.player_features)] == pytest.approx(np.mean(others))


def test_same_player_rows_share_player_features(split, attrs):
    schema = build_schema(split, attrs, augment=True)
    X, _ = build_rf_matrix(split, schema, "test")
    pid, _, _ = split.test.arrays()
    np_ = len(schema.player_features)
    for p in split.test_players:
        block = X[pid == p, :np_]
        assert np.all(block == block[0])


def test_rf_column_means_match_brute_force():
    recs = [InteractionRecord(p, lv, a) for p, lv, a in [
        ("a", 1, 1), ("a", 2, 3), ("b", 1, 2), ("b", 2, 6), ("c", 1, 5),
        ("c", 2, 1), ("d", 1, 4), ("d", 2, 2), ("e", 1, 3), ("e", 2, 7)]]
    d = Dataset.from_records(recs)
    s = split_players(d, SplitSpec(observed_levels=1, eval_level_floor=1, eligibility_level=2, test_fraction=0.2))
    attrs = {1: LevelAttributes(1, 0.0, 0.5, 3), 2: LevelAttributes(2, 0.0, 1.0, 4)}
    schema = build_schema(s, attrs, augment=True)
    X, y = build_rf_matrix(s, schema, "train")
    (tp,) = s.test_players
    # brute force: one row per train record
    expected = []
    for r in s.train.records:
        own = [q.attempts for q in s.train.records if q.player_id == r.player_id and q.level_id <= 1]
        lvl = [q.attempts for q in s.train.records if q.level_id == r.level_id and q.player_id != tp]
        a = attrs[r.level_id]
        expected.append([sum(own) / len(own), sum(lvl) / len(lvl), a.color_entropy, a.color_count])
    np.testing.assert_allclose(X.mean(axis=0), np.mean(expected, axis=0), rtol=1e-12)
    np.testing.assert_array_equal(y, [r.attempts for r in s.train.records])


def test_standardization_uses_train_rows(split, attrs):
    schema = build_schema(split, attrs, augment=True)
    dm = build_fm_rows(split, schema, augment=True, part="train")
    real = dm.X[:, schema.n_players + schema.n_levels:].toarray()
    # constant columns (scale 1) are only centered; others are z-scored
    assert np.allclose(real.mean(axis=0), 0.0, atol=1e-9)
    sd = real.std(axis=0)
    assert np.all((np.abs(sd - 1) < 1e-9) | (sd < 1e-12))


def test_schema_round_trip_and_fingerprint(tmp_path, split, attrs):
    schema = build_schema(split, attrs, augment=True)
    schema.save(tmp_path / "s.json")
    back = FeatureSchema.load(tmp_path / "s.json")
    assert back.fingerprint == schema.fingerprint
    assert back.width == schema.width
    assert build_schema(split).fingerprint != schema.fingerprint


def test_schema_without_attributes_notes_fallback(split):
    schema = build_schema(split, None, augment=True)
    assert schema.level_features == ("level_avg_attempts_train",)
    assert any("level attributes absent" in n for n in schema.notes)


def test_missing_level_attribute_row(split, attrs):
    del attrs[5]
    with pytest.raises(EncodingError):
        build_schema(split, attrs, augment=True)


def test_level_average_excludes_players():
    d = Dataset.from_records([InteractionRecord("a", 1, 2), InteractionRecord("b", 1, 4), InteractionRecord("c", 1, 30)])
    assert level_average_attempts(d, exclude_players={"c"}) == {1: 3.0}


def test_block_ids(split, attrs):
    schema = build_schema(split, attrs, augment=True)
    b = schema.block_ids()
    assert len(b) == schema.width
    assert (b == 0).sum() == schema.n_players and (b == 1).sum() == schema.n_levels
