import csv
import json

import pytest

from fm_difficulty import cli
from fm_difficulty.cli import EXIT_INVALID, EXIT_OK, EXIT_USAGE, main
from fm_difficulty.features import FeatureSchema

DATA_FILES = ("interactions.csv", "level_attributes.csv", "telemetry.csv", "truth.csv")


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert main(["generate", "--players", "120", "--levels", "200", "--seed", "7", "--out-dir", str(out)]) == 0
    return out


def small(gen_dir, *extra):
    return ["--data", str(gen_dir / "interactions.csv"), "--test-fraction", "0.1", "--burn-in", "5", *extra]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_writes_four_files_and_manifest(gen_dir):
    assert sorted(p.name for p in gen_dir.iterdir()) == sorted(DATA_FILES + ("manifest.json",))
    manifest = json.loads((gen_dir / "manifest.json").read_text())
    assert manifest["command"] == "generate"
    assert manifest["seeds"] == [7]
    assert sorted(manifest["outputs"]) == sorted(DATA_FILES)
    assert manifest["config"]["players"] == 120


def test_generate_is_byte_identical(gen_dir, tmp_path):
    assert main(["generate", "--players", "120", "--levels", "200", "--seed", "7", "--out-dir", str(tmp_path)]) == 0
    for name in DATA_FILES:
        assert (tmp_path / name).read_bytes() == (gen_dir / name).read_bytes()


def test_generate_rejects_zero_players(tmp_path, capsys):
    assert main(["generate", "--players", "0", "--out-dir", str(tmp_path)]) == EXIT_USAGE
    assert "players" in capsys.readouterr().err


def test_train_fm_defaults(gen_dir, tmp_path):
    out = tmp_path / "fm"
    assert main(["train", "--method", "fm", "--iterations", "20", "--out", str(out), *small(gen_dir)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["factors"] is None  # default resolved at run time
    model = json.loads((out / "model.json").read_text())
    assert len(model["V"][0]) == 2
    log = read_rows(out / "training_log.csv")
    assert len(log) == 20
    assert {"model.json", "schema.json", "training_log.csv", "predictions.csv", "split.json"} <= set(
        manifest["outputs"])
    assert manifest["inputs"]["data"]["sha256"] == cli.file_sha256(gen_dir / "interactions.csv")


def test_train_is_idempotent(gen_dir, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--method", "fm", "--iterations", "15", "--out", str(tmp_path / name),
                     *small(gen_dir)]) == 0
    for name in ("model.json", "predictions.csv", "split.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("flags", [["--factors", "2"], ["--iterations", "10"], ["--init-stdev", "0.1"],
                                   ["--trees", "5"]])
def test_train_naive_rejects_fm_flags(gen_dir, tmp_path, flags, capsys):
    code = main(["train", "--method", "naive", *flags, "--out", str(tmp_path), *small(gen_dir)])
    assert code == EXIT_USAGE
    assert flags[0] in capsys.readouterr().err


def test_train_naive_and_rf(gen_dir, tmp_path):
    assert main(["train", "--method", "naive", "--out", str(tmp_path / "n"), *small(gen_dir)]) == 0
    naive = json.loads((tmp_path / "n" / "model.json").read_text())
    assert naive["kind"] == "naive" and len(naive["level_means"]) == 200
    assert main(["train", "--method", "rf", "--trees", "3", "--out", str(tmp_path / "r"),
                 "--features", str(gen_dir / "level_attributes.csv"), *small(gen_dir)]) == 0
    imp = read_rows(tmp_path / "r" / "feature_importances.csv")
    assert sum(float(r["mean_importance"]) for r in imp) == pytest.approx(1.0, abs=1e-9)


def test_train_rf_needs_features(gen_dir, tmp_path, capsys):
    assert main(["train", "--method", "rf", "--out", str(tmp_path), *small(gen_dir)]) == EXIT_USAGE
    assert "--features" in capsys.readouterr().err


def test_evaluate_default_checkpoints():
    args = cli.build_parser().parse_args(["evaluate", "--data", "x.csv"])
    assert args.checkpoints == (10, 20, 30, 50, 100, 150)
    assert args.floor == 150


def test_evaluate_naive_constant_across_checkpoints(gen_dir, tmp_path):
    out = tmp_path / "ev"
    code = main(["evaluate", "--methods", "naive,fm", "--checkpoints", "10,50", "--iterations", "10",
                 "--seeds", "0", "--out-dir", str(out), "--plot-script", *small(gen_dir)])
    assert code == 0
    rows = read_rows(out / "sweep_metrics.csv")
    naive = [r for r in rows if r["method"] == "naive"]
    assert len(naive) == 2
    assert naive[0]["mae"] == naive[1]["mae"] and naive[0]["rmse"] == naive[1]["rmse"]
    assert {r["checkpoint"] for r in rows if r["method"] == "fm"} == {"10", "50"}
    assert (out / "plot_results.py").exists()
    compile((out / "plot_results.py").read_text(), "plot_results.py", "exec")
    assert len(list(out.rglob("manifest.json"))) == 1


def test_evaluate_fm_feat_without_features_names_flag(gen_dir, tmp_path, capsys):
    code = main(["evaluate", "--methods", "fm-feat", "--out-dir", str(tmp_path), *small(gen_dir)])
    assert code == EXIT_USAGE
    assert "--features" in capsys.readouterr().err


def test_evaluate_unknown_method(gen_dir, tmp_path):
    assert main(["evaluate", "--methods", "svm", "--out-dir", str(tmp_path), *small(gen_dir)]) == EXIT_USAGE


@pytest.fixture(scope="module")
def fm_dir(gen_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("fm")
    assert main(["train", "--method", "fm", "--iterations", "30", "--out", str(out), *small(gen_dir)]) == 0
    return out


def test_analyze_with_truth(gen_dir, fm_dir, tmp_path):
    out = tmp_path / "an"
    assert main(["analyze", "--model", str(fm_dir / "model.json"), "--data", str(gen_dir / "interactions.csv"),
                 "--truth", str(gen_dir / "truth.csv"), "--out-dir", str(out)]) == 0
    pairs = {r["pair"] for r in read_rows(out / "correlations.csv")}
    assert {"level_w~true_difficulty", "player_v1~true_skill", "level_w~level_avg_attempts",
            "level_v2~level_number"} <= pairs
    levels = read_rows(out / "factors_levels.csv")
    assert len(levels) == 200 and "normalized_variance" in levels[0]


def test_analyze_without_truth(gen_dir, fm_dir, tmp_path):
    out = tmp_path / "an"
    assert main(["analyze", "--model", str(fm_dir / "model.json"), "--data", str(gen_dir / "interactions.csv"),
                 "--out-dir", str(out)]) == 0
    pairs = {r["pair"] for r in read_rows(out / "correlations.csv")}
    assert pairs and not any("true" in p for p in pairs)


def test_analyze_fingerprint_mismatch(gen_dir, fm_dir, tmp_path, capsys):
    model = json.loads((fm_dir / "model.json").read_text())
    model["fingerprint"] = "0" * 16
    bad = tmp_path / "model.json"
    bad.write_text(json.dumps(model))
    code = main(["analyze", "--model", str(bad), "--schema", str(fm_dir / "schema.json"),
                 "--data", str(gen_dir / "interactions.csv"), "--out-dir", str(tmp_path / "an")])
    assert code == EXIT_INVALID
    err = capsys.readouterr().err
    schema_fp = FeatureSchema.load(fm_dir / "schema.json").fingerprint
    assert "0" * 16 in err and schema_fp in err


def test_analyze_rejects_naive_model(gen_dir, tmp_path):
    assert main(["train", "--method", "naive", "--out", str(tmp_path / "n"), *small(gen_dir)]) == 0
    code = main(["analyze", "--model", str(tmp_path / "n" / "model.json"), "--schema", str(tmp_path / "x.json"),
                 "--data", str(gen_dir / "interactions.csv"), "--out-dir", str(tmp_path / "an")])
    assert code == EXIT_INVALID


def test_config_file_supplies_defaults_and_flags_win(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"players": 5, "levels": 7, "seed": 3}))
    parser = cli.build_parser()
    args = cli.parse_args(parser, ["--config", str(cfg), "generate"])
    assert (args.players, args.levels, args.seed) == (5, 7, 3)
    args = cli.parse_args(cli.build_parser(), ["--config", str(cfg), "generate", "--levels", "9"])
    assert (args.players, args.levels) == (5, 9)


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"nope": 1}))
    assert main(["--config", str(cfg), "generate"]) == EXIT_USAGE


def test_env_var_sets_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path))
    assert main(["generate", "--players", "3", "--levels", "4"]) == EXIT_OK
    assert (tmp_path / "generate" / "manifest.json").exists()


def test_missing_input_file(tmp_path):
    code = main(["train", "--method", "naive", "--data", str(tmp_path / "absent.csv"), "--out", str(tmp_path)])
    assert code == cli.EXIT_IO
