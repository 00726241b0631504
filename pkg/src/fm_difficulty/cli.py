"""Command-line entry point: ``fm-difficulty {generate,train,evaluate,analyze}``.

Every command writes into one output directory and leaves a single
``manifest.json`` there describing the run. Output roots default to
``$FM_DIFFICULTY_OUT/<command>`` (or ``runs/<command>``) when no directory is
given. ``--config file.json`` supplies flag values by destination name;
flags given on the command line win over the file.

Exit codes: 0 ok, 2 usage, 3 invalid input, 4 numerical divergence, 5 I/O.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5
OUT_ROOT_ENV = "FM_DIFFICULTY_OUT"
MANIFEST_NAME = "manifest.json"

logger = logging.getLogger("fm_difficulty")


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------

def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _method_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def default_out_dir(command: str) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    return Path(root) / command if root else Path("runs") / command


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, inputs: dict[str, str | None],
                   seeds: Sequence[int], outputs: Sequence[Path], started: float) -> Path:
    """Record what ran, on which inputs, and what it produced.

    Schema: ``command``, ``config`` (flag values), ``inputs`` (name ->
    {path, sha256}), ``seeds``, ``outputs`` (paths relative to the
    directory), ``started_utc``, ``wall_seconds``, ``version``.
    """
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()
              if k not in ("func", "config")}
    manifest = {
        "command": command,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": file_sha256(p)} for name, p in inputs.items() if p},
        "seeds": list(seeds),
        "outputs": sorted(str(Path(p).relative_to(out_dir)) for p in outputs),
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_seconds": round(time.time() - started, 3),
        "version": __version__,
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


PLOT_RECIPE = '''"""Plot recipe for fm-difficulty outputs. Needs pandas and matplotlib.

Run from anywhere: python {name} <output-dir>
"""
import sys
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd

out = Path(sys.argv[1] if len(sys.argv) > 1 else ".")

if (out / "sweep_metrics.csv").exists():
    m = pd.read_csv(out / "sweep_metrics.csv")
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for metric, ax in zip(("mae", "rmse"), axes):
        for (method, k), g in m.groupby(["method", "k"]):
            label = method if method in ("naive", "rf") else f"{{method}} k={{k}}"
            ax.plot(g["checkpoint"], g[metric], marker="o", label=label)
        ax.set_xlabel("observed levels")
        ax.set_ylabel(metric.upper())
        ax.legend()
    fig.savefig(out / "sweep_metrics.png", dpi=120, bbox_inches="tight")

    c = pd.read_csv(out / "level_curve.csv")
    fig, ax = plt.subplots(figsize=(8, 4))
    for (method, ckpt), g in c.groupby(["method", "checkpoint"]):
        ax.plot(g["level"], g["smoothed_diff"], label=f"{{method}} @ {{ckpt}}")
    ax.axhline(0, color="grey", lw=0.8)
    ax.set_xlabel("level")
    ax.set_ylabel("MAE difference vs naive (smoothed)")
    ax.legend(fontsize=7)
    fig.savefig(out / "level_curve.png", dpi=120, bbox_inches="tight")

if (out / "param_histograms.csv").exists():
    h = pd.read_csv(out / "param_histograms.csv")
    groups = list(h.groupby(["entity", "param"]))
    fig, axes = plt.subplots(1, len(groups), figsize=(3 * len(groups), 3))
    for ax, ((entity, param), g) in zip(axes if len(groups) > 1 else [axes], groups):
        ax.bar(g["bin_lo"], g["count"], width=g["bin_hi"] - g["bin_lo"], align="edge")
        ax.set_title(f"{{entity}} {{param}}")
    fig.savefig(out / "param_histograms.png", dpi=120, bbox_inches="tight")

    lv = pd.read_csv(out / "factors_levels.csv")
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(lv["w"], lv["avg_attempts"], s=6)
    ax.set_xlabel("level w")
    ax.set_ylabel("average attempts (train)")
    fig.savefig(out / "level_w_vs_attempts.png", dpi=120, bbox_inches="tight")
'''


def write_plot_script(path: str | Path) -> Path:
    path = Path(path)
    path.write_text(PLOT_RECIPE.format(name=path.name))
    return path


# -- commands ----------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    from .synth import SynthConfig, generate

    started = time.time()
    out_dir = Path(args.out_dir) if args.out_dir else default_out_dir("generate")
    try:
        config = SynthConfig(n_players=args.players, n_levels=args.levels, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = generate(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = list(result.write(out_dir).values())
    write_manifest(out_dir, "generate", args, {}, [args.seed], paths, started)
    print(f"wrote {len(paths)} files to {out_dir}")
    return EXIT_OK


TRAIN_METHODS = ("naive", "rf", "fm", "fm-feat")


def _load_inputs(args: argparse.Namespace, need_features: bool):
    from .dataset import load_interactions
    from .features import Telemetry, read_level_attributes

    if not args.data:
        raise UsageError("--data is required")
    if need_features and not args.features:
        raise UsageError(f"--features is required for --method/--methods including {need_features}")
    data = load_interactions(args.data)
    attrs = read_level_attributes(args.features) if args.features else None
    telemetry = Telemetry.read_csv(args.telemetry) if getattr(args, "telemetry", None) else None
    return data, attrs, telemetry


def cmd_train(args: argparse.Namespace) -> int:
    from .baselines import ForestConfig, fit_forest, fit_naive
    from .dataset import SplitSpec, split_players
    from .features import build_fm_rows, build_rf_matrix, build_schema
    from .fm import save_model
    from .trainer import McmcConfig, train_predict

    method = args.method
    fm_like = method in ("fm", "fm-feat")
    if not fm_like:
        for flag, value in (("--factors", args.factors), ("--iterations", args.iterations),
                            ("--init-stdev", args.init_stdev)):
            if value is not None:
                raise UsageError(f"{flag} only applies to --method fm or fm-feat, not {method}")
    if method != "rf" and args.trees is not None:
        raise UsageError(f"--trees only applies to --method rf, not {method}")
    started = time.time()
    need = method if method in ("rf", "fm-feat") else ""
    data, attrs, telemetry = _load_inputs(args, need)
    out_dir = Path(args.out) if args.out else default_out_dir("train")

    split = split_players(data, SplitSpec(observed_levels=args.observed, test_fraction=args.test_fraction,
                                          eval_level_floor=args.floor, seed=args.seed))
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = [out_dir / "split.json"]
    split.write_manifest(outputs[0])

    if method == "naive":
        model = fit_naive(split.train)
        path = out_dir / "model.json"
        path.write_text(json.dumps({"kind": "naive", "fallback": model.fallback,
                                    "level_means": {str(k): v for k, v in model.level_means.items()}},
                                   indent=1, sort_keys=True) + "\n")
        outputs.append(path)
    elif method == "rf":
        schema = build_schema(split, attrs, telemetry, augment=True)
        X, y = build_rf_matrix(split, schema, "train")
        forest = fit_forest(X, y, ForestConfig(n_estimators=args.trees or 150, seed=args.seed),
                            feature_names=schema.real_feature_names)
        outputs += [out_dir / "model.json", out_dir / "feature_importances.csv", out_dir / "schema.json"]
        forest.save(outputs[1])
        forest.write_importances(outputs[2])
        schema.save(outputs[3])
    else:
        augment = method == "fm-feat"
        schema = build_schema(split, attrs, telemetry, augment=augment)
        config = McmcConfig(
            k=2 if args.factors is None else args.factors,
            iterations=1000 if args.iterations is None else args.iterations,
            burn_in=args.burn_in,
            init_stdev=args.init_stdev if args.init_stdev is not None else (0.1 if augment else 1.0),
            seed=args.seed,
            group_by_block=args.group_by_block,
        )
        train_rows = build_fm_rows(split, schema, augment, "train")
        test_rows = build_fm_rows(split, schema, augment, "test")
        result = train_predict(train_rows, test_rows, config, groups=schema.block_ids(),
                               fingerprint=schema.fingerprint)
        outputs += [out_dir / "model.json", out_dir / "schema.json", out_dir / "training_log.csv",
                    out_dir / "predictions.csv"]
        save_model(result.model, outputs[1])
        schema.save(outputs[2])
        result.write_log(outputs[3])
        if len(test_rows):
            from .evaluation import PredictionDump
            PredictionDump(method, config.k, args.observed, args.seed, test_rows.player_ids, test_rows.level_ids,
                           test_rows.y, result.prediction.clamped()).write_csv(outputs[4])
        else:
            outputs.pop()
    write_manifest(out_dir, "train", args, {"data": args.data, "features": args.features,
                                            "telemetry": args.telemetry}, [args.seed], outputs, started)
    print(f"trained {method} on {len(split.train)} rows; outputs in {out_dir}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    from .dataset import SplitSpec
    from .evaluation import SweepSpec, run_sweep

    methods = tuple(m.replace("-", "_") for m in args.methods)
    bad = [m for m in args.methods if m not in TRAIN_METHODS and m != "fm_feat"]
    if bad:
        raise UsageError(f"--methods: unknown method(s) {', '.join(bad)}")
    needs = sorted({"rf", "fm_feat"} & set(methods))
    started = time.time()
    data, attrs, telemetry = _load_inputs(args, ",".join(needs) if needs else "")
    try:
        spec = SweepSpec(checkpoints=args.checkpoints, methods=methods, factor_counts=args.factors,
                         seeds=args.seeds, iterations=args.iterations, burn_in=args.burn_in,
                         n_estimators=args.trees, group_by_block=args.group_by_block)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if max(args.checkpoints) > args.floor:
        raise UsageError(f"--checkpoints must not exceed --floor ({args.floor})")
    out_dir = Path(args.out_dir) if args.out_dir else default_out_dir("evaluate")
    report = run_sweep(data, spec, SplitSpec(observed_levels=min(args.checkpoints),
                                             test_fraction=args.test_fraction, eval_level_floor=args.floor),
                       level_attributes=attrs, telemetry=telemetry,
                       progress=(lambda msg: print(msg, file=sys.stderr)) if args.verbose else None)
    outputs = report.write(out_dir)
    if args.plot_script:
        outputs.append(write_plot_script(out_dir / "plot_results.py"))
    write_manifest(out_dir, "evaluate", args, {"data": args.data, "features": args.features,
                                               "telemetry": args.telemetry}, args.seeds, outputs, started)
    for (m, k, c), cell in report.cells.items():
        print(f"{m:8s} k={k:<2d} checkpoint={c:<4d} mae={cell.mae:.4f} rmse={cell.rmse:.4f}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    from .analysis import build_factor_tables, interpretation_report, write_analysis
    from .dataset import SplitSpec, load_interactions, split_players
    from .features import FeatureSchema
    from .fm import FmModel, SchemaMismatchError
    from .synth import read_truth

    started = time.time()
    model_path = Path(args.model)
    schema_path = Path(args.schema) if args.schema else model_path.with_name("schema.json")
    raw = json.loads(model_path.read_text())
    if "V" not in raw:
        raise ValueError(f"{model_path} is not a factorization machine model")
    model = FmModel.from_dict(raw)
    schema = FeatureSchema.load(schema_path)
    if model.fingerprint != schema.fingerprint:
        raise SchemaMismatchError(schema.fingerprint, model.fingerprint)

    data = load_interactions(args.data)
    split_path = model_path.with_name("split.json")
    if split_path.exists():
        spec = SplitSpec(**json.loads(split_path.read_text())["spec"])
        train = split_players(data, spec).train
    else:
        known_p, known_l = set(schema.players), set(schema.levels)
        train = data.subset(lambda r: r.player_id in known_p and r.level_id in known_l)
    players, levels = build_factor_tables(model, schema, train)
    skill = difficulty = None
    if args.truth:
        skill, difficulty = read_truth(args.truth)
    report = interpretation_report(players, levels, skill, difficulty)
    out_dir = Path(args.out_dir) if args.out_dir else default_out_dir("analyze")
    outputs = write_analysis(out_dir, players, levels, report)
    if args.plot_script:
        outputs.append(write_plot_script(out_dir / "plot_results.py"))
    write_manifest(out_dir, "analyze", args, {"model": args.model, "schema": str(schema_path), "data": args.data,
                                              "truth": args.truth}, [], outputs, started)
    for name, (rho, n) in report.pairs.items():
        print(f"{name:42s} rho={rho:+.3f} n={n}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fm-difficulty", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="JSON file of flag values keyed by destination name")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset with known ground truth")
    g.add_argument("--players", type=_positive_int, default=200)
    g.add_argument("--levels", type=_positive_int, default=300)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir")
    g.set_defaults(func=cmd_generate)

    def data_flags(sp):
        sp.add_argument("--data", help="interactions CSV (player_id,level_id,attempts)")
        sp.add_argument("--features", help="level attributes CSV")
        sp.add_argument("--telemetry", help="per-(player, level) telemetry CSV")
        sp.add_argument("--floor", type=_positive_int, default=150, help="evaluate levels above this")
        sp.add_argument("--test-fraction", type=float, default=0.01)
        sp.add_argument("--burn-in", type=int, default=50)
        sp.add_argument("--group-by-block", action="store_true",
                        help="separate prior hyperparameters for player, level and feature columns")

    t = sub.add_parser("train", help="fit one method on a player split")
    t.add_argument("--method", choices=TRAIN_METHODS, required=True)
    t.add_argument("--factors", type=int, default=None)
    t.add_argument("--iterations", type=_positive_int, default=None)
    t.add_argument("--init-stdev", type=float, default=None)
    t.add_argument("--trees", type=_positive_int, default=None)
    t.add_argument("--observed", type=_positive_int, default=10, help="levels seen from test players")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    data_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="sweep methods over observation checkpoints")
    e.add_argument("--checkpoints", type=_int_list, default=(10, 20, 30, 50, 100, 150))
    e.add_argument("--methods", type=_method_list, default=("naive", "fm"))
    e.add_argument("--seeds", type=_int_list, default=(0,))
    e.add_argument("--factors", type=_int_list, default=(2,))
    e.add_argument("--iterations", type=_positive_int, default=1000)
    e.add_argument("--trees", type=_positive_int, default=150)
    e.add_argument("--out-dir")
    e.add_argument("--plot-script", action="store_true", help="also write plot_results.py")
    data_flags(e)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="interpret a trained FM model")
    a.add_argument("--model", required=True)
    a.add_argument("--schema", help="defaults to schema.json next to the model")
    a.add_argument("--data", required=True)
    a.add_argument("--truth", help="truth.csv from generate")
    a.add_argument("--out-dir")
    a.add_argument("--plot-script", action="store_true", help="also write plot_results.py")
    a.set_defaults(func=cmd_analyze)
    return p


def parse_args(parser: argparse.ArgumentParser, argv: Sequence[str] | None) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"--config: {exc}")
    if not isinstance(overrides, dict):
        parser.error("--config must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(overrides) - known)
    if unknown:
        parser.error(f"--config: unknown key(s) {', '.join(unknown)}")
    # reparse so explicit flags still beat the file
    converted = {}
    for action in sub._actions:
        if action.dest in overrides:
            v = overrides[action.dest]
            if action.type is not None and isinstance(v, str):
                v = action.type(v)
            elif isinstance(v, list):
                v = tuple(v)
            converted[action.dest] = v
    sub.set_defaults(**converted)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    from .dataset import DataValidationError, ProtocolError
    from .evaluation import ConfigurationError
    from .features import EncodingError
    from .fm import SchemaMismatchError
    from .trainer import NumericalDivergenceError

    parser = build_parser()
    try:
        args = parse_args(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"{parser.prog} {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalDivergenceError as exc:
        print(f"{parser.prog} {args.command}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except SchemaMismatchError as exc:
        print(f"{parser.prog} {args.command}: {exc} (model {exc.found}, schema {exc.expected})", file=sys.stderr)
        return EXIT_INVALID
    except (DataValidationError, ProtocolError, EncodingError, ValueError, KeyError) as exc:
        print(f"{parser.prog} {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"{parser.prog} {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
