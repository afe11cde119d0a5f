"""Batch command line for the proximity-effects toolkit.

Five subcommands wire the library into file-based workflows:

  featurize   respondents + events CSVs -> modeling table CSV
  fit         modeling table -> stored model artifact, MSE report
  importance  stored model + held-out table -> ranked importance CSV
  simulate    benchmark config -> replication results CSV
  effects     stored model + profile -> effect curve CSV

Every run writes a manifest.json beside its outputs recording the
resolved configuration, seeds, input digests, tool version, and
timestamps. Result CSVs are byte-identical when a command is rerun
with the same inputs, flags, and seed; --threads changes wall time,
never results.

Exit codes: 0 success, 2 usage or configuration error, 3 input data
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bart import BartFit, PosteriorMeanPredictor, fit_bart, pack_fit, unpack_fit
from .baselines import LinearModel, fit_lasso, fit_ols
from .cart import GrowControls, RegressionTree, fit_cv
from .dataset import (
    CategoricalSpec,
    FeatureTable,
    ObservationSchema,
    _coerce_ids,
    assemble_table,
    load_events,
    load_gazetteer,
    load_observations,
)
from .effects import apply_overrides, grid_range, pick_profile, sweep
from .errors import ConfigurationError, TreeproxError
from .forest import ForestModel, fit_forest
from .geo import featurize
from .importance import ImportanceReport, mse, permutation_importance
from .simulate import METHODS, DgpSpec, default_complex_dgp, default_linear_dgp
from .simulate import results_to_csv, run_benchmark, synthetic_gazetteer

MODEL_CHOICES = ("ols", "lasso", "tree", "forest", "bart")


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_json(path: str | Path) -> dict:
    with open(path) as fh:
        loaded = json.load(fh)
    if not isinstance(loaded, dict):
        raise ConfigurationError(f"{path}: expected a JSON object at top level")
    return loaded


def _resolve_config(defaults: dict, config_path: str | None, flags: dict) -> dict:
    """defaults < config file < explicitly passed flags (None = not passed)."""
    cfg = dict(defaults)
    if config_path is not None:
        file_cfg = _read_json(config_path)
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(file_cfg)
    for key, value in flags.items():
        if value is None:
            continue
        if key not in defaults:
            raise ConfigurationError(f"--{key.replace('_', '-')} does not apply here")
        cfg[key] = value
    return cfg


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: dict, seeds: dict,
                    inputs: dict[str, str | Path | None], started: str,
                    metrics: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "inputs": {
            role: {"path": str(p), "sha256": _sha256(p)}
            for role, p in inputs.items() if p is not None
        },
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    if metrics is not None:
        manifest["metrics"] = metrics
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _default_threads() -> int:
    return os.cpu_count() or 1


# --- model artifact store ---------------------------------------------------

def save_model(model, out: Path) -> list[str]:
    """Write model.json (plus posterior.npz for a posterior fit) into out."""
    if isinstance(model, BartFit):
        meta, arrays = pack_fit(model)
        meta["arrays"] = "posterior.npz"
        np.savez(out / "posterior.npz", **arrays)
        (out / "model.json").write_text(json.dumps(meta, indent=1) + "\n")
        return ["model.json", "posterior.npz"]
    (out / "model.json").write_text(model.to_json() + "\n")
    return ["model.json"]


def load_model(path: str | Path):
    """Load a stored model from its directory or its model.json path."""
    p = Path(path)
    if p.is_dir():
        p = p / "model.json"
    meta = _read_json(p)
    kind = meta.get("model")
    if kind == "linear":
        return LinearModel.from_json(json.dumps(meta))
    if kind == "tree":
        return RegressionTree.from_payload(meta)
    if kind == "forest":
        return ForestModel.from_json(json.dumps(meta))
    if kind == "bart":
        with np.load(p.parent / meta.get("arrays", "posterior.npz")) as npz:
            arrays = {name: npz[name] for name in npz.files}
        return unpack_fit(meta, arrays)
    raise ConfigurationError(f"{p}: unrecognized model kind {kind!r}")


def _model_columns(model) -> tuple[str, ...]:
    if isinstance(model, LinearModel):
        return tuple(model.coefficients)
    return tuple(model.columns)


def _point_predictor(model):
    return PosteriorMeanPredictor(model) if isinstance(model, BartFit) else model


# --- featurize ---------------------------------------------------------------

FEATURIZE_DEFAULTS = {
    "k": 3,
    "scale": "km",
    "id_column": "id",
    "lat_column": "lat",
    "lon_column": "lon",
    "zip_column": None,
    "numeric": [],
    "categorical": [],
    "outcome": None,
    "impute": False,
    "threads": None,
}


def cmd_featurize(args: argparse.Namespace) -> int:
    started = _now()
    cfg = _resolve_config(FEATURIZE_DEFAULTS, args.config, {
        "k": args.k, "scale": args.scale, "outcome": args.outcome,
        "threads": args.threads,
    })
    schema = ObservationSchema(
        id_column=cfg["id_column"],
        lat_column=cfg["lat_column"],
        lon_column=cfg["lon_column"],
        zip_column=cfg["zip_column"],
        numeric=tuple(cfg["numeric"]),
        categorical=tuple(
            CategoricalSpec(c["name"], tuple(c["levels"])) for c in cfg["categorical"]
        ),
        outcome=cfg["outcome"],
        impute=bool(cfg["impute"]),
    )
    gazetteer = load_gazetteer(args.gazetteer) if args.gazetteer else None
    obs = load_observations(args.respondents, schema, gazetteer)
    events = load_events(args.events)
    prox = featurize(obs.points, events, k=int(cfg["k"]), scale=cfg["scale"])
    table = assemble_table(obs, schema, extra=prox)

    out = _out_dir(args.out)
    table.to_csv(out / "features.csv")
    _write_manifest(out, "featurize", cfg, {}, {
        "respondents": args.respondents, "events": args.events,
        "gazetteer": args.gazetteer, "config": args.config,
    }, started)
    print(f"wrote {out / 'features.csv'} ({table.n} rows, {len(table.feature_names)} columns)")
    return 0


# --- fit ----------------------------------------------------------------------

FIT_DEFAULTS = {
    "ols": {},
    "lasso": {"folds": 10, "tol": 1e-9, "max_passes": 100_000},
    "tree": {"folds": 10, "min_split": 20, "min_leaf": 7, "cp": 0.01,
             "max_splits": None},
    "forest": {"trees": 200, "mtry": None, "min_split": 20, "min_leaf": 7,
               "cp": 0.01, "max_splits": None, "bootstrap": True},
    "bart": {"trees": 200, "iters": 2000, "burn": 1000, "thin": 1, "chains": 1,
             "min_leaf": 5, "n_cuts": 100, "alpha": 0.95, "beta": 2.0,
             "k": 2.0, "nu": 3.0, "q": 0.90},
}


def _fit_dispatch(model: str, cfg: dict, train: FeatureTable,
                  test: FeatureTable | None, seed: int):
    if model == "ols":
        return fit_ols(train)
    if model == "lasso":
        return fit_lasso(train, folds=int(cfg["folds"]), seed=seed,
                         tol=float(cfg["tol"]), max_passes=int(cfg["max_passes"]))
    controls = GrowControls(
        min_split=int(cfg["min_split"]), min_leaf=int(cfg["min_leaf"]),
        cp=float(cfg["cp"]),
        max_splits=None if cfg["max_splits"] is None else int(cfg["max_splits"]),
    ) if model in ("tree", "forest") else None
    if model == "tree":
        return fit_cv(train, folds=int(cfg["folds"]), seed=seed, controls=controls)
    if model == "forest":
        return fit_forest(train, B=int(cfg["trees"]),
                          mtry=None if cfg["mtry"] is None else int(cfg["mtry"]),
                          controls=controls, seed=seed, bootstrap=bool(cfg["bootstrap"]))
    return fit_bart(
        train, m=int(cfg["trees"]), iters=int(cfg["iters"]), burn=int(cfg["burn"]),
        thin=int(cfg["thin"]), alpha=float(cfg["alpha"]), beta=float(cfg["beta"]),
        k=float(cfg["k"]), nu=float(cfg["nu"]), q=float(cfg["q"]),
        min_leaf=int(cfg["min_leaf"]), n_cuts=int(cfg["n_cuts"]),
        chains=int(cfg["chains"]), seed=seed, eval_table=test, keep_trees=True,
    )


def cmd_fit(args: argparse.Namespace) -> int:
    started = _now()
    defaults = dict(FIT_DEFAULTS[args.model])
    defaults.update({"seed": 0, "outcome": None, "features": None, "threads": None})
    cfg = _resolve_config(defaults, args.config, {
        "seed": args.seed, "outcome": args.outcome, "trees": args.trees,
        "max_splits": args.max_splits, "features": args.features,
        "threads": args.threads,
    })
    if cfg["outcome"] is None:
        raise ConfigurationError("--outcome is required (flag or config)")
    seed = int(cfg["seed"])
    if isinstance(cfg["features"], str):
        cfg["features"] = [s.strip() for s in cfg["features"].split(",") if s.strip()]

    train = FeatureTable.from_csv(args.train, outcome=cfg["outcome"])
    test = FeatureTable.from_csv(args.test, outcome=cfg["outcome"]) if args.test else None
    if cfg["features"]:
        train = train.select(cfg["features"])
        test = test.select(cfg["features"]) if test is not None else None
    fitted = _fit_dispatch(args.model, cfg, train, test, seed)

    if isinstance(fitted, BartFit):
        train_pred = fitted.train_draws.mean(axis=0)
        test_pred = fitted.eval_draws.mean(axis=0) if test is not None else None
    else:
        train_pred = fitted.predict(train)
        test_pred = fitted.predict(test) if test is not None else None
    metrics = {"train_mse": mse(train_pred, train.require_outcome())}
    print(f"train mse: {metrics['train_mse']!r}")
    if test is not None:
        metrics["test_mse"] = mse(test_pred, test.require_outcome())
        print(f"test mse: {metrics['test_mse']!r}")

    out = _out_dir(args.out)
    written = save_model(fitted, out)
    cfg["model"] = args.model
    _write_manifest(out, "fit", cfg, {"seed": seed}, {
        "train": args.train, "test": args.test, "config": args.config,
    }, started, metrics=metrics)
    print(f"wrote {', '.join(str(out / w) for w in written)}")
    return 0


# --- importance ----------------------------------------------------------------

def cmd_importance(args: argparse.Namespace) -> int:
    started = _now()
    model = _point_predictor(load_model(args.model))
    test = FeatureTable.from_csv(args.test, outcome=args.outcome)
    report = permutation_importance(
        model, test, K=args.k_perms, seed=args.seed, with_local=args.local)

    out = _out_dir(args.out)
    report.to_csv(out / "importance.csv")
    if args.local:
        report.local_to_csv(out / "local.csv")
    cfg = {"k_perms": args.k_perms, "outcome": args.outcome,
           "local": bool(args.local), "threads": args.threads}
    model_path = Path(args.model)
    _write_manifest(out, "importance", cfg, {"seed": args.seed}, {
        "model": model_path / "model.json" if model_path.is_dir() else model_path,
        "test": args.test,
    }, started, metrics={"mse_base": report.mse_base})
    top = report.ranked()[0]
    print(f"wrote {out / 'importance.csv'}; top feature: {top[0]} ({top[1]:.2f}%)")
    return 0


# --- simulate --------------------------------------------------------------------

SIMULATE_DEFAULTS = {
    "dgp": "complex",
    "n_train": 500,
    "reps": 100,
    "methods": list(METHODS),
    "seed": 0,
    "n_zips": 400,
    "gazetteer_seed": 0,
    "bart": {},
    "threads": None,
}


def _dgp_from_config(value) -> DgpSpec:
    if value == "linear":
        return default_linear_dgp()
    if value == "complex":
        return default_complex_dgp()
    if isinstance(value, dict):
        return DgpSpec.from_dict(value)
    raise ConfigurationError(
        f"dgp must be 'linear', 'complex', or a full spec object, got {value!r}")


def cmd_simulate(args: argparse.Namespace) -> int:
    started = _now()
    cfg = _resolve_config(SIMULATE_DEFAULTS, args.config, {
        "seed": args.seed, "reps": args.reps, "n_train": args.n_train,
        "threads": args.threads,
    })
    dgp = _dgp_from_config(cfg["dgp"])
    threads = int(cfg["threads"]) if cfg["threads"] is not None else _default_threads()
    gazetteer = synthetic_gazetteer(n_zips=int(cfg["n_zips"]),
                                    seed=int(cfg["gazetteer_seed"]))
    rows = run_benchmark(
        gazetteer, dgp, n_train=int(cfg["n_train"]), reps=int(cfg["reps"]),
        methods=tuple(cfg["methods"]), seed=int(cfg["seed"]),
        bart_opts=cfg["bart"] or None, threads=threads)

    out = _out_dir(args.out)
    results_to_csv(rows, out / "results.csv")
    cfg["dgp"] = dgp.to_dict()  # echo the fully resolved rule, not its alias
    cfg["threads"] = threads
    _write_manifest(out, "simulate", cfg, {"seed": int(cfg["seed"])},
                    {"config": args.config}, started)
    print(f"wrote {out / 'results.csv'} ({len(rows)} rows)")
    return 0


# --- effects --------------------------------------------------------------------

def _parse_grid(text: str) -> np.ndarray:
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigurationError(f"grid must look like start:stop:step, got {text!r}")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise ConfigurationError(f"grid pieces must be numbers, got {text!r}") from None
    return grid_range(start, stop, step)


def _parse_override(text: str) -> tuple[str, str | float]:
    key, eq, value = text.partition("=")
    if not eq or not key:
        raise ConfigurationError(f"override must look like column=value, got {text!r}")
    try:
        return key, float(value)
    except ValueError:
        return key, value


def _load_local_report(path: str | Path) -> ImportanceReport:
    p = Path(path)
    if p.is_dir():
        p = p / "local.csv"
    if not p.exists():
        raise ConfigurationError(
            f"{p} not found; --auto-profile needs a prior importance run with --local")
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise ConfigurationError(f"{p}: not a local importance matrix")
        raw_ids, rows = [], []
        for row in reader:
            raw_ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    features = tuple(header[1:])
    return ImportanceReport(
        features=features, importance_pct={}, mse_perm={}, mse_base=float("nan"),
        k=0, seed=0, local=np.asarray(rows, dtype=np.float64),
        row_ids=_coerce_ids(raw_ids))


def cmd_effects(args: argparse.Namespace) -> int:
    started = _now()
    model = load_model(args.model)
    columns = _model_columns(model)
    grid = _parse_grid(args.grid)

    if args.profile:
        raw = _read_json(args.profile)
        bad = [k for k, v in raw.items() if not isinstance(v, (int, float))]
        if bad:
            raise ConfigurationError(f"profile values must be numbers: {', '.join(bad)}")
        source = {k: float(v) for k, v in raw.items()}
    else:
        if not args.test:
            raise ConfigurationError("--auto-profile needs --test to pull the row from")
        report = _load_local_report(args.auto_profile)
        table = FeatureTable.from_csv(args.test, outcome=args.outcome)
        source, _ = pick_profile(report, table, args.feature)

    missing = [c for c in columns if c not in source]
    if missing:
        raise ConfigurationError(f"profile is missing model columns: {', '.join(missing)}")
    profile = {c: source[c] for c in columns}
    if args.override:
        profile = apply_overrides(profile, dict(map(_parse_override, args.override)))

    curve = sweep(model, profile, args.feature, grid, baseline=args.baseline)
    out = _out_dir(args.out)
    curve.to_csv(out / "curve.csv")
    model_path = Path(args.model)
    cfg = {"feature": args.feature, "grid": args.grid, "baseline": args.baseline,
           "override": list(args.override or []), "profile": profile,
           "threads": args.threads}
    _write_manifest(out, "effects", cfg, {}, {
        "model": model_path / "model.json" if model_path.is_dir() else model_path,
        "profile": args.profile, "test": args.test,
    }, started)
    print(f"wrote {out / 'curve.csv'} ({curve.grid.shape[0]} grid points)")
    return 0


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treeprox",
        description="Tree-based learners and effect curves for event-proximity data.")
    parser.add_argument("--version", action="version", version=f"treeprox {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap; results never depend on it")

    p = sub.add_parser("featurize", help="build the modeling table")
    p.add_argument("--respondents", required=True, help="observations CSV")
    p.add_argument("--events", required=True, help="event catalog CSV")
    p.add_argument("--gazetteer", help="zip,lat,lon CSV for zip-coded rows")
    p.add_argument("--k", type=int, default=None, help="events per proximity ordering")
    p.add_argument("--scale", choices=("km", "thousand-km"), default=None)
    p.add_argument("--outcome", default=None, help="outcome column to carry through")
    p.add_argument("--config", help="JSON config (schema columns, defaults)")
    common(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("fit", help="fit and store one model")
    p.add_argument("--model", required=True, choices=MODEL_CHOICES)
    p.add_argument("--train", required=True, help="training table CSV")
    p.add_argument("--test", help="held-out table CSV for an MSE report")
    p.add_argument("--outcome", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trees", type=int, default=None, help="ensemble size")
    p.add_argument("--max-splits", type=int, default=None, dest="max_splits")
    p.add_argument("--features", default=None,
                   help="comma-separated design columns (default: all)")
    p.add_argument("--config", help="JSON config of model options")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("importance", help="permutation importance on held-out data")
    p.add_argument("--model", required=True, help="fit output directory or model.json")
    p.add_argument("--test", required=True, help="held-out table CSV")
    p.add_argument("--outcome", required=True)
    p.add_argument("--k-perms", type=int, default=3, dest="k_perms")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--local", action="store_true",
                   help="also write the per-observation matrix")
    common(p)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("simulate", help="run the benchmark study")
    p.add_argument("--config", help="JSON benchmark config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--n-train", type=int, default=None, dest="n_train")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("effects", help="effect curve for a swept feature")
    p.add_argument("--model", required=True, help="fit output directory or model.json")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--profile", help="JSON file of column values")
    group.add_argument("--auto-profile", dest="auto_profile",
                       help="importance output with a local matrix")
    p.add_argument("--test", help="table CSV to pull the auto profile row from")
    p.add_argument("--outcome", default=None)
    p.add_argument("--feature", required=True, help="column to sweep")
    p.add_argument("--grid", default="0:1:0.1", help="start:stop:step")
    p.add_argument("--baseline", type=float, required=True,
                   help="grid point effects are measured against")
    p.add_argument("--override", action="append",
                   help="column=value tweak applied to the profile; repeatable")
    common(p)
    p.set_defaults(func=cmd_effects)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except json.JSONDecodeError as err:
        print(f"error: bad JSON: {err}", file=sys.stderr)
        return 2
    except TreeproxError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
