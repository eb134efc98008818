"""Command-line interface: ``spectf <command> [options]``.

Every command writes its outputs, plus ``config.json`` with the resolved
options, into the ``--out`` directory. Outputs depend only on the inputs,
the options and the seed; the worker count is not recorded and does not
change results.

Exit codes: 0 success, 1 usage error, 2 data validation error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .admm import PenaltySpec
from .diffops import DimensionError
from .ingest import (IngestError, Schema, SpectraTable, columns_for,
                     format_float, load_dataset, table_from_arrays, write_csv)
from .inference import wild_bootstrap
from .models import (DivergenceError, TfFit, cross_validate, default_lambda_grid, fit,
                     predict)
from .simulation import (ESTIMATORS, ScenarioSpec, config_dict, gen_functional_covariates,
                         gen_scenario, native_grid, run_table1)

logger = logging.getLogger("spectf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _int_list(text: str, what: str) -> list:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}")
    if not vals:
        raise UsageError(f"{what} is empty")
    return vals


def _float_list(text: str, what: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated numbers, got {text!r}")


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("SPECTF_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"SPECTF_SEED must be an integer, got {env!r}")


def _threads(args) -> int:
    t = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if t < 1:
        raise UsageError("--threads must be positive")
    return int(t)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _schema(args) -> Schema:
    schema = Schema.load(args.schema) if getattr(args, "schema", None) else Schema()
    changes = {}
    if getattr(args, "aggregate", None) is not None:
        changes["aggregate"] = args.aggregate
    if getattr(args, "log_response", False):
        changes["transform"] = "log"
    return Schema.from_dict({**schema.to_dict(), **changes}) if changes else schema


def _table(path, schema: Schema, need_response: bool = True) -> SpectraTable:
    table = load_dataset(path, schema)
    if need_response and table.response is None:
        raise IngestError(f"{path}: response column {schema.response!r} not found")
    return table


def _penalty_grid(args, table, family, orders):
    return default_lambda_grid(table.absorbances, table.response, orders, family, table.Z,
                               args.intercept)


def _select(args, table, family, orders, seed, threads, schema):
    """Resolve the penalty from ``--lambda``, ``--holdout`` or ``--cv``."""
    if args.lam is not None and args.holdout:
        raise UsageError("--lambda and --holdout are mutually exclusive")
    if args.cv is not None and args.holdout:
        raise UsageError("--cv and --holdout are mutually exclusive")
    if args.lam is not None:
        lams = _float_list(args.lam, "--lambda")
        if len(lams) != len(orders):
            raise UsageError("--lambda needs one value per penalty order")
        return PenaltySpec.from_orders(orders, lams), None
    grid = _penalty_grid(args, table, family, orders)
    if args.holdout:
        hold = _table(args.holdout, _schema_with_levels(schema, table), True)
        if not np.array_equal(hold.wavelengths, table.wavelengths):
            raise IngestError(f"{args.holdout}: wavelength grid differs from the training data")
        Zh = None if table.Z is None else columns_for(table.scalar_names, hold)
        holdout = (hold.absorbances, hold.response) + (() if Zh is None else (Zh,))
        rep = cross_validate(table.absorbances, table.response, grid, family, table.Z,
                             args.intercept, seed=seed, holdout=holdout)
    else:
        K = args.cv if args.cv is not None else 10
        if K < 2 or K > table.n:
            raise UsageError(f"--cv must lie in [2, n={table.n}]")
        rep = cross_validate(table.absorbances, table.response, grid, family, table.Z,
                             args.intercept, K=K, seed=seed, threads=threads)
    if not np.any(np.isfinite(rep.mean)):
        raise DivergenceError("every candidate penalty failed to fit")
    return rep.best, rep


def _schema_with_levels(schema: Schema, table: SpectraTable) -> Schema:
    """Schema that dummy-codes new data with the training data's levels."""
    levels = dict(table.metadata.get("categorical", {}))
    return Schema.from_dict({**schema.to_dict(), "categorical": levels})


def _model_metadata(table: SpectraTable, schema: Schema, data_path) -> dict:
    return {
        "schema": _schema_with_levels(schema, table).to_dict(),
        "transform": table.metadata.get("transform", "identity"),
        "aggregate": int(table.metadata.get("aggregate", 1)),
        "response_name": table.response_name,
        "n": table.n,
        "data": str(data_path),
    }


def _load_model(path) -> TfFit:
    try:
        return TfFit.from_json(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, KeyError) as exc:
        raise IngestError(f"{path}: not a valid model file ({exc})") from exc


def _matching_table(model: TfFit, path, need_response: bool):
    """Read data with the model's stored preprocessing and check the grid."""
    schema = Schema.from_dict(model.metadata["schema"])
    table = _table(path, schema, need_response)
    if table.p != model.p:
        raise IngestError(
            f"{path}: {table.p} wavelengths after preprocessing, model expects {model.p}")
    if model.grid is not None and not np.allclose(table.wavelengths, model.grid, rtol=0, atol=1e-9):
        raise IngestError(f"{path}: wavelength grid differs from the model's")
    names = [s for s in model.scalar_names if s != "intercept"]
    Z = columns_for(names, table) if names else None
    return table, Z


def _fit_report(model: TfFit, table: SpectraTable, Z, cv_report) -> dict:
    fitted = predict(model, table.absorbances, Z)
    return {
        "penalty": model.penalty.to_dict(),
        "family": model.family.kind,
        "diagnostics": model.to_dict()["diagnostics"],
        "gamma": dict(zip(model.scalar_names, [float(v) for v in model.gamma_hat])),
        "fitted": {"id": list(table.ids), "value": [float(v) for v in fitted]},
        "selection": None if cv_report is None else cv_report.to_dict(),
    }


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    seed = _resolve_seed(args)
    threads = _threads(args)
    orders = _int_list(args.orders, "--orders")
    schema = _schema(args)
    table = _table(args.data, schema)
    penalty, rep = _select(args, table, args.family, orders, seed, threads, schema)
    model = fit(table.absorbances, table.response, penalty, family=args.family, Z=table.Z,
                intercept=args.intercept, grid=table.wavelengths, scalar_names=table.scalar_names,
                metadata=_model_metadata(table, schema, args.data))
    out = _out_dir(args)
    (out / "model.json").write_text(model.to_json(), encoding="utf-8")
    _dump_json(_fit_report(model, table, table.Z, rep), out / "fit_report.json")
    _dump_json(_config(args, seed, {"schema": schema.to_dict(), "orders": orders}), out / "config.json")
    lam = ", ".join(f"order {o}: {format_float(l)}" for o, l in zip(penalty.orders, penalty.lams))
    print(f"selected penalty ({lam}); wrote {out / 'model.json'}")
    return EXIT_OK


def cmd_cv(args) -> int:
    seed = _resolve_seed(args)
    threads = _threads(args)
    orders = _int_list(args.orders, "--orders")
    schema = _schema(args)
    table = _table(args.data, schema)
    args.lam = None
    _, rep = _select(args, table, args.family, orders, seed, threads, schema)
    out = _out_dir(args)
    _dump_json(rep.to_dict(), out / "cv.json")
    _dump_json(_config(args, seed, {"schema": schema.to_dict(), "orders": orders}), out / "config.json")
    print(f"best penalty index {rep.best_index}: {rep.best.lams}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    table, Z = _matching_table(model, args.data, need_response=False)
    eta = model.linear_predictor(table.absorbances, Z)
    mu = model.family.mean(eta)
    out = _out_dir(args)
    lines = []
    if model.family.kind == "bernoulli":
        lines.append("id,prediction,probability,label")
        for i, m in zip(table.ids, mu):
            lines.append(f"{i},{format_float(m)},{format_float(m)},{int(m >= 0.5)}")
    elif model.metadata.get("transform") == "log":
        lines.append("id,prediction,prediction_original_scale")
        for i, m in zip(table.ids, mu):
            lines.append(f"{i},{format_float(m)},{format_float(np.exp(m))}")
    else:
        lines.append("id,prediction")
        for i, m in zip(table.ids, mu):
            lines.append(f"{i},{format_float(m)}")
    (out / "predictions.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _dump_json(_config(args, None, {}), out / "config.json")
    print(f"wrote {len(table.ids)} predictions to {out / 'predictions.csv'}")
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    seed = _resolve_seed(args)
    threads = _threads(args)
    model = _load_model(args.model)
    if model.family.kind != "gaussian":
        raise UsageError("bootstrap bands are only available for Gaussian models")
    table, Z = _matching_table(model, args.data, need_response=True)
    bands = wild_bootstrap(model, table.absorbances, table.response, Z, B=args.boot,
                           law=args.law, conf_level=args.conf, seed=seed, threads=threads)
    out = _out_dir(args)
    (out / "bands.csv").write_text(bands.to_csv(), encoding="utf-8")
    (out / "scalars.csv").write_text(bands.scalar_table_csv(), encoding="utf-8")
    _dump_json(_config(args, seed, {"diagnostics": bands.diagnostics}), out / "config.json")
    print(f"{int(bands.significant_mask.sum())} of {model.p} wavelengths significant at "
          f"level {args.conf}; wrote {out / 'bands.csv'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    seed = _resolve_seed(args)
    spec = ScenarioSpec(args.scenario, args.target, args.n, args.p, args.snr, seed=seed,
                        noiseless=args.noiseless)
    X = gen_functional_covariates(spec.n, spec.p, spec.x_seed)
    X_val = gen_functional_covariates(spec.n, spec.p, spec.x_seed + 1)
    rng_train, rng_val = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    out = _out_dir(args)
    grid = native_grid(spec.target, spec.p)
    for name, XX, rng in (("data.csv", X, rng_train), ("validation.csv", X_val, rng_val)):
        d = gen_scenario(spec, XX, rng)
        write_csv(table_from_arrays(d.X, d.y, d.Z, wavelengths=np.arange(1, spec.p + 1)), out / name)
    truth = ["wavelength,grid,f_true"] + [
        f"{j + 1},{format_float(g)},{format_float(f)}" for j, (g, f) in enumerate(zip(grid, d.f_true))]
    (out / "truth.csv").write_text("\n".join(truth) + "\n", encoding="utf-8")
    extra = {"gamma": list(spec.gamma) if spec.kind == "b" else None, "x_seed": spec.x_seed,
             "family": spec.family.kind}
    _dump_json(_config(args, seed, extra), out / "config.json")
    print(f"wrote scenario {spec.kind}/{spec.target} datasets to {out}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    seed = _resolve_seed(args)
    threads = _threads(args)
    ests = tuple(args.estimators.split(","))
    bad = [e for e in ests if e not in ESTIMATORS]
    if bad:
        raise UsageError(f"unknown estimators {bad}; choose from {list(ESTIMATORS)}")
    report = run_table1(reps=args.reps, seed=seed, threads=threads, n=args.n, p=args.p,
                        snr=args.snr, scenarios=tuple(args.scenarios.split(",")),
                        targets=tuple(args.targets.split(",")), estimators=ests)
    out = _out_dir(args)
    (out / "table1.csv").write_text(report.to_csv(), encoding="utf-8")
    failures = {"/".join(k): v for k, v in report.failures.items()}
    cfg = config_dict(report.config)
    cfg.pop("threads")
    _dump_json(_config(args, seed, {"benchmark": cfg, "failures": failures}), out / "config.json")
    print(f"wrote {len(report.rows())} rows to {out / 'table1.csv'}")
    return EXIT_OK


def _config(args, seed, extra: dict) -> dict:
    skip = {"func", "threads", "verbose", "out"}
    d = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    d["seed"] = seed
    d["version"] = __version__
    d.update(extra)
    return d


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spectf", description="Functional trend filtering for spectra.")
    p.add_argument("--version", action="version", version=f"spectf {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True, threads=True):
        sp.add_argument("--out", required=True, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="random seed (fallback: SPECTF_SEED, then 0)")
        if threads:
            sp.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")

    def data_opts(sp):
        sp.add_argument("--data", required=True, help="wide spectra CSV")
        sp.add_argument("--schema", help="JSON schema with column roles and preprocessing")
        sp.add_argument("--aggregate", type=int, default=None, help="average blocks of F wavelengths")
        sp.add_argument("--log-response", action="store_true", help="model log(response)")
        sp.add_argument("--family", choices=["gaussian", "bernoulli", "poisson"], default="gaussian")
        sp.add_argument("--orders", default="4", help="penalized derivative orders, e.g. 4 or 4,1")
        sp.add_argument("--no-intercept", dest="intercept", action="store_false",
                        help="omit the unpenalized intercept")
        sp.add_argument("--holdout", help="validation CSV used to select the penalty")

    sp = sub.add_parser("fit", help="fit a model")
    data_opts(sp)
    sel = sp.add_mutually_exclusive_group()
    sel.add_argument("--lambda", dest="lam", help="fixed penalty weight(s), one per order")
    sel.add_argument("--cv", type=int, default=None, help="K-fold cross-validation (default 10)")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("cv", help="cross-validate a penalty grid")
    data_opts(sp)
    sp.add_argument("--cv", type=int, default=None, help="number of folds (default 10)")
    common(sp)
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("predict", help="predict from a fitted model")
    sp.add_argument("--model", required=True, help="model.json written by fit")
    sp.add_argument("--data", required=True, help="wide spectra CSV")
    common(sp, seed=False, threads=False)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("bootstrap", help="wild-bootstrap bands for a Gaussian model")
    sp.add_argument("--model", required=True, help="model.json written by fit")
    sp.add_argument("--data", required=True, help="the data the model was fitted on")
    sp.add_argument("--boot", type=int, default=1000, help="number of replicates")
    sp.add_argument("--conf", type=float, default=0.95, help="band level")
    sp.add_argument("--law", choices=["mammen", "rademacher", "uniform"], default="mammen")
    common(sp)
    sp.set_defaults(func=cmd_bootstrap)

    sp = sub.add_parser("simulate", help="write a synthetic dataset")
    sp.add_argument("--scenario", choices=["a", "b", "c"], default="a")
    sp.add_argument("--target", choices=["f1", "f2", "f3"], default="f2")
    sp.add_argument("--n", type=int, default=250)
    sp.add_argument("--p", type=int, default=100)
    sp.add_argument("--snr", type=float, default=4.0)
    sp.add_argument("--noiseless", action="store_true", help="response equals the mean")
    common(sp, threads=False)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("benchmark", help="run the synthetic MISE benchmark")
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--n", type=int, default=250)
    sp.add_argument("--p", type=int, default=100)
    sp.add_argument("--snr", type=float, default=4.0)
    sp.add_argument("--scenarios", default="a,b,c")
    sp.add_argument("--targets", default="f1,f2,f3")
    sp.add_argument("--estimators", default=",".join(ESTIMATORS))
    common(sp)
    sp.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"spectf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"spectf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestError, DimensionError, FileNotFoundError) as exc:
        print(f"spectf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"spectf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"spectf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
