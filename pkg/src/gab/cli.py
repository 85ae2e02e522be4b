"""Command-line entry point: ``gab <command> --config run.json``.

Exit codes: 0 success, 2 configuration or validation error, 3 numerical
failure.  Every run writes ``manifest.json`` with the resolved configuration,
so ``gab <command> --config out/manifest.json`` repeats it exactly.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import jsonschema
import numpy as np
import pandas as pd

from . import __version__
from .errors import (
    DataError,
    DegenerateMean,
    EmptyWindow,
    GABError,
    NoConvergence,
    RankDeficient,
    SingularInformation,
    SpecValidationError,
)

log = logging.getLogger("gab")

NUMERICAL = (NoConvergence, SingularInformation, DegenerateMean, RankDeficient)

_MODEL = {
    "type": "object",
    "required": ["family", "n_series", "params"],
    "properties": {
        "schema_version": {"const": 1},
        "family": {"type": "string"},
        "n_series": {"type": "integer", "minimum": 1},
        "lags": {"type": "object", "properties": {"s": {"type": "integer", "minimum": 1},
                                                   "q": {"type": "integer", "minimum": 1}}},
        "params": {"type": "object"},
        "nonlinearity": {},
        "network": {"type": ["array", "string", "null"]},
    },
}

_INIT = {
    "type": "object",
    "properties": {
        "type": {"enum": ["fixed", "warmup"]},
        "p": {"type": ["number", "array"]},
        "extra": {"type": "integer", "minimum": 0},
        "start": {"type": "number"},
    },
}

SCHEMAS = {
    "simulate": {
        "type": "object",
        "required": ["model"],
        "properties": {
            "model": _MODEL,
            "horizon": {"type": "integer", "minimum": 1},
            "burn_in": {"type": "integer", "minimum": 0},
            "init": _INIT,
            "rep": {"type": "integer", "minimum": 0},
        },
    },
    "estimate-binary": {
        "type": "object",
        "required": ["family", "data"],
        "properties": {
            "family": {
                "type": "object",
                "required": ["name"],
                "properties": {
                    "name": {"enum": ["constant", "linear", "logit11", "exchangeable", "interactive", "network"]},
                    "s": {"type": "integer", "minimum": 1},
                    "q": {"type": "integer", "minimum": 1},
                    "use_alpha": {"type": "boolean"},
                    "network": {"type": ["array", "string"]},
                },
            },
            "data": {"type": "string"},
            "fit": {"type": "object"},
        },
    },
    "estimate-poisson": {
        "type": "object",
        "required": ["data"],
        "properties": {"data": {"type": "string"}, "column": {"type": "string"},
                       "n_starts": {"type": "integer", "minimum": 1}},
    },
    "aggregate": {
        "type": "object",
        "properties": {
            "scaling": {"type": "object"},
            "T": {"type": "integer", "minimum": 2},
            "reps": {"type": "integer", "minimum": 1},
            "warmup": {"type": "integer", "minimum": 0},
            "network": {"type": ["object", "null"],
                        "properties": {"degree_factor": {"type": "number", "exclusiveMinimum": 0}}},
        },
    },
    "forecast": {
        "type": "object",
        "required": ["data"],
        "properties": {
            "data": {"type": "string"},
            "split_date": {"type": "string"},
            "holdout": {"type": "integer", "minimum": 0},
            "constant": {"type": "number", "minimum": 0, "maximum": 1},
            "fit": {"type": "object"},
        },
    },
    "ingest": {
        "type": "object",
        "required": ["returns", "factors"],
        "properties": {
            "returns": {"type": "string"},
            "factors": {"type": "string"},
            "split_date": {"type": "string"},
            "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        },
    },
    "diagnose-coupling": {
        "type": "object",
        "required": ["model"],
        "properties": {
            "model": _MODEL,
            "init_a": {"type": ["number", "array"]},
            "init_b": {"type": ["number", "array"]},
            "horizon": {"type": "integer", "minimum": 2},
            "reps": {"type": "integer", "minimum": 1},
            "K": {"type": "number"},
        },
    },
}


class ConfigError(GABError, ValueError):
    pass


def _resolve(path, base):
    return path if os.path.isabs(path) else os.path.join(base, path)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def _read_panel_csv(path):
    """0/1 panel from binary_panel.csv or a simulated y.csv -> (index, ids, y (N, T))."""
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read panel {path}: {exc}") from exc
    index = df["date"] if "date" in df else df.get("t", pd.Series(range(len(df))))
    cols = [c for c in df.columns if c not in ("date", "t", "X")]
    y = df[cols].to_numpy().T
    if not np.isin(y, (0, 1)).all():
        raise DataError(f"{path} is not a 0/1 panel")
    return index, cols, y.astype(float)


def _sim_config(cfg, seed, threads):
    from .simulate import Fixed, SimConfig, StationaryWarmup

    init = cfg.get("init", {"type": "warmup"})
    if init.get("type", "warmup") == "fixed":
        init_obj = Fixed(np.asarray(init.get("p", 0.5), float))
    else:
        init_obj = StationaryWarmup(init.get("extra", 1000), init.get("start"))
    return SimConfig(seed=seed, horizon=cfg.get("horizon", 1000), burn_in=cfg.get("burn_in", 0),
                     init=init_obj, threads=threads)


def _load_model(cfg, base):
    from .model import ModelSpec, require_valid

    d = dict(cfg)
    if isinstance(d.get("network"), str):
        d["network"] = _resolve(d["network"], base)
    return require_valid(ModelSpec.from_dict(d))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_simulate(cfg, args, base):
    from .simulate import simulate

    spec = _load_model(cfg["model"], base)
    traj = simulate(spec, _sim_config(cfg, args.seed, args.threads), rep=cfg.get("rep", 0))
    traj.to_csv(args.out_dir)
    X = traj.y.sum(axis=0)
    summary = {"spec_hash": traj.spec_hash, "n_series": traj.n_series, "horizon": traj.horizon,
               "mean_y": float(traj.y.mean()), "mean_X": float(X.mean()), "mean_p": float(traj.p.mean())}
    _write_json(os.path.join(args.out_dir, "summary.json"), summary)
    return ["p.csv", "y.csv", "X.csv", "summary.json"]


def cmd_estimate(cfg, args, base):
    if args.kind == "poisson":
        from .poisson import fit_poisson_mle

        path = _resolve(cfg["data"], base)
        try:
            df = pd.read_csv(path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            raise DataError(f"cannot read counts {path}: {exc}") from exc
        col = cfg.get("column", "X")
        if col not in df:
            raise DataError(f"{path} has no column {col!r}")
        fit = fit_poisson_mle(df[col].to_numpy(), n_starts=cfg.get("n_starts", 3), seed=args.seed)
        _write_json(os.path.join(args.out_dir, "poisson_fit.json"), fit.to_dict())
        return ["poisson_fit.json"]

    from .mle import BinaryFamily, FitConfig, fit_mle

    _, ids, y = _read_panel_csv(_resolve(cfg["data"], base))
    fc = cfg["family"]
    W = fc.get("network")
    if isinstance(W, str):
        from .model import load_network_csv

        W = load_network_csv(_resolve(W, base))
    fam = BinaryFamily(fc["name"], y.shape[0], fc.get("s", 1), fc.get("q", 1), fc.get("use_alpha", True),
                       None if W is None else np.asarray(W, float))
    fit_cfg = FitConfig(seed=args.seed, threads=args.threads, **cfg.get("fit", {}))
    fit = fit_mle(fam, y, fit_cfg)
    out = fit.to_dict()
    out["series"] = ids
    _write_json(os.path.join(args.out_dir, "fit.json"), out)
    return ["fit.json"]


def cmd_aggregate(cfg, args, base):
    from .aggregation import (
        RareEventScaling,
        diagnostics_to_csv,
        log_degree,
        run_limit_experiment,
        run_network_limit_experiment,
    )

    scaling = RareEventScaling(**cfg.get("scaling", {}))
    T, reps, warm = cfg.get("T", 2000), cfg.get("reps", 200), cfg.get("warmup", 300)
    diags = run_limit_experiment(scaling, T, reps, seed=args.seed, threads=args.threads, warmup=warm)
    diagnostics_to_csv(diags, os.path.join(args.out_dir, "diagnostics.csv"))
    outputs = ["diagnostics.csv"]
    net = cfg.get("network")
    if net:
        comps = run_network_limit_experiment(scaling, log_degree(net.get("degree_factor", 4.0)), T, reps,
                                             seed=args.seed, threads=args.threads, warmup=warm)
        diagnostics_to_csv([c.network for c in comps], os.path.join(args.out_dir, "network_diagnostics.csv"))
        outputs.append("network_diagnostics.csv")
    return outputs


def forecast_comparison(y, T_est, constant=0.05, fit_cfg=None, seed=0, threads=1):
    """Pooled holdout MSE of the four benchmark forecasters.

    Model 1: heterogeneous interactive fit with alpha_i = 0.  Model 2:
    homogeneous interactive calibrated from a Poisson fit to the aggregate
    count.  Model 3: constant probability.  Model 4: yesterday's outcome.
    """
    from .mle import (
        BinaryFamily,
        FitConfig,
        constant_forecast,
        fit_mle,
        forecast_one_step,
        mse_eval,
        persistence_forecast,
    )
    from .poisson import calibrate_binary_from_poisson, fit_poisson_mle

    y = np.asarray(y, float)
    N, T = y.shape
    if T_est >= T:
        raise EmptyWindow("holdout window is empty")
    fit_cfg = fit_cfg or FitConfig(seed=seed, threads=threads)
    est = y[:, :T_est]
    fam = BinaryFamily("interactive", N, use_alpha=False)
    m1 = fit_mle(fam, est, fit_cfg)
    pois = fit_poisson_mle(est.sum(axis=0), seed=seed)
    spec2 = calibrate_binary_from_poisson(pois.params, N)
    hold = slice(T_est, T)
    f1 = forecast_one_step(m1, y)[:, hold]
    f2 = forecast_one_step(spec2, y, p_init=np.full(N, est.mean()))[:, hold]
    f3 = constant_forecast(y, constant)[:, hold]
    f4 = persistence_forecast(y)[:, hold]
    real = y[:, hold]
    rows = {f"model{j}": mse_eval(f, real).pooled for j, f in enumerate((f1, f2, f3, f4), start=1)}
    return rows, m1, pois


def cmd_forecast(cfg, args, base):
    index, ids, y = _read_panel_csv(_resolve(cfg["data"], base))
    T = y.shape[1]
    if "split_date" in cfg:
        from .pipeline import estimation_mask

        T_est = int(estimation_mask(pd.to_datetime(index), cfg["split_date"]).sum())
    else:
        T_est = T - cfg.get("holdout", max(1, T // 5))
    if T_est >= T:
        raise EmptyWindow("holdout window is empty")
    from .mle import FitConfig

    fit_cfg = FitConfig(seed=args.seed, threads=args.threads, **cfg.get("fit", {}))
    rows, m1, pois = forecast_comparison(y, T_est, cfg.get("constant", 0.05), fit_cfg, args.seed, args.threads)
    path = os.path.join(args.out_dir, "mse.csv")
    with open(path, "w") as fh:
        fh.write("model,description,pooled_mse\n")
        desc = {"model1": "interactive heterogeneous alpha=0", "model2": "interactive calibrated from Poisson",
                "model3": f"constant {cfg.get('constant', 0.05)}", "model4": "persistence"}
        for k, v in rows.items():
            fh.write(f"{k},{desc[k]},{v!r}\n")
    _write_json(os.path.join(args.out_dir, "poisson_fit.json"), pois.to_dict())
    return ["mse.csv", "poisson_fit.json"]


def cmd_ingest(cfg, args, base):
    from .pipeline import build_binary_panel

    panel, report = build_binary_panel(_resolve(cfg["returns"], base), _resolve(cfg["factors"], base),
                                       cfg.get("split_date"), cfg.get("level", 0.05))
    panel.to_csv(args.out_dir)
    _write_json(os.path.join(args.out_dir, "ingest_report.json"), {
        "rejected_series": report.rejected_series,
        "n_return_dates": report.n_return_dates,
        "n_factor_dates": report.n_factor_dates,
        "n_joined": report.n_joined,
        "estimation_dates": panel.split_index,
        "in_sample_flag_rate": float(panel.estimation.mean()),
        "holdout_flag_rate": float(panel.holdout.mean()) if panel.holdout.size else None,
    })
    return ["binary_panel.csv", "thresholds.csv", "ingest_report.json"]


def cmd_diagnose_coupling(cfg, args, base):
    from .model import check_contraction
    from .simulate import SimConfig, coupled_simulate

    spec = _load_model(cfg["model"], base)
    report = check_contraction(spec, K=cfg.get("K"))
    trace = coupled_simulate(spec, np.asarray(cfg.get("init_a", 0.0), float), np.asarray(cfg.get("init_b", 1.0), float),
                             SimConfig(seed=args.seed, horizon=cfg.get("horizon", 100), threads=args.threads),
                             cfg.get("reps", 200))
    with open(os.path.join(args.out_dir, "coupling.csv"), "w") as fh:
        fh.write("t,distance\n")
        for t, d in enumerate(trace.distance):
            fh.write(f"{t},{float(d)!r}\n")
    out = report.to_dict()
    out.update({"slope": trace.slope, "rate": trace.rate, "n_fit": trace.n_fit, "reps": trace.reps})
    _write_json(os.path.join(args.out_dir, "contraction.json"), out)
    return ["coupling.csv", "contraction.json"]


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "aggregate": cmd_aggregate,
    "forecast": cmd_forecast,
    "ingest": cmd_ingest,
    "diagnose-coupling": cmd_diagnose_coupling,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory (default .)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker cap (default 1)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    p = argparse.ArgumentParser(prog="gab", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"gab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "estimate":
            sp.add_argument("kind", choices=["binary", "poisson"])
    return p


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def run(argv=None):
    args = build_parser().parse_args(argv)
    args.seed = getattr(args, "seed", None)
    args.out_dir = getattr(args, "out_dir", ".")
    args.threads = getattr(args, "threads", 1)
    cfg_path = getattr(args, "config", None)
    cfg = _load_config(cfg_path)
    base = os.path.dirname(os.path.abspath(cfg_path)) if cfg_path else os.getcwd()
    if "manifest_version" in cfg:  # re-run from a manifest
        if args.seed is None:
            args.seed = cfg.get("seed", 0)
        cfg = cfg["config"]
        base = cfg.pop("_base", base)
    if args.seed is None:
        args.seed = 0
    key = f"estimate-{args.kind}" if args.command == "estimate" else args.command
    try:
        jsonschema.validate(cfg, SCHEMAS[key])
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config error at {'/'.join(map(str, exc.absolute_path)) or '<root>'}: {exc.message}")
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = COMMANDS[args.command](cfg, args, base)
    manifest = {
        "manifest_version": 1,
        "software": {"name": "gab", "version": __version__},
        "command": args.command,
        "kind": getattr(args, "kind", None),
        "seed": args.seed,
        "threads": args.threads,
        "config": dict(cfg, _base=base),
        "outputs": outputs,
    }
    _write_json(os.path.join(args.out_dir, "manifest.json"), manifest)
    return 0


def main(argv=None):
    level = getattr(logging, os.environ.get("GAB_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except NUMERICAL as exc:
        print(f"gab: numerical failure: {exc}", file=sys.stderr)
        return 3
    except SpecValidationError as exc:
        print(f"gab: invalid model spec:\n  " + "\n  ".join(exc.report.failures()), file=sys.stderr)
        return 2
    except (GABError, ValueError, KeyError, OSError) as exc:
        print(f"gab: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
