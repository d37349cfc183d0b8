"""Command-line driver.

Every command writes into ``--out``::

    run.json     resolved configuration
    models/      forecaster bundles
    reports/     metrics, tables, actions (JSON and CSV)
    dumps/       plot-ready CSV (grids, per-index errors, trajectory likelihoods)

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import evaluation as ev
from .dataset import SynthParams, load_csv, synth_load
from .errors import (
    CanfError,
    ConfigError,
    DataError,
    IncompatibleBundles,
    ParseError,
    WindowLengthMismatch,
)
from .experiments import (
    BenchmarkConfig,
    ToyConfig,
    default_strategy_configs,
    prepare_datasets,
    run_benchmark,
    run_toy,
)
from .forecasters import CANFForecaster, STRATEGIES, ForecasterConfig, fit_forecaster, hash_seed, load_forecaster

log = logging.getLogger("canf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class RunConfig:
    """Resolved settings for one invocation; JSON file values, then flag overrides."""

    experiment: str = ""
    csv: str | None = None
    value_column: str = "load_kwh"
    timestamp_column: str = "timestamp"
    weeks: int = 52
    synth: dict = field(default_factory=dict)
    L: int = 7
    K: int = 12
    D: int = ev.DEFAULT_D
    alpha: float = ev.DEFAULT_ALPHA
    m: int = ev.DEFAULT_M
    quantile: float = ev.DEFAULT_QUANTILE
    test_fraction: float = 0.25
    val_fraction: float = 0.2
    strategies: list = field(default_factory=lambda: ["cg", "cgmm", "canf", "arma"])
    strategy_params: dict = field(default_factory=dict)
    seed: int = 0
    seeds: list | None = None
    toy: dict = field(default_factory=dict)
    out: str = "run"

    def validate(self):
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}; choose from {', '.join(STRATEGIES)}")
        if self.L < 1 or self.K < 1:
            raise ConfigError("L and K must be >= 1")
        if not 1 <= self.D <= self.K:
            raise ConfigError(f"D must satisfy 1 <= D <= K={self.K}, got {self.D}")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if not 0 < self.quantile < 1:
            raise ConfigError("quantile must lie in (0, 1)")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if not 0 < self.test_fraction < 1 or not 0 < self.val_fraction < 1:
            raise ConfigError("test_fraction and val_fraction must lie in (0, 1)")
        if self.csv is not None and not os.path.isfile(self.csv):
            raise ConfigError(f"CSV file not found: {self.csv}")
        if self.weeks < 1:
            raise ConfigError("weeks must be >= 1")
        try:
            SynthParams.from_dict(self.synth)
            for s in self.strategies:
                self.forecaster_config(s)
            ToyConfig(**self.toy)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def params_for(self, strategy):
        merged = default_strategy_configs().get(strategy, {})
        merged.update(self.strategy_params.get(strategy, {}))
        return merged

    def forecaster_config(self, strategy):
        return ForecasterConfig(strategy, self.L, self.K, self.seed, **self.params_for(strategy))


def _read_json(path):
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a JSON object")
    return obj


_FLAG_FIELDS = ("csv", "value_column", "timestamp_column", "weeks", "L", "K", "D", "alpha", "m", "seed", "out")


def resolve_config(args):
    known = {f.name for f in fields(RunConfig)}
    values = {}
    if getattr(args, "config", None):
        raw = _read_json(args.config)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(raw)
    for name in _FLAG_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "strategy", None):
        values["strategies"] = list(args.strategy)
    if args.command in ("toy", "benchmark") and getattr(args, "seed", None) is not None and "seeds" not in values:
        values["seeds"] = [args.seed]
    values["experiment"] = args.command
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def _prepare_out(cfg):
    for sub in ("models", "reports", "dumps"):
        os.makedirs(os.path.join(cfg.out, sub), exist_ok=True)
    ev.write_json(os.path.join(cfg.out, "run.json"), asdict(cfg))


def _series(cfg):
    if cfg.csv:
        return load_csv(cfg.csv, cfg.value_column, cfg.timestamp_column, os.path.basename(cfg.csv))
    return synth_load(cfg.weeks, SynthParams.from_dict(cfg.synth), hash_seed(cfg.seed, 20))


def _datasets(cfg):
    return prepare_datasets(_series(cfg), cfg.L, cfg.K, cfg.test_fraction, cfg.val_fraction,
                            hash_seed(cfg.seed, 21))


# --------------------------------------------------------------------------
# commands


def cmd_toy(cfg):
    toy = dict(cfg.toy)
    if cfg.seeds is not None:
        toy["seeds"] = cfg.seeds
    report = run_toy(ToyConfig(**toy), cfg.out)
    print(ev.dumps_json(report["summary"]), end="")
    return report


def cmd_benchmark(cfg):
    seeds = cfg.seeds if cfg.seeds is not None else list(range(10))
    bc = BenchmarkConfig(seeds=seeds, weeks=cfg.weeks, L=cfg.L, K=cfg.K, D=cfg.D, alpha=cfg.alpha, m=cfg.m,
                         quantile=cfg.quantile, test_fraction=cfg.test_fraction, val_fraction=cfg.val_fraction,
                         strategies=cfg.strategies, strategy_params=cfg.strategy_params, synth=cfg.synth)
    report = run_benchmark(bc, cfg.out)
    print(ev.dumps_json({"checks": report["checks"], "summary": report["summary"]}), end="")
    return report


def cmd_synth(cfg):
    series = synth_load(cfg.weeks, SynthParams.from_dict(cfg.synth), hash_seed(cfg.seed, 20))
    path = os.path.join(cfg.out, "dumps", "synthetic_load.csv")
    series.to_csv(path, cfg.timestamp_column, cfg.value_column)
    print(path)
    return path


def cmd_fit(cfg):
    train, val, _ = _datasets(cfg)
    out = {}
    for s in cfg.strategies:
        log.info("fitting %s on %d windows (%d validation)", s, len(train), len(val))
        fc = fit_forecaster(cfg.forecaster_config(s), train, val)
        fc.save(os.path.join(cfg.out, "models", s))
        # relative to --out so reports do not depend on where the run lives
        out[s] = os.path.join("models", s)
    ev.write_json(os.path.join(cfg.out, "reports", "fit.json"),
                  {"bundles": out, "n_train": len(train), "n_val": len(val)})
    print(ev.dumps_json(out), end="")
    return out


def read_window(path, value_column="load_kwh"):
    """Window values from a CSV with a ``value_column`` header, or one bare number per line."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError("window file is empty", row=1)
    header = [c.strip() for c in rows[0]]
    if value_column in header:
        col, body, first = header.index(value_column), rows[1:], 2
    else:
        col, body, first = 0, rows, 1
    values = []
    for i, r in enumerate(body, start=first):
        try:
            values.append(float(r[col]))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"cannot read a load value: {r}", row=i) from exc
    return np.array(values)


def _load_bundle(path):
    if not os.path.isfile(os.path.join(path, "config.json")):
        raise ConfigError(f"not a forecaster bundle: {path}")
    return load_forecaster(path)


def _standardize(fc, x):
    return x if fc.stats is None else (x - fc.stats[0]) / fc.stats[1]


def _destandardize(fc, y):
    return y if fc.stats is None else y * fc.stats[1] + fc.stats[0]


def _window_for(fc, path, value_column):
    if not os.path.isfile(path):
        raise ConfigError(f"window file not found: {path}")
    x = read_window(path, value_column)
    if x.size != fc.L + 1:
        raise WindowLengthMismatch(f"window has {x.size} values; bundle needs L+1={fc.L + 1}")
    return x


def _mixture_summary(fc, fd):
    if not fd.is_analytic:
        return {"type": "samples"}
    scale = 1.0 if fc.stats is None else fc.stats[1]
    comps = sorted(zip(fd.mixture.weights, fd.mixture.components), key=lambda t: -t[0])
    return {
        "type": "mixture",
        "k": fd.mixture.k,
        "weights": [float(w) for w, _ in comps],
        "means": [_destandardize(fc, c.mean).tolist() for _, c in comps],
        "std": [(np.sqrt(np.diag(c.covariance)) * scale).tolist() for _, c in comps],
    }


def cmd_forecast(cfg, bundle, window):
    fc = _load_bundle(bundle)
    x = _window_for(fc, window, cfg.value_column)
    fd = fc.forecast(_standardize(fc, x))
    samples = _destandardize(fc, fd.sample(cfg.m, hash_seed(cfg.seed, 30)))
    q = {str(p): np.quantile(samples, p, axis=0).tolist() for p in (0.1, 0.5, 0.9)}
    report = {
        "strategy": fc.strategy,
        "input": x.tolist(),
        "mean": samples.mean(axis=0).tolist(),
        "quantiles": q,
        "m": cfg.m,
        "distribution": _mixture_summary(fc, fd),
    }
    ev.write_json(os.path.join(cfg.out, "reports", "forecast.json"), report)
    ev.write_csv(os.path.join(cfg.out, "dumps", "forecast_samples.csv"), samples.tolist(),
                 [f"y{j + 1}" for j in range(fc.K)])
    print(ev.dumps_json(report), end="")
    return report


def cmd_schedule(cfg, bundle, window):
    fc = _load_bundle(bundle)
    x = _window_for(fc, window, cfg.value_column)
    if not 1 <= cfg.D <= fc.K:
        raise ConfigError(f"D must satisfy 1 <= D <= K={fc.K}, got {cfg.D}")
    fd = fc.forecast(_standardize(fc, x))
    samples = _destandardize(fc, fd.sample(cfg.m, hash_seed(cfg.seed, 31)))
    var, subsets = ev.var_table(samples, cfg.D, cfg.alpha)
    action = ev.select_action_from_samples(samples, cfg.D, cfg.alpha)
    order = np.argsort(-var, kind="stable")[:10]
    report = {
        "strategy": fc.strategy,
        "indices": list(action.indices),
        "D": cfg.D,
        "alpha": cfg.alpha,
        "m": cfg.m,
        "var_top10": [{"indices": [int(i) + 1 for i in subsets[j]], "var": float(var[j])} for j in order],
        "distribution": _mixture_summary(fc, fd),
    }
    ev.write_json(os.path.join(cfg.out, "reports", "schedule.json"), report)
    print(ev.dumps_json(report), end="")
    return report


def _labels(bundles, forecasters):
    names = [fc.strategy for fc in forecasters]
    dup = {n for n in names if names.count(n) > 1}
    labels = [f"{n}:{os.path.normpath(b)}" if n in dup else n for n, b in zip(names, bundles)]
    # the same path given twice gets an occurrence suffix
    seen = {}
    for i, lab in enumerate(labels):
        seen[lab] = seen.get(lab, 0) + 1
        if labels.count(lab) > 1:
            labels[i] = f"{lab}#{seen[lab]}"
    return labels


def cmd_evaluate(cfg, bundles):
    forecasters = [_load_bundle(b) for b in bundles]
    for b, fc in zip(bundles, forecasters):
        if (fc.L, fc.K) != (cfg.L, cfg.K):
            raise IncompatibleBundles(f"{b}: bundle has L={fc.L}, K={fc.K}; run uses L={cfg.L}, K={cfg.K}")
    train, _, test = _datasets(cfg)
    for b, fc in zip(bundles, forecasters):
        if fc.stats is None or not np.allclose(fc.stats, train.stats, rtol=1e-12, atol=0):
            raise IncompatibleBundles(f"{b}: bundle was trained on a different dataset split")
    labels = _labels(bundles, forecasters)
    rows, per_index, table = [], [], []
    eval_seed = hash_seed(cfg.seed, 11)
    for label, fc in zip(labels, forecasters):
        metrics, decisions = ev.run_evaluation(fc, test, cfg.m, eval_seed, D=cfg.D, alpha=cfg.alpha,
                                               quantile=cfg.quantile)
        row = {"bundle": label, "strategy": fc.strategy, "wape": metrics.wape, "rwse": metrics.rwse,
               "mean_ll": metrics.mean_ll, "decision_score": decisions.decision_score,
               "per_index_rwse": metrics.per_index_rwse, "n_sequences": metrics.n_sequences,
               "excluded_sequences": len(decisions.excluded)}
        rows.append(row)
        table.append((label, metrics.wape, metrics.rwse, metrics.mean_ll, decisions.decision_score))
        per_index += [(label, j + 1, v) for j, v in enumerate(metrics.per_index_rwse)]
        if isinstance(fc, CANFForecaster):
            tri = fc.trajectory_log_likelihoods(test.windows)
            names = sorted(tri)
            ev.write_csv(os.path.join(cfg.out, "dumps", f"trajectory_ll_{label.replace(':', '_').replace(os.sep, '_')}.csv"),
                         [tuple([i] + [float(tri[n][i]) for n in names]) for i in range(len(test))],
                         ["sequence"] + [f"log_p_{n}" for n in names])
    ev.write_json(os.path.join(cfg.out, "reports", "comparison.json"), {"rows": rows, "n_test": len(test)})
    ev.write_csv(os.path.join(cfg.out, "reports", "comparison.csv"), table,
                 ["bundle", "wape", "rwse", "mean_ll", "decision_score"])
    ev.write_csv(os.path.join(cfg.out, "dumps", "per_index_rwse.csv"), per_index, ["bundle", "index", "rwse"])
    print(ev.rows_to_csv(table, ["bundle", "wape", "rwse", "mean_ll", "decision_score"]), end="")
    return rows


# --------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="canf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, strategy=False):
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (default: run)")
        sp.add_argument("--csv", help="hourly load CSV; omit for synthetic data")
        sp.add_argument("--value-column", dest="value_column")
        sp.add_argument("--timestamp-column", dest="timestamp_column")
        sp.add_argument("--weeks", type=int, help="synthetic series length in weeks")
        sp.add_argument("--L", type=int, dest="L")
        sp.add_argument("--K", type=int, dest="K")
        sp.add_argument("--D", type=int, dest="D")
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--m", type=int)
        if strategy:
            sp.add_argument("--strategy", action="append", choices=STRATEGIES,
                            help="repeat to select several strategies")
        return sp

    common(sub.add_parser("toy", help="uniform-square density estimation (GMM, flow, approximate flow)"))
    common(sub.add_parser("benchmark", help="synthetic load benchmark across seeds"), strategy=True)
    common(sub.add_parser("synth", help="write a synthetic hourly load CSV"))
    common(sub.add_parser("fit", help="fit forecaster bundles"), strategy=True)
    fcp = common(sub.add_parser("forecast", help="predictive distribution for one input window"))
    fcp.add_argument("--bundle", required=True)
    fcp.add_argument("--window", required=True, help="CSV with L+1 past loads")
    ev_p = common(sub.add_parser("evaluate", help="compare bundles on the shared test set"))
    ev_p.add_argument("bundles", nargs="+")
    sc = common(sub.add_parser("schedule", help="choose D time slots by value-at-risk"))
    sc.add_argument("--bundle", required=True)
    sc.add_argument("--window", required=True, help="CSV with L+1 past loads")
    return p


def exit_code(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_NUMERIC


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        _prepare_out(cfg)
        if args.command == "toy":
            cmd_toy(cfg)
        elif args.command == "benchmark":
            cmd_benchmark(cfg)
        elif args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "fit":
            cmd_fit(cfg)
        elif args.command == "forecast":
            cmd_forecast(cfg, args.bundle, args.window)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.bundles)
        else:
            cmd_schedule(cfg, args.bundle, args.window)
    except CanfError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
