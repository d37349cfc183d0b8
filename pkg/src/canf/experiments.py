"""End-to-end experiment pipelines: uniform-square density estimation and the synthetic load benchmark."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import evaluation as ev
from .dataset import SynthParams, rolling_windows, standardize, synth_load, train_val_split, week_split
from .errors import CanfError
from .flow import flow_log_pdf, flow_sample, train_flow
from .forecasters import ForecasterConfig, fit_forecaster, hash_seed
from .mixture import em_fit, gmm_log_pdf, select_k
from .neural import TrainConfig

log = logging.getLogger(__name__)


def _mkdirs(out_dir):
    for sub in ("models", "reports", "dumps"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)


# --------------------------------------------------------------------------
# toy density estimation on the unit square


@dataclass
class ToyConfig:
    seeds: tuple = tuple(range(10))
    n_train: int = 1000
    n_val: int = 200
    # fixed component count; None re-tunes it per seed on the validation split
    gmm_k: int | None = 9
    gmm_k_candidates: tuple = tuple(range(1, 16))
    flow_layers: int = 4
    flow_hidden: tuple = (12, 12)
    epochs: int = 1000
    batch: int = 64
    lr: float = 5e-3
    lr_final: float = 1e-4
    anf_samples: int = 10_000
    anf_k: int = 40
    kl_samples: int = 100_000
    grid_size: int = 101

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.gmm_k_candidates = tuple(int(k) for k in self.gmm_k_candidates)
        self.flow_hidden = tuple(int(h) for h in self.flow_hidden)


def uniform_square_sampler(n, rng_seed):
    return np.random.default_rng(rng_seed).random((n, 2))


def uniform_square_log_pdf(x):
    x = np.asarray(x, dtype=float)
    inside = np.all((x >= 0) & (x < 1), axis=-1)
    return np.where(inside, 0.0, -np.inf)


@dataclass
class ToyModels:
    """Fitted toy models; all densities are in raw (unit-square) coordinates."""

    mean: np.ndarray
    std: np.ndarray
    gmm: object
    flow: object
    anf: object
    gmm_k: int

    def _std(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    @property
    def _log_jac(self):
        return float(np.sum(np.log(self.std)))

    def gmm_log_pdf(self, x):
        return gmm_log_pdf(self.gmm, self._std(x)) - self._log_jac

    def flow_log_pdf(self, x):
        return flow_log_pdf(self.flow, self._std(x)) - self._log_jac

    def anf_log_pdf(self, x):
        return gmm_log_pdf(self.anf, self._std(x)) - self._log_jac


def fit_toy_models(cfg, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    train = rng.random((cfg.n_train, 2))
    val = rng.random((cfg.n_val, 2))
    mean, std = train.mean(axis=0), train.std(axis=0)
    tr, va = (train - mean) / std, (val - mean) / std

    if cfg.gmm_k is None:
        k, gmm, _ = select_k(tr, va, cfg.gmm_k_candidates, hash_seed(seed, 1))
    else:
        k = cfg.gmm_k
        gmm = em_fit(tr, k, hash_seed(seed, 1)).model
    tcfg = TrainConfig(cfg.epochs, cfg.batch, cfg.lr, cfg.epochs + 1, hash_seed(seed, 2), cfg.lr_final)
    flow, _ = train_flow(tr, va, cfg.flow_layers, cfg.flow_hidden, tcfg)
    samples = flow_sample(flow, cfg.anf_samples, hash_seed(seed, 3))
    anf = em_fit(samples, cfg.anf_k, hash_seed(seed, 4)).model
    return ToyModels(mean, std, gmm, flow, anf, k)


def run_toy_seed(cfg, seed):
    t0 = time.perf_counter()
    models = fit_toy_models(cfg, seed)
    kl_seed = hash_seed(seed, 5)
    out = {"seed": seed, "gmm_k": models.gmm_k}
    for name, fn in (("gmm", models.gmm_log_pdf), ("flow", models.flow_log_pdf),
                     ("anf", models.anf_log_pdf)):
        mean, se = ev.mc_kl(uniform_square_log_pdf, uniform_square_sampler, fn, cfg.kl_samples, kl_seed)
        out[f"kl_{name}"] = mean
        out[f"kl_{name}_se"] = se
    log.info("toy seed %d: gmm %.4f flow %.4f anf %.4f (%.0fs)", seed, out["kl_gmm"],
             out["kl_flow"], out["kl_anf"], time.perf_counter() - t0)
    return out, models


def toy_grid(models, size):
    """Log-density of each model on a ``size x size`` grid over [-0.25, 1.25]^2."""
    g = np.linspace(-0.25, 1.25, size)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    return pts, models.gmm_log_pdf(pts), models.flow_log_pdf(pts), models.anf_log_pdf(pts)


def summarize_toy(per_seed):
    ok = [r for r in per_seed if r.get("status", "ok") == "ok"]
    summary = {"n_ok": len(ok), "n_seeds": len(per_seed)}
    for name in ("gmm", "flow", "anf"):
        vals = np.array([r[f"kl_{name}"] for r in ok])
        summary[f"kl_{name}_mean"] = float(vals.mean()) if vals.size else None
        summary[f"kl_{name}_std"] = float(vals.std()) if vals.size else None
    return summary


def run_toy(cfg, out_dir=None):
    """Fit GMM, flow and approximate flow per seed and compare KL divergences to the data.

    Per-seed failures are recorded with a status and do not stop the run.
    """
    if out_dir:
        _mkdirs(out_dir)
    per_seed = []
    for seed in cfg.seeds:
        try:
            res, models = run_toy_seed(cfg, seed)
            res["status"] = "ok"
        except CanfError as exc:
            log.error("toy seed %d failed: %s", seed, exc)
            per_seed.append({"seed": seed, "status": f"error: {type(exc).__name__}: {exc}"})
            continue
        per_seed.append(res)
        if out_dir:
            ev.write_json(os.path.join(out_dir, "reports", f"toy_seed{seed}.json"), res)
            pts, g, f, a = toy_grid(models, cfg.grid_size)
            ev.write_csv(
                os.path.join(out_dir, "dumps", f"toy_grid_seed{seed}.csv"),
                [(*p, gv, fv, av) for p, gv, fv, av in zip(pts.tolist(), g.tolist(), f.tolist(), a.tolist())],
                ["x", "y", "log_p_gmm", "log_p_flow", "log_p_anf"],
            )
    summary = summarize_toy(per_seed)
    report = {"config": asdict(cfg), "per_seed": per_seed, "summary": summary}
    if out_dir:
        ev.write_json(os.path.join(out_dir, "reports", "toy_summary.json"), report)
        ev.write_csv(
            os.path.join(out_dir, "reports", "toy_kl.csv"),
            [(r["seed"], r["status"], r.get("gmm_k"), r.get("kl_gmm"), r.get("kl_flow"), r.get("kl_anf"))
             for r in per_seed],
            ["seed", "status", "gmm_k", "kl_gmm", "kl_flow", "kl_anf"],
        )
    return report


# --------------------------------------------------------------------------
# synthetic load benchmark


def default_strategy_configs():
    """Hyperparameter overrides per strategy for the desk-scale benchmark."""
    return {
        "cg": {},
        "cgmm": {"k_candidates": [5]},
        "canf": {
            "flow_layers": 10,
            "flow_hidden": [32, 32],
            "anf_samples": 50_000,
            "anf_k": 25,
            "em_max_iter": 100,
            "epochs": 150,
            "batch": 128,
            "lr": 1e-3,
            "patience": 20,
        },
        "arma": {},
        "jfnn": {"net_hidden": [40, 40, 40], "mdn_k": 2, "mdn_rank": 2, "epochs": 150},
        "ifnn": {"net_hidden": [40, 40, 40], "mdn_k": 3, "epochs": 150},
    }


@dataclass
class BenchmarkConfig:
    seeds: tuple = tuple(range(10))
    weeks: int = 52
    L: int = 7
    K: int = 12
    D: int = ev.DEFAULT_D
    alpha: float = ev.DEFAULT_ALPHA
    m: int = ev.DEFAULT_M
    quantile: float = ev.DEFAULT_QUANTILE
    test_fraction: float = 0.25
    val_fraction: float = 0.2
    strategies: tuple = ("cg", "cgmm", "canf", "arma")
    strategy_params: dict = field(default_factory=default_strategy_configs)
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.strategies = tuple(self.strategies)
        merged = default_strategy_configs()
        for k, v in (self.strategy_params or {}).items():
            merged.setdefault(k, {}).update(v)
        self.strategy_params = merged

    def forecaster_config(self, strategy, seed):
        return ForecasterConfig(strategy, self.L, self.K, seed, **self.strategy_params.get(strategy, {}))


def prepare_datasets(series, L, K, test_fraction=0.25, val_fraction=0.2, seed=0):
    """Week split, rolling windows, train-statistics standardization, validation carve-out."""
    train_segs, test_segs = week_split(series, test_fraction, seed)
    train_raw = rolling_windows(train_segs, L, K)
    test_raw = rolling_windows(test_segs, L, K)
    train_all = standardize(train_raw)
    test = standardize(test_raw, train_all.stats)
    train, val = train_val_split(train_all, val_fraction)
    return train, val, test


def evaluate_row(name, fc, test, cfg, seed):
    metrics, decisions = ev.run_evaluation(
        fc, test, cfg.m, hash_seed(seed, 11), D=cfg.D, alpha=cfg.alpha, quantile=cfg.quantile
    )
    return {
        "strategy": name,
        "wape": metrics.wape,
        "rwse": metrics.rwse,
        "mean_ll": metrics.mean_ll,
        "decision_score": decisions.decision_score,
        "per_index_rwse": metrics.per_index_rwse,
        "n_sequences": metrics.n_sequences,
        "excluded_sequences": len(decisions.excluded),
    }


def run_benchmark_seed(cfg, seed, out_dir=None):
    t0 = time.perf_counter()
    series = synth_load(cfg.weeks, SynthParams.from_dict(cfg.synth), hash_seed(seed, 20))
    train, val, test = prepare_datasets(series, cfg.L, cfg.K, cfg.test_fraction, cfg.val_fraction,
                                        hash_seed(seed, 21))
    rows = []
    for strategy in cfg.strategies:
        t1 = time.perf_counter()
        fc = fit_forecaster(cfg.forecaster_config(strategy, seed), train, val)
        row = evaluate_row(strategy, fc, test, cfg, seed)
        rows.append(row)
        log.info("benchmark seed %d %s: rwse %.4f ll %s score %.4f (%.0fs)", seed, strategy,
                 row["rwse"], row["mean_ll"], row["decision_score"], time.perf_counter() - t1)
        if out_dir:
            fc.save(os.path.join(out_dir, "models", f"seed{seed}_{strategy}"))
    res = {"seed": seed, "n_train": len(train), "n_val": len(val), "n_test": len(test), "rows": rows}
    log.info("benchmark seed %d done in %.0fs", seed, time.perf_counter() - t0)
    return res


def benchmark_checks(per_seed):
    """Directional checks per seed: CANF vs CG (RWSE), CGMM (LL), iterative ARMA (decision score)."""
    out = []
    for res in per_seed:
        by = {r["strategy"]: r for r in res["rows"]}
        c = {"seed": res["seed"]}
        canf = by.get("canf")
        if canf and "cg" in by:
            c["rwse_canf_le_cg"] = canf["rwse"] <= by["cg"]["rwse"]
        if canf and "cgmm" in by:
            c["ll_canf_ge_cgmm"] = canf["mean_ll"] >= by["cgmm"]["mean_ll"]
        if canf and "arma" in by:
            c["score_canf_le_arma"] = canf["decision_score"] <= by["arma"]["decision_score"]
            c["last_index_rwse_arma_gt_canf"] = (
                by["arma"]["per_index_rwse"][-1] > canf["per_index_rwse"][-1]
            )
        out.append(c)
    return out


def summarize_benchmark(per_seed):
    table = {}
    for res in per_seed:
        for r in res["rows"]:
            table.setdefault(r["strategy"], []).append(r)
    summary = {}
    for name, rows in table.items():
        entry = {}
        for key in ("wape", "rwse", "mean_ll", "decision_score"):
            vals = [r[key] for r in rows if r[key] is not None]
            entry[f"{key}_mean"] = float(np.mean(vals)) if vals else None
            entry[f"{key}_std"] = float(np.std(vals)) if vals else None
        entry["per_index_rwse_mean"] = np.mean([r["per_index_rwse"] for r in rows], axis=0).tolist()
        summary[name] = entry
    return summary


def run_benchmark(cfg, out_dir=None):
    if out_dir:
        _mkdirs(out_dir)
    per_seed = []
    for seed in cfg.seeds:
        res = run_benchmark_seed(cfg, seed, out_dir)
        per_seed.append(res)
        if out_dir:
            ev.write_json(os.path.join(out_dir, "reports", f"benchmark_seed{seed}.json"), res)
    checks = benchmark_checks(per_seed)
    report = {"config": asdict(cfg), "per_seed": per_seed, "checks": checks,
              "summary": summarize_benchmark(per_seed)}
    if out_dir:
        ev.write_json(os.path.join(out_dir, "reports", "benchmark_summary.json"), report)
        rows = [(res["seed"], r["strategy"], r["wape"], r["rwse"], r["mean_ll"], r["decision_score"])
                for res in per_seed for r in res["rows"]]
        ev.write_csv(os.path.join(out_dir, "reports", "benchmark_table.csv"), rows,
                     ["seed", "strategy", "wape", "rwse", "mean_ll", "decision_score"])
    return report
