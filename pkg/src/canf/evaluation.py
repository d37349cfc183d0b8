"""Forecast metrics and the value-at-risk scheduling layer.

Quantiles everywhere (VaR and the decision score) use the *lower* empirical
convention: the ``q``-quantile of ``n`` values is the order statistic at
zero-based index ``floor(q * (n - 1))``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .errors import NonFiniteLogDensity, ZeroOptimalUtility

WAPE_EPS = 1e-6
DEFAULT_D = 4
DEFAULT_ALPHA = 0.2
DEFAULT_QUANTILE = 0.8
DEFAULT_M = 1000


def lower_quantile(values, q, axis=0):
    values = np.asarray(values, dtype=float)
    n = values.shape[axis]
    idx = int(math.floor(q * (n - 1)))
    return np.take(np.partition(values, idx, axis=axis), idx, axis=axis)


def sequence_seed(rng_seed, index):
    """Per-sequence generator seed; results do not depend on evaluation order."""
    return np.random.SeedSequence([int(rng_seed), int(index)])


@dataclass
class MetricsReport:
    wape: float
    rwse: float
    per_index_rwse: list
    mean_ll: float | None
    n_sequences: int
    m_samples: int
    clamped_terms: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ScheduleAction:
    """Sorted, distinct 1-based time indices."""

    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx) or list(idx) != sorted(idx) or (idx and idx[0] < 1):
            raise ValueError(f"indices must be sorted, distinct and >= 1: {idx}")
        object.__setattr__(self, "indices", idx)

    @property
    def zero_based(self):
        return [i - 1 for i in self.indices]


@dataclass
class DecisionReport:
    decision_score: float
    regrets: list
    excluded: list = field(default_factory=list)
    quantile: float = DEFAULT_QUANTILE

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# scheduling


def subset_table(K, D):
    """All ``C(K, D)`` zero-based index subsets in lexicographic order, as an (S, D) array."""
    return np.array(list(combinations(range(K), D)), dtype=int).reshape(-1, D)


def _utility_rows(samples, subsets):
    """(S, m) utilities; works on transposed samples so gathers and the quantile are contiguous."""
    cols = np.ascontiguousarray(samples.T)
    total = cols[subsets[:, 0]]
    for j in range(1, subsets.shape[1]):
        total += cols[subsets[:, j]]
    return -total


def utility_samples(samples, subsets):
    """``U = -sum_i s[a_i]`` for every sample row and every subset; shape (m, S).

    Sums accumulate left to right over the subset's indices.
    """
    return _utility_rows(np.asarray(samples, dtype=float), subsets).T


def var_table(samples, D, alpha):
    """Empirical alpha-quantile of utility for every subset, with the subset table."""
    samples = np.asarray(samples, dtype=float)
    K = samples.shape[1]
    if not 1 <= D <= K:
        raise ValueError(f"D must satisfy 1 <= D <= K={K}, got {D}")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    subsets = subset_table(K, D)
    return lower_quantile(_utility_rows(samples, subsets), alpha, axis=1), subsets


def select_action_from_samples(samples, D, alpha=DEFAULT_ALPHA):
    """Subset maximizing the alpha-VaR of utility; ties go to the lexicographically first."""
    var, subsets = var_table(samples, D, alpha)
    best = int(np.argmax(var))
    return ScheduleAction(tuple(int(i) + 1 for i in subsets[best]))


def select_action(fd, D=DEFAULT_D, alpha=DEFAULT_ALPHA, m=DEFAULT_M, rng_seed=0):
    """Draw ``m`` trajectories once and pick the subset with the best alpha-VaR."""
    return select_action_from_samples(fd.sample(m, rng_seed), D, alpha)


def proportional_regret(true_future, action, D=None):
    """``(U(y, a) - U(y, a*)) / U(y, a*)`` with ``a*`` the ``D`` smallest true loads."""
    y = np.asarray(true_future, dtype=float).reshape(-1)
    idx = action.zero_based
    D = len(idx) if D is None else D
    if len(idx) != D or max(idx) >= y.size:
        raise ValueError("action does not match D or exceeds the horizon")
    # both sums run in ascending order, so the regret is exactly 0 at the optimum and never negative
    u_act = -float(np.sum(np.sort(y[idx])))
    u_opt = -float(np.sum(np.sort(y)[:D]))
    if u_opt == 0.0:
        raise ZeroOptimalUtility("optimal utility is zero; regret undefined")
    return (u_act - u_opt) / u_opt


# --------------------------------------------------------------------------
# metrics


def _raw(stats, arr):
    if stats is None:
        return arr
    mean, std = stats
    return arr * std + mean


def _log_jacobian(stats, K):
    return 0.0 if stats is None else K * math.log(stats[1])


class _Accumulator:
    def __init__(self, K):
        self.abs_pct = 0.0
        self.sq = np.zeros(K)
        self.count = 0
        self.clamped = 0
        self.lls = []
        self.regrets = []
        self.excluded = []


def run_evaluation(forecaster, test, m=DEFAULT_M, rng_seed=0, metrics=True, decisions=True,
                   D=DEFAULT_D, alpha=DEFAULT_ALPHA, quantile=DEFAULT_QUANTILE, collect=None):
    """Shared per-sequence loop behind :func:`eval_metrics` and :func:`decision_score`.

    Each test sequence ``i`` gets samples from ``sequence_seed(rng_seed, i)``,
    so metrics and decisions computed together or apart see the same draws.
    ``collect``, if a dict, receives per-sequence arrays (per-index squared
    errors, log-likelihoods, regrets).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    stats = test.stats
    K = test.K
    x_all = test.inputs
    y_raw = _raw(stats, test.targets)
    y_std = test.targets
    jac = _log_jacobian(stats, K)
    acc = _Accumulator(K)
    analytic = True
    for i in range(len(test)):
        fd = forecaster.forecast(x_all[i])
        samples = _raw(stats, fd.sample(m, sequence_seed(rng_seed, i)))
        y = y_raw[i]
        if metrics:
            err = samples - y
            denom = np.abs(y)
            small = denom < WAPE_EPS
            acc.clamped += int(small.sum()) * m
            denom = np.where(small, WAPE_EPS, denom)
            acc.abs_pct += float(np.sum(np.abs(err) / denom))
            acc.sq += np.sum(err * err, axis=0)
            acc.count += m
            if fd.is_analytic:
                acc.lls.append(float(fd.log_pdf(y_std[i])) - jac)
            else:
                analytic = False
        if decisions:
            action = select_action_from_samples(samples, D, alpha)
            try:
                acc.regrets.append(proportional_regret(y, action, D))
            except ZeroOptimalUtility:
                acc.excluded.append(i)
    metrics_report = decision_report = None
    n = len(test)
    if metrics:
        per_index = np.sqrt(acc.sq / max(acc.count, 1))
        metrics_report = MetricsReport(
            wape=acc.abs_pct / (n * m * K),
            rwse=float(np.sqrt(acc.sq.sum() / (n * m * K))),
            per_index_rwse=per_index.tolist(),
            mean_ll=float(np.mean(acc.lls)) if analytic and acc.lls else None,
            n_sequences=n,
            m_samples=m,
            clamped_terms=acc.clamped,
        )
    if decisions:
        score = float(lower_quantile(acc.regrets, quantile)) if acc.regrets else float("nan")
        decision_report = DecisionReport(score, acc.regrets, acc.excluded, quantile)
    if collect is not None:
        collect["log_likelihoods"] = acc.lls
    return metrics_report, decision_report


def eval_metrics(forecaster, test, m=DEFAULT_M, rng_seed=0):
    """WAPE, RWSE, per-index RWSE (raw units) and, for analytic forecasts, mean test LL."""
    return run_evaluation(forecaster, test, m, rng_seed, metrics=True, decisions=False)[0]


def decision_score(forecaster, test, D=DEFAULT_D, alpha=DEFAULT_ALPHA, m=DEFAULT_M,
                   quantile=DEFAULT_QUANTILE, rng_seed=0):
    """Empirical ``quantile`` of proportional regret of VaR-selected actions over ``test``."""
    return run_evaluation(forecaster, test, m, rng_seed, metrics=False, decisions=True,
                          D=D, alpha=alpha, quantile=quantile)[1]


def mc_kl(data_log_pdf, data_sampler, model_log_pdf, N=100_000, rng_seed=0):
    """Monte Carlo ``KL(p_data || p_model)`` from ``N`` draws of ``p_data``.

    Returns
    -------
    (mean, standard_error)
    """
    if N < 1000:
        raise ValueError("N must be >= 1000")
    x = data_sampler(N, rng_seed)
    diff = np.asarray(data_log_pdf(x), dtype=float) - np.asarray(model_log_pdf(x), dtype=float)
    bad = np.flatnonzero(~np.isfinite(diff))
    if bad.size:
        raise NonFiniteLogDensity(
            f"{bad.size} of {N} points have non-finite log-density", bad.size, bad[:20]
        )
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(N))


# --------------------------------------------------------------------------
# report files


def dumps_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(dumps_json(obj))


def rows_to_csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path, rows, header):
    with open(path, "w") as fh:
        fh.write(rows_to_csv(rows, header))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v
