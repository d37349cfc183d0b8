"""Forecasting strategies behind one interface.

Joint strategies model the whole window and return an analytic conditional
mixture over the ``K`` future steps:

* ``cg``   - one Gaussian over the window, conditioned by Schur complement
* ``cgmm`` - a validation-selected Gaussian mixture, conditioned analytically
* ``canf`` - a RealNVP flow approximated by a many-component mixture fit to
  flow samples, then conditioned like ``cgmm``
* ``jfnn`` - a feedforward net emitting a low-rank mixture over the future

Iterative strategies model one step ahead and roll out by appending their own
samples to a fixed-length input window:

* ``arma`` - the conditional-Gaussian construction on ``L + 2``-long windows
* ``ifnn`` - a feedforward net emitting a univariate mixture

All forecasters work in the standardized space of their training data.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonFiniteInput, StrategyUnfit
from .flow import RealNvpFlow, flow_log_pdf, flow_sample, train_flow
from .gaussian import GaussianConditioner, MultivariateGaussian, fit_gaussian
from .mixture import GaussianMixture, em_fit, gmm_condition, gmm_log_pdf, gmm_sample, select_k
from .neural import MdnHead, Mlp, TrainConfig, mdn_predict, mlp_forward, train_mdn

log = logging.getLogger(__name__)

JOINT = ("cg", "cgmm", "canf", "jfnn")
ITERATIVE = ("arma", "ifnn")
STRATEGIES = JOINT + ITERATIVE


@dataclass
class ForecasterConfig:
    strategy: str
    L: int = 7
    K: int = 12
    seed: int = 0
    # cgmm
    k_candidates: tuple = (5,)
    # canf
    flow_layers: int = 10
    flow_hidden: tuple = (32, 32)
    anf_samples: int = 1_000_000
    anf_k: int = 25
    reference_k: int = 5
    em_max_iter: int = 500
    # jfnn / ifnn
    net_hidden: tuple = (40, 40, 40)
    mdn_k: int = 2
    mdn_rank: int = 2
    # optimizer
    epochs: int = 200
    batch: int = 128
    lr: float = 1e-3
    patience: int = 20

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.L < 1 or self.K < 1:
            raise ValueError("L and K must be >= 1")
        self.k_candidates = tuple(int(k) for k in self.k_candidates)
        self.flow_hidden = tuple(int(h) for h in self.flow_hidden)
        self.net_hidden = tuple(int(h) for h in self.net_hidden)

    def train_config(self, salt=0):
        return TrainConfig(self.epochs, self.batch, self.lr, self.patience, hash_seed(self.seed, salt))

    @classmethod
    def from_dict(cls, obj):
        return cls(**obj)


def hash_seed(*parts):
    """Deterministic 32-bit seed mixed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# --------------------------------------------------------------------------


@dataclass
class ForecastDistribution:
    """Predictive distribution over the next ``K`` steps.

    Analytic forecasts carry a :class:`GaussianMixture`; sample-only forecasts
    carry a ``sampler(m, rng_seed) -> (m, K)`` callable.
    """

    K: int
    mixture: GaussianMixture | None = None
    sampler: object = None

    def __post_init__(self):
        if (self.mixture is None) == (self.sampler is None):
            raise ValueError("exactly one of mixture or sampler must be given")
        if self.mixture is not None and self.mixture.dim != self.K:
            raise DimensionMismatch(f"mixture dimension {self.mixture.dim} != K={self.K}")

    @property
    def is_analytic(self):
        return self.mixture is not None

    def sample(self, m, rng_seed=None):
        if self.mixture is not None:
            return gmm_sample(self.mixture, m, rng_seed)
        return self.sampler(m, rng_seed)

    def log_pdf(self, y):
        if self.mixture is None:
            raise TypeError("sample-only forecasts have no density")
        return gmm_log_pdf(self.mixture, y)

    def mean(self, m=10_000, rng_seed=0):
        if self.mixture is not None:
            return self.mixture.mean()
        return self.sample(m, rng_seed).mean(axis=0)


class Forecaster:
    """Base class. ``stats`` is the training standardization ``(mean, std)``."""

    strategy = ""
    iterative = False

    def __init__(self, config, stats=None):
        self.config = config
        self.stats = stats
        self.curves = {}

    @property
    def L(self):
        return self.config.L

    @property
    def K(self):
        return self.config.K

    def _check_input(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.L + 1:
            raise DimensionMismatch(f"input window must have length L+1={self.L + 1}, got {x.size}")
        if not np.all(np.isfinite(x)):
            raise NonFiniteInput("input window contains non-finite values")
        return x

    def forecast(self, x):
        raise StrategyUnfit(f"{type(self).__name__} has not been fit")

    # serialization: subclasses provide _artifacts() and _from_artifacts()
    def _artifacts(self):
        return {}

    def save(self, path):
        os.makedirs(path, exist_ok=True)
        meta = {
            "strategy": self.strategy,
            "config": asdict(self.config),
            "stats": list(self.stats) if self.stats is not None else None,
            "curves": self.curves,
        }
        _dump_json(os.path.join(path, "config.json"), meta)
        for name, obj in self._artifacts().items():
            _dump_json(os.path.join(path, f"{name}.json"), obj)
        return path


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def forecast(forecaster, x):
    return forecaster.forecast(x)


# --------------------------------------------------------------------------
# joint strategies


class CGForecaster(Forecaster):
    strategy = "cg"

    def __init__(self, config, gaussian, stats=None):
        super().__init__(config, stats)
        self.gaussian = gaussian
        self._cond = GaussianConditioner(gaussian, config.L + 1)

    def forecast(self, x):
        post = self._cond(self._check_input(x))
        return ForecastDistribution(self.K, GaussianMixture([1.0], [post]))

    def joint_log_pdf(self, windows):
        return self.gaussian.log_pdf(windows)

    def _artifacts(self):
        return {"gaussian": self.gaussian.to_dict()}


class MixtureForecaster(Forecaster):
    """Shared conditioning logic for strategies backed by a joint mixture."""

    def __init__(self, config, mixture, stats=None):
        super().__init__(config, stats)
        self.mixture = mixture

    def forecast(self, x):
        return ForecastDistribution(self.K, gmm_condition(self.mixture, self._check_input(x), self.L + 1))

    def joint_log_pdf(self, windows):
        return gmm_log_pdf(self.mixture, windows)


class CGMMForecaster(MixtureForecaster):
    strategy = "cgmm"

    def _artifacts(self):
        return {"mixture": self.mixture.to_dict()}


class CANFForecaster(MixtureForecaster):
    """Conditions the mixture approximation of a flow; the flow is kept for diagnostics."""

    strategy = "canf"

    def __init__(self, config, flow, mixture, reference=None, stats=None):
        super().__init__(config, mixture, stats)
        self.flow = flow
        self.reference = reference

    def trajectory_log_likelihoods(self, windows):
        """Full-window log-likelihoods under the flow, its approximation, and the reference mixture."""
        out = {"flow": flow_log_pdf(self.flow, windows), "anf": gmm_log_pdf(self.mixture, windows)}
        if self.reference is not None:
            out["gmm"] = gmm_log_pdf(self.reference, windows)
        return out

    def _artifacts(self):
        arts = {"flow": self.flow.to_dict(), "mixture": self.mixture.to_dict()}
        if self.reference is not None:
            arts["reference"] = self.reference.to_dict()
        return arts


class JFNNForecaster(Forecaster):
    strategy = "jfnn"

    def __init__(self, config, net, head, stats=None):
        super().__init__(config, stats)
        self.net = net
        self.head = head

    def forecast(self, x):
        return ForecastDistribution(self.K, mdn_predict(self.net, self.head, self._check_input(x)))

    def _artifacts(self):
        return {"net": self.net.to_dict(), "head": asdict(self.head)}


# --------------------------------------------------------------------------
# iterative strategies


class SingleStepForecaster(Forecaster):
    iterative = True

    def sample_next(self, X, rng):
        """One draw of the next value for every row of the (m, L+1) input matrix."""
        raise NotImplementedError

    def forecast(self, x):
        x = self._check_input(x)

        def sampler(m, rng_seed=None):
            return iterative_rollout(self, x, self.K, m, rng_seed)

        return ForecastDistribution(self.K, sampler=sampler)


class ARMAForecaster(SingleStepForecaster):
    """Linear-Gaussian one-step model from conditioning a Gaussian over ``L + 2`` values."""

    strategy = "arma"

    def __init__(self, config, gaussian, stats=None):
        super().__init__(config, stats)
        self.gaussian = gaussian
        self._cond = GaussianConditioner(gaussian, config.L + 1)

    @property
    def coefficients(self):
        return self._cond.gain[0]

    @property
    def step_std(self):
        return float(np.sqrt(self._cond.post_cov[0, 0]))

    def step_distribution(self, x):
        return self._cond(self._check_input(x))

    def sample_next(self, X, rng):
        mean = self._cond.posterior_mean(X)[:, 0]
        return mean + self.step_std * rng.standard_normal(X.shape[0])

    def _artifacts(self):
        return {"gaussian": self.gaussian.to_dict()}


class IFNNForecaster(SingleStepForecaster):
    """Feedforward net emitting a univariate ``k``-component mixture for the next step."""

    strategy = "ifnn"

    def __init__(self, config, net, head, stats=None):
        super().__init__(config, stats)
        self.net = net
        self.head = head

    def step_distribution(self, x):
        return mdn_predict(self.net, self.head, self._check_input(x))

    def sample_next(self, X, rng):
        raw = mlp_forward(self.net, X)[0]
        logits, mu, d, _ = self.head.unpack(raw)
        logits = logits - logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        u = rng.random(X.shape[0])
        comp = np.minimum((np.cumsum(w, axis=1) < u[:, None]).sum(axis=1), self.head.k - 1)
        rows = np.arange(X.shape[0])
        mean = mu[rows, comp, 0]
        std = np.exp(0.5 * d[rows, comp, 0])
        return mean + std * rng.standard_normal(X.shape[0])

    def _artifacts(self):
        return {"net": self.net.to_dict(), "head": asdict(self.head)}


def iterative_rollout(single_step, x, K, m, rng_seed=None):
    """``m`` trajectories of length ``K`` by sampling one step, shifting the window, repeating."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = np.random.default_rng(rng_seed)
    window = np.tile(np.asarray(x, dtype=float).reshape(1, -1), (m, 1))
    out = np.empty((m, K))
    for j in range(K):
        nxt = single_step.sample_next(window, rng)
        out[:, j] = nxt
        window = np.concatenate([window[:, 1:], nxt[:, None]], axis=1)
    return out


# --------------------------------------------------------------------------
# fitting


def _windows(ds):
    return np.asarray(ds.windows, dtype=float)


def _config(ds, strategy, config):
    if config is None:
        config = ForecasterConfig(strategy, ds.L, ds.K)
    if (config.L, config.K) != (ds.L, ds.K):
        raise DimensionMismatch(f"config (L={config.L}, K={config.K}) != dataset (L={ds.L}, K={ds.K})")
    return config


def fit_cg(train, config=None):
    config = _config(train, "cg", config)
    return CGForecaster(config, fit_gaussian(_windows(train)), train.stats)


def fit_cgmm(train, val, config=None, k_candidates=None, rng_seed=None):
    config = _config(train, "cgmm", config)
    cands = k_candidates if k_candidates is not None else config.k_candidates
    seed = config.seed if rng_seed is None else rng_seed
    k, model, scores = select_k(_windows(train), _windows(val), cands, seed, config.em_max_iter)
    fc = CGMMForecaster(config, model, train.stats)
    fc.curves = {"selected_k": k, "val_nll": {str(c): s for c, s in scores.items()}}
    return fc


def fit_canf(train, val, config=None):
    """Flow over full windows, mixture fit to flow samples, analytic conditioning."""
    config = _config(train, "canf", config)
    flow, curves = train_flow(
        _windows(train), _windows(val), config.flow_layers, config.flow_hidden, config.train_config(2)
    )
    samples = flow_sample(flow, config.anf_samples, hash_seed(config.seed, 3))
    em = em_fit(samples, config.anf_k, hash_seed(config.seed, 4), config.em_max_iter)
    reference = None
    if config.reference_k:
        reference = em_fit(_windows(train), config.reference_k, hash_seed(config.seed, 5),
                           config.em_max_iter).model
    fc = CANFForecaster(config, flow, em.model, reference, train.stats)
    fc.curves = {"flow": curves.to_dict(), "anf_em_trace": em.log_likelihood_trace,
                 "anf_reseeds": em.reseeds}
    return fc


def fit_jfnn(train, val, config=None):
    config = _config(train, "jfnn", config)
    net, head, curves = train_mdn(
        train, val, config.net_hidden, config.mdn_k, config.mdn_rank, config.train_config(6)
    )
    fc = JFNNForecaster(config, net, head, train.stats)
    fc.curves = curves.to_dict()
    return fc


def _step_windows(ds):
    return _windows(ds)[:, : ds.L + 2]


def fit_arma(train, config=None):
    config = _config(train, "arma", config)
    return ARMAForecaster(config, fit_gaussian(_step_windows(train)), train.stats)


def fit_ifnn(train, val, config=None):
    config = _config(train, "ifnn", config)
    L = config.L
    tr = (_windows(train)[:, : L + 1], _windows(train)[:, L + 1: L + 2])
    va = (_windows(val)[:, : L + 1], _windows(val)[:, L + 1: L + 2])
    net, head, curves = train_mdn(tr, va, config.net_hidden, config.mdn_k, 0, config.train_config(7))
    fc = IFNNForecaster(config, net, head, train.stats)
    fc.curves = curves.to_dict()
    return fc


def fit_forecaster(config, train, val):
    s = config.strategy
    if s == "cg":
        return fit_cg(train, config)
    if s == "arma":
        return fit_arma(train, config)
    if s == "cgmm":
        return fit_cgmm(train, val, config)
    if s == "canf":
        return fit_canf(train, val, config)
    if s == "jfnn":
        return fit_jfnn(train, val, config)
    return fit_ifnn(train, val, config)


def load_forecaster(path):
    meta = _load_json(os.path.join(path, "config.json"))
    config = ForecasterConfig.from_dict(meta["config"])
    stats = tuple(meta["stats"]) if meta["stats"] is not None else None

    def art(name):
        p = os.path.join(path, f"{name}.json")
        return _load_json(p) if os.path.exists(p) else None

    s = meta["strategy"]
    if s == "cg":
        fc = CGForecaster(config, MultivariateGaussian.from_dict(art("gaussian")), stats)
    elif s == "arma":
        fc = ARMAForecaster(config, MultivariateGaussian.from_dict(art("gaussian")), stats)
    elif s == "cgmm":
        fc = CGMMForecaster(config, GaussianMixture.from_dict(art("mixture")), stats)
    elif s == "canf":
        ref = art("reference")
        fc = CANFForecaster(
            config,
            RealNvpFlow.from_dict(art("flow")),
            GaussianMixture.from_dict(art("mixture")),
            GaussianMixture.from_dict(ref) if ref else None,
            stats,
        )
    elif s in ("jfnn", "ifnn"):
        cls = JFNNForecaster if s == "jfnn" else IFNNForecaster
        fc = cls(config, Mlp.from_dict(art("net")), MdnHead(**art("head")), stats)
    else:
        raise StrategyUnfit(f"unknown strategy {s!r} in bundle {path}")
    fc.curves = meta.get("curves", {})
    return fc
