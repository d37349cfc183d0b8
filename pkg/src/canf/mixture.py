"""Gaussian mixture models: EM fitting, density, sampling and analytic conditioning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import (
    AllWeightsVanish,
    DegenerateComponent,
    DimensionMismatch,
    NonFiniteInput,
    TooFewPoints,
)
from .gaussian import JITTER, GaussianConditioner, MultivariateGaussian, gaussian_log_pdf

log = logging.getLogger(__name__)

EM_TOL = 1e-6
EM_MAX_ITER = 500
MIN_COMPONENT_MASS = 1e-8


@dataclass(eq=False)
class GaussianMixture:
    weights: np.ndarray
    components: list
    _conditioners: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if len(self.components) != w.size or w.size == 0:
            raise DimensionMismatch("weights and components must have equal, nonzero length")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        w = w / w.sum()
        w.setflags(write=False)
        self.weights = w
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise DimensionMismatch(f"components have mixed dimensions {sorted(dims)}")

    @property
    def k(self):
        return self.weights.size

    @property
    def dim(self):
        return self.components[0].dim

    def log_pdf(self, x):
        return gmm_log_pdf(self, x)

    def sample(self, count, rng_seed=None):
        return gmm_sample(self, count, rng_seed)

    def condition(self, observed, split):
        return gmm_condition(self, observed, split)

    def mean(self):
        return np.sum([w * c.mean for w, c in zip(self.weights, self.components)], axis=0)

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "components": [c.to_dict() for c in self.components],
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["weights"], [MultivariateGaussian.from_dict(c) for c in obj["components"]])


@dataclass
class EMResult:
    model: GaussianMixture
    log_likelihood_trace: list
    n_iter: int
    converged: bool
    reseeds: list = field(default_factory=list)


def _component_log_pdfs(data, means, covs):
    """(n, k) matrix of per-component log densities; factorization failures escalate jitter."""
    out = np.empty((data.shape[0], len(means)))
    comps = []
    for i, (mu, cov) in enumerate(zip(means, covs)):
        g = MultivariateGaussian(mu, cov)
        comps.append(g)
        out[:, i] = gaussian_log_pdf(g, data)
    return out, comps


def _kmeanspp(data, k, rng):
    n = data.shape[0]
    centers = [data[rng.integers(n)]]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(data[idx])
        d2 = np.minimum(d2, np.sum((data - data[idx]) ** 2, axis=1))
    return np.array(centers)


def em_fit(data, k, rng_seed=None, max_iter=EM_MAX_ITER, tol=EM_TOL, jitter=JITTER):
    """Fit a ``k``-component full-covariance mixture by expectation-maximization.

    Means are seeded k-means++ style, covariances start at the global
    covariance and weights uniform. Iteration stops when the mean
    log-likelihood improves by less than ``tol``.

    A component whose responsibility mass drops below ``1e-8`` is re-seeded
    once at a random data point; a second collapse raises
    :class:`DegenerateComponent`.

    Returns
    -------
    EMResult
        Holds the model and the mean log-likelihood trace, one entry per E-step.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    n, d = data.shape
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise TooFewPoints(f"{n} points cannot support {k} components")
    if not np.all(np.isfinite(data)):
        raise NonFiniteInput("data contains non-finite entries")
    rng = np.random.default_rng(rng_seed)
    eye = np.eye(d)

    centered = data - data.mean(axis=0)
    global_cov = centered.T @ centered / n + jitter * eye
    means = _kmeanspp(data, k, rng) if k > 1 else data.mean(axis=0, keepdims=True)
    covs = [global_cov.copy() for _ in range(k)]
    log_w = np.full(k, -np.log(k))

    trace = []
    reseeds = []
    reseeded = np.zeros(k, dtype=bool)
    converged = False
    it = 0
    while True:
        log_dens, comps = _component_log_pdfs(data, means, covs)
        joint = log_dens + log_w
        log_norm = logsumexp(joint, axis=1)
        ll = float(np.mean(log_norm))
        trace.append(ll)
        if len(trace) > 1 and trace[-1] - trace[-2] < tol and not (reseeds and reseeds[-1] == it - 1):
            converged = True
            break
        if it >= max_iter:
            break
        # M-step
        resp = np.exp(joint - log_norm[:, None])
        mass = resp.sum(axis=0)
        bad = np.flatnonzero(mass < MIN_COMPONENT_MASS)
        if bad.size:
            if np.any(reseeded[bad]):
                raise DegenerateComponent(
                    f"component(s) {bad.tolist()} collapsed again after re-seeding (k={k}, n={n})"
                )
            reseeded[bad] = True
            reseeds.append(it)
            log.debug("re-seeding components %s at iteration %d", bad.tolist(), it)
        new_means = np.empty_like(means)
        new_covs = []
        for i in range(k):
            if i in bad:
                new_means[i] = data[rng.integers(n)]
                new_covs.append(global_cov.copy())
                continue
            r = resp[:, i]
            mu = r @ data / mass[i]
            diff = data - mu
            diff *= np.sqrt(r)[:, None]
            cov = diff.T @ diff / mass[i]
            new_means[i] = mu
            new_covs.append(0.5 * (cov + cov.T) + jitter * eye)
        w = mass / n
        if bad.size:
            w[bad] = 1.0 / k
            w /= w.sum()
        means, covs = new_means, new_covs
        with np.errstate(divide="ignore"):
            log_w = np.log(w)
        it += 1

    model = GaussianMixture(np.exp(log_w), comps)
    return EMResult(model, trace, it, converged, reseeds)


def gmm_log_pdf(m, x):
    """``log sum_i w_i N(x; mu_i, Sigma_i)`` via log-sum-exp; ``x`` is (d,) or (n, d)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x.reshape(1, -1) if single else x
    if pts.shape[1] != m.dim:
        raise DimensionMismatch(f"expected dimension {m.dim}, got {pts.shape[1]}")
    with np.errstate(divide="ignore"):
        log_w = np.log(m.weights)
    comp = np.column_stack([gaussian_log_pdf(c, pts) for c in m.components]) + log_w
    out = logsumexp(comp, axis=1)
    return float(out[0]) if single else out


def gmm_sample(m, count, rng_seed=None):
    """Ancestral sampling: categorical component draw, then a Gaussian draw."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    labels = rng.choice(m.k, size=count, p=m.weights)
    z = rng.standard_normal((count, m.dim))
    out = np.empty((count, m.dim))
    for i, c in enumerate(m.components):
        sel = labels == i
        if np.any(sel):
            out[sel] = c.mean + z[sel] @ c.cholesky_factor.T
    return out


class MixtureConditioner:
    """Per-component Schur conditioners for a fixed split, reused across observations."""

    def __init__(self, m, split):
        self.split = split
        self.conditioners = [GaussianConditioner(c, split) for c in m.components]
        with np.errstate(divide="ignore"):
            self.log_w = np.log(m.weights)

    def __call__(self, observed):
        obs = np.asarray(observed, dtype=float).reshape(-1)
        if obs.size != self.split:
            raise DimensionMismatch(f"observed has length {obs.size}, split is {self.split}")
        log_post = np.array(
            [lw + gaussian_log_pdf(c.marginal, obs) for lw, c in zip(self.log_w, self.conditioners)]
        )
        if not np.any(np.isfinite(log_post)):
            raise AllWeightsVanish("observation has zero likelihood under every component")
        log_post -= np.max(log_post)
        w = np.exp(log_post)
        w /= w.sum()
        return GaussianMixture(w, [c(obs) for c in self.conditioners])


def mixture_conditioner(m, split):
    cond = m._conditioners.get(split)
    if cond is None:
        cond = m._conditioners[split] = MixtureConditioner(m, split)
    return cond


def gmm_condition(m, observed, split):
    """Conditional mixture of the trailing block given the leading ``split`` coordinates.

    Posterior weights are ``w_i N(observed; mu_ia, Sigma_iaa)`` renormalized
    in log space; each component is conditioned by Schur complement.
    """
    if not 0 < split < m.dim:
        raise DimensionMismatch(f"split must satisfy 0 < split < {m.dim}, got {split}")
    return mixture_conditioner(m, split)(observed)


def select_k(train, val, k_candidates, rng_seed=0, max_iter=EM_MAX_ITER, tol=EM_TOL):
    """Fit each candidate ``k`` and keep the one with the lowest mean validation NLL.

    Each candidate gets its own seed mixed from ``(rng_seed, k)``. Candidates
    that fail with :class:`DegenerateComponent` or :class:`TooFewPoints` are
    skipped. Ties go to the smaller ``k``.

    Returns
    -------
    (k, model, scores) where ``scores`` maps each fitted ``k`` to its validation NLL.
    """
    if not k_candidates:
        raise ValueError("k_candidates must be non-empty")
    scores = {}
    best = None
    last_err = None
    for k in sorted(set(int(c) for c in k_candidates)):
        try:
            res = em_fit(train, k, np.random.SeedSequence([rng_seed, k]), max_iter, tol)
        except (DegenerateComponent, TooFewPoints) as exc:
            log.info("select_k: skipping k=%d (%s)", k, exc)
            last_err = exc
            continue
        nll = -float(np.mean(gmm_log_pdf(res.model, val)))
        scores[k] = nll
        if best is None or nll < best[2]:
            best = (k, res.model, nll)
    if best is None:
        raise last_err
    return best[0], best[1], scores
