"""Dense multivariate Gaussians with a cached Cholesky factor.

All linear algebra goes through the lower Cholesky factor ``L`` of the
covariance (``Sigma = L L^T``): densities use triangular solves and the
log-determinant ``2 * sum(log diag(L))``; conditioning factorizes the observed
block and never forms an explicit inverse.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import DimensionMismatch, EmptyData, NonFiniteInput, NotPositiveDefinite

JITTER = 1e-6
MAX_JITTER = 1e-2
LOG_2PI = float(np.log(2.0 * np.pi))


def stable_cholesky(cov, jitter=JITTER, max_jitter=MAX_JITTER):
    """Cholesky factor of ``cov``, adding diagonal jitter only if needed.

    The factorization is first attempted as is; on failure ``jitter * I`` is
    added and escalated by 10x up to ``max_jitter``.

    Returns
    -------
    (cov_used, L) : the (possibly regularized) covariance and its factor.
    """
    cov = np.asarray(cov, dtype=float)
    try:
        return cov, np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(cov.shape[0])
    eps = jitter
    while eps <= max_jitter * (1 + 1e-12):
        reg = cov + eps * eye
        try:
            return reg, np.linalg.cholesky(reg)
        except np.linalg.LinAlgError:
            eps *= 10.0
    raise NotPositiveDefinite(
        f"covariance not positive definite even with jitter {max_jitter:g}"
    )


class MultivariateGaussian:
    """Gaussian ``N(mean, covariance)``, immutable after construction.

    Parameters
    ----------
    mean : array_like, shape (d,)
    covariance : array_like, shape (d, d)
        Symmetrized on entry. If it does not factorize, jitter is escalated
        (see :func:`stable_cholesky`) and the regularized matrix is stored.
    """

    __slots__ = ("mean", "covariance", "cholesky_factor", "_log_det", "_factor_inv")

    def __init__(self, mean, covariance, *, _factor=None):
        mean = np.array(mean, dtype=float).reshape(-1)
        cov = np.array(covariance, dtype=float).reshape(mean.size, mean.size)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise NonFiniteInput("Gaussian parameters must be finite")
        cov = 0.5 * (cov + cov.T)
        if _factor is None:
            cov, chol = stable_cholesky(cov)
        else:
            chol = _factor
        for arr in (mean, cov, chol):
            arr.setflags(write=False)
        self.mean = mean
        self.covariance = cov
        self.cholesky_factor = chol
        self._log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        self._factor_inv = None

    @property
    def dim(self):
        return self.mean.size

    @property
    def log_det(self):
        return self._log_det

    @property
    def factor_inverse(self):
        """``L^{-1}`` from a triangular solve against the identity, computed once."""
        if self._factor_inv is None:
            inv = solve_triangular(self.cholesky_factor, np.eye(self.dim), lower=True)
            inv.setflags(write=False)
            self._factor_inv = inv
        return self._factor_inv

    def log_pdf(self, x):
        return gaussian_log_pdf(self, x)

    def sample(self, count, rng_seed=None):
        return gaussian_sample(self, count, rng_seed)

    def condition(self, observed, split):
        return gaussian_condition(self, observed, split)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["mean"], obj["covariance"])

    def __repr__(self):
        return f"MultivariateGaussian(dim={self.dim})"


def fit_gaussian(data, jitter=JITTER):
    """Maximum-likelihood Gaussian with the biased (1/n) scatter matrix.

    ``jitter * I`` is always added to the covariance, so a constant dataset
    yields ``jitter * I``.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    n = data.shape[0]
    if n < 2:
        raise EmptyData(f"need at least 2 rows to fit a Gaussian, got {n}")
    if not np.all(np.isfinite(data)):
        raise NonFiniteInput("data contains non-finite entries")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / n
    cov += jitter * np.eye(data.shape[1])
    return MultivariateGaussian(mean, cov)


def _as_points(g, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x.reshape(1, -1) if single else x
    if pts.ndim != 2 or pts.shape[1] != g.dim:
        raise DimensionMismatch(f"expected points of dimension {g.dim}, got shape {x.shape}")
    return pts, single


def gaussian_log_pdf(g, x):
    """Log-density in nats. ``x`` may be a single point (d,) or a batch (n, d)."""
    pts, single = _as_points(g, x)
    if pts.shape[0] < 64:
        white = solve_triangular(g.cholesky_factor, (pts - g.mean).T, lower=True).T
    else:
        white = (pts - g.mean) @ g.factor_inverse.T
    maha = np.einsum("ij,ij->i", white, white)
    out = -0.5 * (maha + g.log_det + g.dim * LOG_2PI)
    return float(out[0]) if single else out


def gaussian_sample(g, count, rng_seed=None):
    """``count`` draws as rows ``mean + L z``; deterministic for a fixed seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal((count, g.dim))
    return g.mean + z @ g.cholesky_factor.T


class GaussianConditioner:
    """Precomputed Schur-complement conditioning of ``g`` on its first ``split`` coords.

    The posterior covariance does not depend on the observed values, so it is
    factorized once; each call only forms the posterior mean.
    """

    def __init__(self, g, split):
        d = g.dim
        if not 0 < split < d:
            raise DimensionMismatch(f"split must satisfy 0 < split < {d}, got {split}")
        self.split = split
        cov = g.covariance
        s_aa = cov[:split, :split]
        s_ab = cov[:split, split:]
        s_bb = cov[split:, split:]
        try:
            l_aa = np.linalg.cholesky(s_aa)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite("observed block is not positive definite") from exc
        self.mu_a = g.mean[:split]
        self.mu_b = g.mean[split:]
        # gain = Sigma_ba Sigma_aa^{-1}, via two triangular solves
        self.gain = cho_solve((l_aa, True), s_ab).T
        post_cov = s_bb - self.gain @ s_ab
        post_cov = 0.5 * (post_cov + post_cov.T)
        self.post_cov, self.post_factor = stable_cholesky(post_cov)
        self.marginal = MultivariateGaussian(self.mu_a, s_aa, _factor=l_aa)

    def posterior_mean(self, observed):
        obs = np.asarray(observed, dtype=float)
        if obs.shape[-1] != self.split:
            raise DimensionMismatch(f"observed block must have length {self.split}")
        return self.mu_b + (obs - self.mu_a) @ self.gain.T

    def __call__(self, observed):
        obs = np.asarray(observed, dtype=float).reshape(-1)
        return MultivariateGaussian(
            self.posterior_mean(obs), self.post_cov, _factor=self.post_factor
        )


def gaussian_condition(g, observed, split):
    """Posterior ``N(mu_{b|a}, Sigma_{b|a})`` of the trailing block given the leading ``split`` coords."""
    obs = np.asarray(observed, dtype=float).reshape(-1)
    if obs.size != split:
        raise DimensionMismatch(f"observed has length {obs.size}, split is {split}")
    return GaussianConditioner(g, split)(obs)
