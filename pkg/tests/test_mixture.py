import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from canf.errors import DegenerateComponent, DimensionMismatch, TooFewPoints
from canf.gaussian import MultivariateGaussian, fit_gaussian, gaussian_condition, gaussian_log_pdf
from canf import mixture
from canf.mixture import (
    GaussianMixture,
    em_fit,
    gmm_condition,
    gmm_log_pdf,
    gmm_sample,
    select_k,
)


def random_mixture(rng, d, k, spread=3.0):
    comps = []
    for _ in range(k):
        a = rng.normal(size=(d, d)) * 0.7
        comps.append(MultivariateGaussian(rng.normal(size=d) * spread, a @ a.T + 0.2 * np.eye(d)))
    return GaussianMixture(rng.dirichlet(np.ones(k)), comps)


def naive_density(m, x):
    return sum(w * multivariate_normal(c.mean, c.covariance).pdf(x) for w, c in zip(m.weights, m.components))


def two_clusters(seed, n=500):
    rng = np.random.default_rng(seed)
    return np.vstack([rng.normal(size=(n, 2)) + [-5, 0], rng.normal(size=(n, 2)) + [5, 0]])


def test_em_single_component_is_gaussian_fit():
    data = np.random.default_rng(0).normal(size=(300, 3))
    res = em_fit(data, 1, 0)
    g = fit_gaussian(data)
    np.testing.assert_allclose(res.model.weights, [1.0])
    np.testing.assert_allclose(res.model.components[0].mean, g.mean, atol=1e-12)
    np.testing.assert_allclose(res.model.components[0].covariance, g.covariance, atol=1e-12)


def test_em_two_clusters():
    res = em_fit(two_clusters(1), 2, 1)
    means = sorted(c.mean.tolist() for c in res.model.components)
    np.testing.assert_allclose(means, [[-5, 0], [5, 0]], atol=0.2)
    np.testing.assert_allclose(res.model.weights, [0.5, 0.5], atol=0.05)
    assert res.converged


@pytest.mark.parametrize("seed", range(5))
def test_em_trace_monotone(seed):
    rng = np.random.default_rng(seed)
    data = np.vstack([rng.normal(size=(200, 3)), rng.normal(size=(100, 3)) * 0.5 + 3])
    res = em_fit(data, 4, seed)
    assert np.all(np.diff(res.log_likelihood_trace) >= -1e-9)


def test_em_reproducible():
    data = two_clusters(2)
    a, b = em_fit(data, 3, 9), em_fit(data, 3, 9)
    assert a.log_likelihood_trace == b.log_likelihood_trace
    np.testing.assert_array_equal(a.model.weights, b.model.weights)


def test_em_errors():
    with pytest.raises(TooFewPoints):
        em_fit(np.zeros((3, 2)), 4, 0)


def test_em_reseeds_starved_component(monkeypatch):
    data = two_clusters(5, 200)
    # one initial mean placed far from every point gets no responsibility mass
    monkeypatch.setattr(mixture, "_kmeanspp", lambda d, k, rng: np.array([[-5.0, 0.0], [5.0, 0.0], [1e4, 1e4]]))
    res = em_fit(data, 3, 0)
    assert res.reseeds == [0]
    assert np.all(np.isfinite(res.model.weights)) and res.model.weights.min() > 0


def test_select_k_skips_degenerate_candidates(monkeypatch):
    real = mixture.em_fit

    def flaky(data, k, *args, **kwargs):
        if k == 2:
            raise DegenerateComponent("forced")
        return real(data, k, *args, **kwargs)

    monkeypatch.setattr(mixture, "em_fit", flaky)
    data = two_clusters(6, 100)
    k, _, scores = select_k(data[::2], data[1::2], [2, 3], 0)
    assert k == 3 and 2 not in scores
    with pytest.raises(DegenerateComponent):
        select_k(data[::2], data[1::2], [2], 0)


def test_log_pdf_single_and_duplicate_components():
    g = MultivariateGaussian([1.0, 2.0], [[1.0, 0.2], [0.2, 0.5]])
    x = np.array([0.3, 1.1])
    assert gmm_log_pdf(GaussianMixture([1.0], [g]), x) == pytest.approx(gaussian_log_pdf(g, x), abs=1e-14)
    assert gmm_log_pdf(GaussianMixture([0.5, 0.5], [g, g]), x) == pytest.approx(gaussian_log_pdf(g, x), abs=1e-14)


def test_log_pdf_matches_naive_summation():
    rng = np.random.default_rng(4)
    m = random_mixture(rng, 2, 3)
    pts = rng.normal(size=(10, 2)) * 3
    np.testing.assert_allclose(np.exp(gmm_log_pdf(m, pts)), naive_density(m, pts), rtol=1e-10, atol=1e-300)
    with pytest.raises(DimensionMismatch):
        gmm_log_pdf(m, [1.0, 2.0, 3.0])


def test_sample_properties():
    g0 = MultivariateGaussian([-10.0, 0.0], np.eye(2))
    g1 = MultivariateGaussian([10.0, 0.0], np.eye(2))
    x = gmm_sample(GaussianMixture([1.0, 0.0], [g0, g1]), 1000, 0)
    assert np.all(x[:, 0] < 0)
    m = GaussianMixture([0.3, 0.7], [g0, g1])
    x = gmm_sample(m, 100_000, 1)
    occupancy = np.mean(x[:, 0] > 0)
    assert abs(occupancy - 0.7) < 0.01
    np.testing.assert_array_equal(gmm_sample(m, 5, 3), gmm_sample(m, 5, 3))
    one = gmm_sample(GaussianMixture([1.0], [g0]), 20_000, 2)
    np.testing.assert_allclose(one.mean(axis=0), g0.mean, atol=0.05)
    np.testing.assert_allclose(np.cov(one.T), np.eye(2), atol=0.05)


def test_condition_single_component():
    rng = np.random.default_rng(8)
    m = random_mixture(rng, 4, 1)
    post = gmm_condition(m, [0.5, -0.2], 2)
    ref = gaussian_condition(m.components[0], [0.5, -0.2], 2)
    np.testing.assert_allclose(post.weights, [1.0])
    np.testing.assert_allclose(post.components[0].mean, ref.mean)
    np.testing.assert_allclose(post.components[0].covariance, ref.covariance)


def test_condition_equal_marginals_keep_prior_weights():
    c0 = MultivariateGaussian([0.0, 1.0], [[1.0, 0.5], [0.5, 1.0]])
    c1 = MultivariateGaussian([0.0, -3.0], [[1.0, -0.2], [-0.2, 2.0]])
    post = gmm_condition(GaussianMixture([0.3, 0.7], [c0, c1]), [0.8], 1)
    np.testing.assert_allclose(post.weights, [0.3, 0.7], atol=1e-14)


def slice_density(m, x0, grid):
    joint = naive_density(m, np.column_stack([np.full_like(grid, x0), grid]))
    h = grid[1] - grid[0]
    return joint / (joint.sum() * h)


@pytest.mark.parametrize("seed", range(5))
def test_condition_matches_grid_slice(seed):
    rng = np.random.default_rng(seed)
    m = random_mixture(rng, 2, 2)
    x0 = float(rng.normal() * 2)
    grid = np.linspace(-25, 25, 1000)
    post = gmm_condition(m, [x0], 1)
    analytic = np.exp(gmm_log_pdf(post, grid[:, None]))
    assert np.max(np.abs(analytic - slice_density(m, x0, grid))) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(2, 5))
def test_posterior_weights_normalized(seed, k, d):
    rng = np.random.default_rng(seed)
    m = random_mixture(rng, d, k)
    split = int(rng.integers(1, d))
    post = gmm_condition(m, rng.normal(size=split) * 3, split)
    assert abs(post.weights.sum() - 1) < 1e-10
    assert post.dim == d - split


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_conditional_density_integrates_to_one(seed, k):
    rng = np.random.default_rng(seed)
    m = random_mixture(rng, 3, k, spread=1.5)
    post = gmm_condition(m, [float(rng.normal())], 1)
    g = np.linspace(-30, 30, 601)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    total = np.exp(gmm_log_pdf(post, np.column_stack([xx.ravel(), yy.ravel()]))).sum() * (g[1] - g[0]) ** 2
    assert abs(total - 1) < 1e-3


def test_select_k_single_candidate():
    data = two_clusters(3, 100)
    k, model, scores = select_k(data[::2], data[1::2], [3], 0)
    assert k == 3 and model.k == 3 and list(scores) == [3]


def test_select_k_prefers_one_for_gaussian_data():
    # "8 of 10" read as a selection rate of at least 0.8, estimated over 60 draws
    hits = 0
    for seed in range(60):
        rng = np.random.default_rng(100 + seed)
        k, _, _ = select_k(rng.normal(size=(1000, 2)), rng.normal(size=(1000, 2)), [1, 2, 4], seed)
        hits += k == 1
    assert hits >= 48


def test_select_k_uniform_square_near_nine():
    # 1000 train / 200 validation points per seed, candidates 1..15
    picks = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        k, _, _ = select_k(rng.random((1000, 2)), rng.random((200, 2)), range(1, 16), seed)
        picks.append(k)
    assert abs(np.median(picks) - 9) <= 3, picks


def test_serialization_roundtrip():
    m = random_mixture(np.random.default_rng(1), 3, 2)
    back = GaussianMixture.from_dict(json.loads(json.dumps(m.to_dict())))
    pts = np.random.default_rng(2).normal(size=(5, 3))
    np.testing.assert_allclose(gmm_log_pdf(back, pts), gmm_log_pdf(m, pts), rtol=1e-12)
