import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from canf.dataset import SequenceDataset
from canf.errors import NonFiniteLogDensity, ZeroOptimalUtility
from canf.evaluation import (
    ScheduleAction,
    decision_score,
    eval_metrics,
    lower_quantile,
    mc_kl,
    proportional_regret,
    select_action,
    select_action_from_samples,
    subset_table,
    utility_samples,
    var_table,
)
from canf.forecasters import ForecastDistribution
from canf.gaussian import MultivariateGaussian
from canf.mixture import GaussianMixture


class FixedForecaster:
    """Returns the same distribution for every input."""

    def __init__(self, fd):
        self.fd = fd

    def forecast(self, x):
        return self.fd


class LookupForecaster:
    """Zero-variance forecast read from a table keyed by the input window."""

    def __init__(self, table):
        self.table = table

    def forecast(self, x):
        path = self.table[tuple(np.round(x, 12))]
        return point_forecast(path)


def point_forecast(path):
    path = np.asarray(path, dtype=float)
    return ForecastDistribution(path.size, sampler=lambda m, seed=None: np.tile(path, (m, 1)))


def oracle(ds):
    return LookupForecaster({tuple(np.round(x, 12)): y for x, y in zip(ds.inputs, ds.targets)})


def random_dataset(seed, n=6, L=2, K=5):
    rng = np.random.default_rng(seed)
    return SequenceDataset(rng.uniform(0.5, 3.0, size=(n, L + 1 + K)), L, K)


def brute_force_action(samples, D, alpha):
    """Independent VaR search: Python sorting and tuple comparison only."""
    m, K = samples.shape
    idx = int(math.floor(alpha * (m - 1)))
    best, best_val = None, -math.inf
    for subset in combinations(range(K), D):
        utils = sorted(-sum(float(row[j]) for j in subset) for row in samples)
        if utils[idx] > best_val:
            best, best_val = subset, utils[idx]
    return tuple(j + 1 for j in best)


def test_lower_quantile_convention():
    v = [5.0, 1.0, 4.0, 2.0, 3.0]
    assert lower_quantile(v, 0.8) == 4.0
    assert lower_quantile(v, 0.2) == 1.0
    assert lower_quantile(v, 0.0) == 1.0
    assert lower_quantile([7.0], 0.8) == 7.0
    np.testing.assert_array_equal(lower_quantile([[1, 9], [3, 2], [2, 4]], 0.5, axis=0), [2, 4])


def test_subset_table_lexicographic():
    t = subset_table(4, 2)
    assert t.tolist() == [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]
    assert subset_table(12, 4).shape == (math.comb(12, 4), 4)


def test_utility_samples_are_negated_sums():
    s = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    u = utility_samples(s, subset_table(3, 2))
    np.testing.assert_array_equal(u, [[-3, -4, -5], [-9, -10, -11]])


def test_schedule_action_validation():
    assert ScheduleAction((2, 4)).zero_based == [1, 3]
    for bad in [(4, 2), (2, 2), (0, 1)]:
        with pytest.raises(ValueError):
            ScheduleAction(bad)


def test_select_action_deterministic_picks_two_smallest():
    fd = point_forecast([3.0, 1.0, 4.0, 1.0])
    assert select_action(fd, 2, 0.2, 50, 0).indices == (2, 4)


def test_select_action_full_set():
    rng = np.random.default_rng(0)
    for _ in range(5):
        samples = rng.normal(size=(30, 5))
        assert select_action_from_samples(samples, 5).indices == (1, 2, 3, 4, 5)


def test_select_action_ties_break_lexicographically():
    # all loads equal, so every subset has the same VaR
    assert select_action_from_samples(np.ones((10, 6)), 3).indices == (1, 2, 3)


@pytest.mark.parametrize("seed", range(5))
def test_select_action_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    comps = [MultivariateGaussian(rng.normal(size=6) * 2, np.eye(6) * rng.uniform(0.2, 2)) for _ in range(3)]
    fd = ForecastDistribution(6, GaussianMixture(rng.dirichlet(np.ones(3)), comps))
    samples = fd.sample(500, seed)
    assert select_action_from_samples(samples, 2, 0.2).indices == brute_force_action(samples, 2, 0.2)
    assert select_action(fd, 2, 0.2, 500, seed).indices == brute_force_action(samples, 2, 0.2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_select_action_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    samples = rng.gamma(2.0, size=(200, 7))
    # powers of two keep the scaled sums exact
    c2 = 2.0 ** round(math.log2(c))
    assert select_action_from_samples(samples, 3).indices == select_action_from_samples(c2 * samples, 3).indices
    var, _ = var_table(samples, 3, 0.2)
    var_c, _ = var_table(c * samples, 3, 0.2)
    np.testing.assert_allclose(var_c, c * var, rtol=1e-12)


def test_var_table_errors():
    with pytest.raises(ValueError):
        var_table(np.ones((5, 3)), 4, 0.2)
    with pytest.raises(ValueError):
        var_table(np.ones((5, 3)), 2, 1.0)


def test_proportional_regret_examples():
    y = [1.0, 2.0, 3.0, 4.0]
    assert proportional_regret(y, ScheduleAction((3, 4)), 2) == pytest.approx(4 / 3, abs=1e-15)
    assert proportional_regret(y, ScheduleAction((1, 2)), 2) == 0.0
    assert proportional_regret([5.0, 1.0, 5.0, 1.0], ScheduleAction((2, 4))) == 0.0
    with pytest.raises(ZeroOptimalUtility):
        proportional_regret([0.0, 0.0, 0.0], ScheduleAction((1, 2)), 2)
    with pytest.raises(ValueError):
        proportional_regret(y, ScheduleAction((1, 5)), 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_proportional_regret_nonnegative(seed, D):
    rng = np.random.default_rng(seed)
    K = D + int(rng.integers(0, 5))
    y = rng.uniform(0.01, 5.0, size=K)
    action = ScheduleAction(tuple(sorted(rng.choice(K, D, replace=False) + 1)))
    assert proportional_regret(y, action, D) >= 0.0


def test_eval_metrics_perfect_forecaster():
    ds = random_dataset(0)
    rep = eval_metrics(oracle(ds), ds, m=20, rng_seed=0)
    assert rep.wape == 0.0 and rep.rwse == 0.0
    assert rep.per_index_rwse == [0.0] * ds.K
    assert rep.mean_ll is None
    assert (rep.n_sequences, rep.m_samples) == (len(ds), 20)


def test_eval_metrics_constant_forecaster():
    ds = SequenceDataset(np.array([[0.5, 1.0]]), 0, 1)
    rep = eval_metrics(FixedForecaster(point_forecast([2.0])), ds, m=1)
    assert rep.wape == pytest.approx(1.0) and rep.rwse == pytest.approx(1.0)


def test_eval_metrics_hand_computed():
    ds = SequenceDataset(np.array([[0.0, 2.0, 4.0], [0.0, 1.0, 1.0]]), 0, 2)
    rep = eval_metrics(FixedForecaster(point_forecast([1.0, 2.0])), ds, m=3)
    # abs pct errors: 1/2, 2/4, 0/1, 1/1; squared errors: 1, 4, 0, 1
    assert rep.wape == pytest.approx(2.0 / 4)
    assert rep.rwse == pytest.approx(math.sqrt(6.0 / 4))
    np.testing.assert_allclose(rep.per_index_rwse, [math.sqrt(0.5), math.sqrt(2.5)])


def test_eval_metrics_clamps_zero_truth():
    ds = SequenceDataset(np.array([[1.0, 0.0, 1.0]]), 0, 2)
    rep = eval_metrics(FixedForecaster(point_forecast([0.0, 1.0])), ds, m=4)
    assert rep.clamped_terms == 4 and rep.wape == 0.0


def test_eval_metrics_standard_normal_ll():
    fd = ForecastDistribution(1, GaussianMixture([1.0], [MultivariateGaussian([0.0], [[1.0]])]))
    ds = SequenceDataset(np.array([[3.0, 0.0]]), 0, 1)
    assert eval_metrics(FixedForecaster(fd), ds, m=10).mean_ll == pytest.approx(-0.9189385, abs=1e-7)


def test_eval_metrics_ll_in_raw_units():
    # standardized truth 0.5 with std 4 is raw 2 + 0.5 * 4 = 4
    fd = ForecastDistribution(2, GaussianMixture([1.0], [MultivariateGaussian([0.0, 0.0], np.eye(2))]))
    ds = SequenceDataset(np.array([[0.0, 0.5, -1.0]]), 0, 2, stats=(2.0, 4.0))
    expected = norm.logpdf([4.0, -2.0], loc=2.0, scale=4.0).sum()
    assert eval_metrics(FixedForecaster(fd), ds, m=5).mean_ll == pytest.approx(expected, abs=1e-12)


def test_metrics_invariant_to_sequence_order():
    ds = random_dataset(1, n=8)
    fc = LookupForecaster({tuple(np.round(x, 12)): y + 0.3 * x[-1] for x, y in zip(ds.inputs, ds.targets)})
    a = eval_metrics(fc, ds, m=7)
    b = eval_metrics(fc, ds.subset(np.random.default_rng(2).permutation(len(ds))), m=7)
    assert a.wape == pytest.approx(b.wape, rel=1e-12)
    assert a.rwse == pytest.approx(b.rwse, rel=1e-12)


def test_metrics_independent_of_evaluation_order():
    ds = random_dataset(3, n=5)
    fd = ForecastDistribution(ds.K, GaussianMixture([1.0], [MultivariateGaussian(np.ones(ds.K), np.eye(ds.K))]))
    a = eval_metrics(FixedForecaster(fd), ds, m=50, rng_seed=9)
    b = eval_metrics(FixedForecaster(fd), ds, m=50, rng_seed=9)
    assert a == b


def test_decision_score_oracle_and_single_sequence():
    ds = random_dataset(4, n=10)
    rep = decision_score(oracle(ds), ds, D=2, m=5)
    assert rep.decision_score == 0.0 and rep.regrets == [0.0] * 10
    one = ds.subset([0])
    y = one.targets[0]
    fc = FixedForecaster(point_forecast(np.arange(ds.K, dtype=float)))
    rep = decision_score(fc, one, D=2, m=3)
    assert rep.decision_score == pytest.approx(proportional_regret(y, ScheduleAction((1, 2)), 2))


def test_decision_score_is_lower_quantile_of_regrets():
    ds = random_dataset(5, n=11)
    fc = FixedForecaster(point_forecast(np.arange(ds.K, dtype=float)))
    rep = decision_score(fc, ds, D=2, m=2)
    assert rep.decision_score == sorted(rep.regrets)[8]


def test_decision_score_excludes_zero_sequences():
    ds = SequenceDataset(np.array([[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 2.0, 3.0]]), 0, 3)
    rep = decision_score(FixedForecaster(point_forecast([3.0, 2.0, 1.0])), ds, D=2, m=2)
    assert rep.excluded == [0] and len(rep.regrets) == 1


def test_mc_kl_self_divergence_is_zero():
    def sampler(n, seed):
        return np.random.default_rng(seed).random((n, 2))

    def logp(x):
        return np.zeros(len(x))

    assert mc_kl(logp, sampler, logp, 10_000, 0) == (0.0, 0.0)


def test_mc_kl_uniform_square_against_standard_normal():
    def sampler(n, seed):
        return np.random.default_rng(seed).random((n, 2))

    # E over the unit square of -log N(x; 0, I) = log(2 pi) + (1/3 + 1/3) / 2
    exact = math.log(2 * math.pi) + 1.0 / 3.0
    mean, se = mc_kl(lambda x: np.zeros(len(x)), sampler, lambda x: norm.logpdf(x).sum(axis=1), 100_000, 1)
    assert abs(mean - exact) < 3 * se
    assert exact == pytest.approx(2.1712, abs=1e-4)


def test_mc_kl_errors():
    def sampler(n, seed):
        return np.random.default_rng(seed).random((n, 1))

    with pytest.raises(ValueError):
        mc_kl(lambda x: np.zeros(len(x)), sampler, lambda x: np.zeros(len(x)), 999)
    with pytest.raises(NonFiniteLogDensity) as exc:
        mc_kl(lambda x: np.zeros(len(x)), sampler, lambda x: np.where(x[:, 0] < 0.5, -np.inf, 0.0), 1000)
    assert exc.value.count > 0
