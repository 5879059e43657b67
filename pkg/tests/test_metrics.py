import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, stats

from flowal import metrics

finite = st.floats(-100, 100, allow_nan=False)


def samples(n):
    return arrays(np.float64, n, elements=finite)


# -- trapz -----------------------------------------------------------------


@pytest.mark.parametrize("v, expected", [([1, 1, 1], 2.0), ([0, 0, 0], 0.0), ([0.5, 1.0, 0.5], 1.5)])
def test_trapz_examples(v, expected):
    assert metrics.trapz(v) == pytest.approx(expected, abs=1e-15)


def test_trapz_physical_matches_numpy():
    v = np.random.default_rng(0).random((4, 200))
    np.testing.assert_allclose(metrics.trapz_physical(v), np.trapezoid(v, np.linspace(0, 1, 200), axis=-1))


def test_trapz_rejects_short():
    with pytest.raises(ValueError):
        metrics.trapz([1.0])


# -- KL --------------------------------------------------------------------


def test_kl_examples():
    assert metrics.discrete_kl([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert metrics.discrete_kl([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert metrics.discrete_kl([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.1438, abs=1e-4)


def test_kl_zero_vs_zero_contributes_nothing():
    assert metrics.discrete_kl([0.0, 1.0], [0.0, 1.0]) == 0.0


def test_kl_finite_when_q_vanishes():
    val = metrics.discrete_kl([0.5, 0.5], [1.0, 0.0])
    assert np.isfinite(val) and val > 0


def test_kl_length_mismatch():
    with pytest.raises(ValueError):
        metrics.discrete_kl([1, 0], [1, 0, 0])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**31 - 1))
def test_kl_nonnegative_for_equal_mass(n, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.random(n), rng.random(n)
    p[rng.random(n) < 0.2] = 0.0
    q *= p.sum() / q.sum() if p.sum() > 0 else 1.0
    assert metrics.discrete_kl(p, q) >= -1e-12
    assert metrics.discrete_kl(p, p) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2**31 - 1))
def test_kl_entropy_cross_entropy_identity(n, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.random(n) * 3, rng.random(n) * 3
    lhs = metrics.discrete_kl(p, q)
    rhs = -metrics.self_entropy(p) + metrics.cross_entropy(p, q)
    assert abs(lhs - rhs) < 1e-10


def test_kl_batched_matches_loop():
    rng = np.random.default_rng(1)
    p, q = rng.random((5, 7)), rng.random((5, 7))
    np.testing.assert_allclose(metrics.discrete_kl(p, q), [metrics.discrete_kl(a, b) for a, b in zip(p, q)])


# -- continuous entropy ----------------------------------------------------


def test_entropy_uniform_and_zero():
    assert metrics.continuous_entropy(np.ones(200)) == 0.0
    assert metrics.continuous_entropy(np.zeros(200)) == 0.0


def test_entropy_gaussian_grid_matches_analytic():
    grid = np.linspace(0, 1, 200)
    v = stats.norm(0.5, 0.05).pdf(grid)
    analytic = stats.norm(0.5, 0.05).entropy()
    assert analytic == pytest.approx(-1.577, abs=1e-3)
    assert abs(metrics.continuous_entropy(v, physical=True) - analytic) < 0.02


def test_entropy_spacing_does_not_change_argmax():
    rng = np.random.default_rng(2)
    v = rng.random((30, 200)) * rng.random((30, 1)) * 5
    scaled = v / metrics.trapz(v)[:, None]
    for w in (v, scaled):
        assert np.argmax(metrics.continuous_entropy(w)) == np.argmax(metrics.continuous_entropy(w, physical=True))


# -- EMD -------------------------------------------------------------------


def brute_force_emd(a, b):
    return min(np.abs(np.asarray(a) - np.asarray(b)[list(perm)]).mean() for perm in itertools.permutations(range(len(b))))


def test_emd_examples():
    assert metrics.emd_1d([0.4, 0.1], [0.1, 0.4]) == 0.0
    assert metrics.emd_1d([0.0], [1.0]) == 1.0
    assert metrics.emd_1d([0.0, 1.0], [1.0, 2.0]) == 1.0
    assert brute_force_emd([0.0, 1.0], [1.0, 2.0]) == 1.0


def test_emd_errors():
    with pytest.raises(ValueError):
        metrics.emd_1d([], [])
    with pytest.raises(ValueError):
        metrics.emd_1d([1.0], [1.0, 2.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(samples(n), samples(n))))
def test_emd_matches_matching_oracle(ab):
    a, b = ab
    assert metrics.emd_1d(a, b) == pytest.approx(brute_force_emd(a, b), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40).flatmap(lambda n: st.tuples(samples(n), samples(n))))
def test_emd_matches_scipy(ab):
    a, b = ab
    assert metrics.emd_1d(a, b) == pytest.approx(stats.wasserstein_distance(a, b), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 25).flatmap(lambda n: st.tuples(samples(n), samples(n), samples(n))), finite)
def test_emd_metric_laws(abc, shift):
    a, b, c = abc
    d = metrics.emd_1d
    assert d(a, a) == 0.0
    assert d(a, b) == d(b, a)
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-9
    assert d(a + shift, b + shift) == pytest.approx(d(a, b), abs=1e-9)
    if d(a, b) == 0.0:
        np.testing.assert_array_equal(np.sort(a), np.sort(b))


# -- CRPS ------------------------------------------------------------------


def crps_pairs_oracle(y, s):
    s = np.asarray(s, dtype=float)
    return np.abs(s - y).mean() - 0.5 * np.abs(s[:, None] - s[None, :]).mean()


def test_crps_gaussian_examples():
    at_mean = metrics.crps_gaussian(0.0, 0.0, 1.0)
    assert at_mean == pytest.approx(2 * stats.norm.pdf(0) - 1 / math.sqrt(math.pi), abs=1e-12)
    assert at_mean == pytest.approx(0.23369, abs=1e-5)
    assert abs(metrics.crps_gaussian(1.0, 0.0, 1e-6) - 1.0) < 1e-4


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.01, 10), st.floats(0.1, 10))
def test_crps_gaussian_scale_equivariance(y, mu, sigma, c):
    assert metrics.crps_gaussian(c * y, c * mu, c * sigma) == pytest.approx(c * metrics.crps_gaussian(y, mu, sigma), rel=1e-9, abs=1e-12)


def test_crps_gaussian_matches_numerical_integral():
    # CRPS = int (F(t) - 1{t >= y})^2 dt
    y, mu, sigma = 0.7, 0.2, 0.4
    F = stats.norm(mu, sigma).cdf
    below = integrate.quad(lambda t: F(t) ** 2, -np.inf, y)[0]
    above = integrate.quad(lambda t: (1 - F(t)) ** 2, y, np.inf)[0]
    assert metrics.crps_gaussian(y, mu, sigma) == pytest.approx(below + above, abs=1e-8)


def test_crps_gaussian_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        metrics.crps_gaussian(0.0, 0.0, 0.0)


def test_crps_samples_examples():
    assert metrics.crps_samples(0.3, [0.3, 0.3, 0.3]) == 0.0
    assert metrics.crps_samples(1.0, [0.0, 2.0]) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        metrics.crps_samples(0.0, [1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 30).flatmap(samples), finite)
def test_crps_samples_matches_pair_oracle(s, y):
    assert metrics.crps_samples(y, s) == pytest.approx(crps_pairs_oracle(y, s), rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("mu, sigma, y", [(0.0, 1.0, 0.0), (0.5, 0.1, 0.62), (-2.0, 3.0, 1.5)])
def test_crps_samples_consistent_with_closed_form(mu, sigma, y):
    draws = np.random.default_rng(0).normal(mu, sigma, 10_000)
    exact = metrics.crps_gaussian(y, mu, sigma)
    assert abs(metrics.crps_samples(y, draws) - exact) <= 0.02 * exact


def test_crps_samples_batched():
    rng = np.random.default_rng(3)
    s, y = rng.normal(size=(4, 9)), rng.normal(size=4)
    np.testing.assert_allclose(metrics.crps_samples(y, s), [crps_pairs_oracle(a, b) for a, b in zip(y, s)])
