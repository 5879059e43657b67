import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.spatial.distance import cdist

from flowal import acquisition as acq
from flowal import metrics
from flowal.models import EncoderConfig, GaussianDistribution, ModelConfig, build_model


class GaussianStub:
    """Pool where row i of x has predictive N(mu[i], sigma[i]); x[:, 0] holds i."""

    def __init__(self, mu, sigma):
        self.mu = np.asarray(mu, dtype=float)
        self.sigma = np.asarray(sigma, dtype=float)

    def distribution(self, x, mode="eval"):
        idx = np.asarray(x)[:, 0].astype(int)
        return GaussianDistribution(self.mu[idx], self.sigma[idx])


def pool(n):
    return np.arange(n, dtype=float)[:, None]


def dropout_model(rate=0.1, family="flow", seed=0):
    cfg = ModelConfig(
        family=family,
        encoder=EncoderConfig(widths=[16, 16], dropout_train=rate, dropout_eval=rate),
        decoder_widths=[8],
    )
    model = build_model(2, cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in model.params():
        p.data += 0.3 * rng.standard_normal(p.shape)
    return model


def gauss_grid(mu, sigma, R=200):
    return stats.norm(mu, sigma).pdf(np.linspace(0, 1, R))


# -- heuristics ------------------------------------------------------------


def test_std_monotone_in_sigma():
    sig = [0.05, 0.1, 0.2]
    s = acq.score_std(GaussianStub([0.5] * 3, sig), pool(3), acq.candidate_rngs(0, 0, range(3)), samples=10_000)
    assert s[0] < s[1] < s[2]
    np.testing.assert_allclose(s, sig, rtol=0.03)


def test_std_degenerate_sigma_near_floor():
    s = acq.score_std(GaussianStub([0.5], [1e-3]), pool(1), acq.candidate_rngs(0, 0, [0]))
    assert abs(s[0] - 1e-3) < 1e-4
    with pytest.raises(ValueError):
        acq.score_std(GaussianStub([0.5], [1.0]), pool(1), acq.candidate_rngs(0, 0, [0]), samples=1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_std_nonnegative(seed):
    rng = np.random.default_rng(seed)
    stub = GaussianStub(rng.random(5), rng.random(5) + 1e-3)
    assert np.all(acq.score_std(stub, pool(5), acq.candidate_rngs(seed, 0, range(5)), samples=20) >= 0)


def test_lc_decreases_with_sharper_peak():
    sig = [0.2, 0.1, 0.05]
    s = acq.score_lc(GaussianStub([0.5] * 3, sig), pool(3), acq.candidate_rngs(0, 0, range(3)))
    assert s[0] > s[1] > s[2]
    # the max-density sample sits close to the mode
    np.testing.assert_allclose(s, [-1 / (v * math.sqrt(2 * math.pi)) for v in sig], rtol=0.01)


def test_lc_flat_density():
    s = acq.score_lc(GaussianStub([0.5], [10.0]), pool(1), acq.candidate_rngs(0, 0, [0]))
    assert s[0] == pytest.approx(-1 / (10 * math.sqrt(2 * math.pi)), rel=1e-3)


def test_lc_identical_models_equal_over_seeds():
    a, b = GaussianStub([0.3, 0.6], [0.1, 0.2]), GaussianStub([0.3, 0.6], [0.1, 0.2])
    for seed in range(30):
        sa = acq.score_lc(a, pool(2), acq.candidate_rngs(seed, 0, range(2)))
        sb = acq.score_lc(b, pool(2), acq.candidate_rngs(seed, 0, range(2)))
        np.testing.assert_array_equal(sa, sb)


def test_entropy_monotone_in_sigma():
    s = acq.score_entropy(GaussianStub([0.5] * 3, [0.02, 0.05, 0.1]), pool(3))
    assert s[0] < s[1] < s[2]


def test_entropy_constant_surrogate_and_order_invariance():
    assert metrics.continuous_entropy(np.ones((1, 200)))[0] == 0.0
    stub = GaussianStub([0.2, 0.5, 0.7], [0.05, 0.1, 0.02])
    fwd = acq.score_entropy(stub, pool(3))
    rev = acq.score_entropy(stub, pool(3)[::-1])
    np.testing.assert_array_equal(fwd, rev[::-1])


# -- MC kernels on constructed inputs --------------------------------------


def test_bald_sigma_hand_value():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(500)
    z = (z - z.mean()) / z.std()
    assert acq.bald_sigma_from_samples(np.stack([0.1 * z, 0.3 * z])) == pytest.approx(0.2, abs=1e-12)


def test_bald_lc_hand_value_and_k2_symmetry():
    assert acq.bald_lc_from_values(np.array([-1.0, -1.5])) == pytest.approx(0.5)
    assert acq.bald_lc_from_values(np.array([-1.5, -1.0])) == pytest.approx(0.5)


def test_signed_differences_telescope():
    v = np.array([3.0, 1.0, 4.0, 1.5])
    assert acq.consecutive_diffs(v, signed=True) == pytest.approx(v[0] - v[-1])
    assert acq.consecutive_diffs(v) == pytest.approx(2 + 3 + 2.5)


def test_nflows_out_hand_value():
    # H_i = -sum log p, so log p sums of -10, -12, -11 give H = (10, 12, 11)
    logps = np.array([[-4.0, -6.0], [-5.0, -7.0], [-5.5, -5.5]])
    assert acq.nflows_out_from_logps(logps) == pytest.approx(3.0)


def test_kl_grid_hand_value():
    assert acq.balsa_kl_grid_from_grids(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(2 * math.log(2))


def test_kl_grid_normalized_matches_when_mass_is_one():
    a = np.array([0.25, 1.0, 0.75])
    b = np.array([0.75, 1.0, 0.25])
    assert metrics.trapz((a + b) / 2) == pytest.approx(1.5)
    grids = np.array([a, b]) / 1.5
    assert acq.balsa_kl_grid_from_grids(grids, normalize=True) == pytest.approx(acq.balsa_kl_grid_from_grids(grids), abs=1e-10)


def test_kl_pair_hand_value():
    A, B = [1.0, 0.0], [0.5, 0.5]
    assert acq.balsa_kl_pair_from_grids(np.array([A, A, B])) == pytest.approx(math.log(2))


def test_emd_hand_value():
    assert acq.balsa_emd_from_samples(np.array([[0.0, 1.0], [1.0, 2.0]])) == pytest.approx(1.0)


def test_bald_entropy_mixture_positive():
    grids = np.array([gauss_grid(0.3, 0.05), gauss_grid(0.7, 0.05)])
    assert acq.bald_entropy_from_grids(grids) > 0


def test_bald_entropy_only_distinct_member_matters():
    A, B = gauss_grid(0.4, 0.1), gauss_grid(0.6, 0.05)
    grids = np.array([A, A, A, B])
    mean = (3 * A + B) / 4
    H = metrics.continuous_entropy
    expected = 3 * (H(mean) - H(A)) + (H(mean) - H(B))
    assert acq.bald_entropy_from_grids(grids) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize(
    "kernel",
    [acq.bald_sigma_from_samples, acq.balsa_emd_from_samples, acq.balsa_kl_pair_from_grids, acq.balsa_kl_grid_from_grids, acq.bald_entropy_from_grids],
)
def test_kernels_require_two_samples(kernel):
    with pytest.raises(ValueError):
        kernel(np.ones((1, 3, 4)))


def test_kl_grid_nondecreasing_along_interpolation():
    A, B = gauss_grid(0.3, 0.05), gauss_grid(0.7, 0.1)
    ts = np.linspace(0, 1, 51)
    scores = [acq.balsa_kl_grid_from_grids(np.array([A, (1 - t) * A + t * B])) for t in ts]
    assert scores[0] == 0.0
    assert np.all(np.diff(scores) >= -1e-12)


def test_kl_pair_insensitive_to_mask_order():
    # iid handles: consecutive-pair KL has the same distribution under reshuffling
    model = dropout_model(0.2)
    cfg = acq.McConfig(k=40, grid=50)
    dists, _ = acq.mc_handles(model, np.zeros((1, 2)), acq.candidate_rngs(0, 0, [0]), cfg)
    grids = np.stack([d.grid_likelihoods(50)[0] for d in dists])
    rng = np.random.default_rng(0)
    first, shuffled = [], []
    for _ in range(1000):
        pick = rng.choice(40, size=10, replace=False)
        first.append(acq.balsa_kl_pair_from_grids(grids[np.sort(pick)]))
        shuffled.append(acq.balsa_kl_pair_from_grids(grids[pick]))
    assert stats.ks_2samp(first, shuffled).pvalue > 0.01


# -- model-based MC scores -------------------------------------------------


@pytest.mark.parametrize("k", [2, 10])
@pytest.mark.parametrize("name", acq.MC_SCORERS)
@pytest.mark.parametrize("family", ["flow", "gaussian"])
def test_zero_dropout_collapses_to_exactly_zero(name, family, k):
    model = dropout_model(0.0, family)
    x = np.random.default_rng(1).normal(size=(5, 2))
    s = acq.score_mc(name, model, x, acq.candidate_rngs(0, 0, range(5)), acq.McConfig(k=k, samples=30, grid=40))
    np.testing.assert_array_equal(s, 0.0)


def test_identical_handles_average_exactly():
    g = np.random.default_rng(0).random((1, 3, 50))
    for k in (3, 7, 10):
        grids = np.repeat(g, k, axis=0)
        np.testing.assert_array_equal(acq.balsa_kl_grid_from_grids(grids), 0.0)
        np.testing.assert_array_equal(acq.bald_entropy_from_grids(grids), 0.0)


def test_mean_only_normalization_leaves_log_mass_offset():
    # rescaling only the mean leaves k * sum_j p_j ln trapz(p) for identical handles
    g = gauss_grid(0.5, 0.1)
    grids = np.stack([g] * 4)
    offset = acq.balsa_kl_grid_from_grids(grids, normalize=True, mean_only=True)
    assert offset == pytest.approx(4 * g.sum() * np.log(metrics.trapz(g)), rel=1e-12)
    assert acq.balsa_kl_grid_from_grids(grids, normalize=True) == 0.0


def test_normalized_kl_grid_is_kl_of_densities():
    A, B = gauss_grid(0.4, 0.1) * 3.0, gauss_grid(0.6, 0.1) * 0.5
    a, b = A / metrics.trapz(A), B / metrics.trapz(B)
    m = (A + B) / 2
    m = m / metrics.trapz(m)
    expected = metrics.discrete_kl(a, m) + metrics.discrete_kl(b, m)
    assert acq.balsa_kl_grid_from_grids(np.array([A, B]), normalize=True) == pytest.approx(expected, rel=1e-12)


def test_normalized_kl_grid_tolerates_all_zero_grids():
    # densities that miss [0, 1] underflow to zeros on the grid
    zeros = np.zeros((3, 2, 200))
    assert np.array_equal(acq.balsa_kl_grid_from_grids(zeros, normalize=True), [0.0, 0.0])
    mixed = zeros.copy()
    mixed[0, 1] = gauss_grid(0.5, 0.1)
    assert np.isfinite(acq.balsa_kl_grid_from_grids(mixed, normalize=True)).all()


@pytest.mark.parametrize("name", acq.MC_SCORERS)
def test_mc_scores_finite_and_positive_with_dropout(name):
    model = dropout_model(0.2)
    x = np.random.default_rng(2).normal(size=(6, 2))
    s = acq.score_pool(name, model, x, acq.candidate_rngs(0, 0, range(6)), acq.McConfig(k=5, samples=40, grid=40))
    assert np.all(np.isfinite(s))
    assert np.all(s > 0)


def test_mc_rate_override():
    model = dropout_model(0.0)
    x = np.zeros((2, 2))
    cfg = acq.McConfig(k=3, samples=20, grid=30, rate=0.3)
    assert np.all(acq.score_mc("balsa_kl_pair", model, x, acq.candidate_rngs(0, 0, range(2)), cfg) > 0)


@pytest.mark.parametrize("name", ["std", "entropy", "balsa_kl_pair", "balsa_emd"])
def test_scores_independent_of_pool_order_and_chunking(name):
    model = dropout_model(0.1)
    n = acq._CHUNK + 40
    x = np.random.default_rng(3).normal(size=(n, 2))
    ids = np.arange(n) + 1000
    cfg = acq.McConfig(k=3, samples=20, grid=30)
    full = acq.score_pool(name, model, x, acq.candidate_rngs(7, 2, ids), cfg)
    perm = np.random.default_rng(4).permutation(n)[:50]
    part = acq.score_pool(name, model, x[perm], acq.candidate_rngs(7, 2, ids[perm]), cfg)
    np.testing.assert_allclose(part, full[perm], rtol=1e-12, atol=1e-14)


def test_scores_change_with_round():
    model = dropout_model(0.1)
    x = np.zeros((1, 2))
    cfg = acq.McConfig(k=3, samples=20, grid=30)
    a = acq.score_mc("balsa_kl_pair", model, x, acq.candidate_rngs(0, 0, [5]), cfg)
    b = acq.score_mc("balsa_kl_pair", model, x, acq.candidate_rngs(0, 1, [5]), cfg)
    assert a[0] != b[0]


def test_mc_config_validation():
    for kwargs in ({"k": 1}, {"samples": 1}, {"grid": 1}):
        with pytest.raises(ValueError):
            acq.McConfig(**kwargs)


# -- selection -------------------------------------------------------------


def test_top_tau_examples():
    assert acq.select_top_tau([3, 1, 2], 1).tolist() == [0]
    assert sorted(acq.select_top_tau([1, 1, 1], 2).tolist()) == [0, 1]
    assert sorted(acq.select_top_tau([4, 2, 9], 3).tolist()) == [0, 1, 2]
    with pytest.raises(ValueError):
        acq.select_top_tau([1, 2], 3)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(-5, 5), min_size=1, max_size=30),
    st.floats(0.01, 100),
    st.floats(-100, 100),
    st.data(),
)
def test_top_tau_affine_invariant(scores, a, b, data):
    tau = data.draw(st.integers(1, len(scores)))
    s = np.array(scores, dtype=float)
    np.testing.assert_array_equal(acq.select_top_tau(s, tau), acq.select_top_tau(a * s + b, tau))
    # oracle: sort by (-score, index)
    expected = sorted(range(len(s)), key=lambda i: (-s[i], i))[:tau]
    assert acq.select_top_tau(s, tau).tolist() == expected


def test_random_select_examples():
    assert sorted(acq.random_select(5, 5, np.random.default_rng(0)).tolist()) == list(range(5))
    a = acq.random_select(100, 7, np.random.default_rng(3))
    b = acq.random_select(100, 7, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    assert len(set(a.tolist())) == 7
    with pytest.raises(ValueError):
        acq.random_select(3, 4, np.random.default_rng(0))


def test_random_select_uniform_frequency():
    rng = np.random.default_rng(0)
    n, draws = 10, 10_000
    counts = np.bincount([acq.random_select(n, 1, rng)[0] for _ in range(draws)], minlength=n)
    sd = math.sqrt(draws * (1 / n) * (1 - 1 / n))
    assert np.all(np.abs(counts - draws / n) <= 3 * sd)


def test_coreset_hand_example():
    U = np.array([[1.0, 0], [5, 0], [6, 0]])
    assert acq.coreset_select(np.array([[0.0, 0]]), U, 1).tolist() == [2]
    # (1,0) and (5,0) tie at distance 1; lowest index wins
    assert acq.coreset_select(np.array([[0.0, 0]]), U, 2).tolist() == [2, 0]
    assert acq.coreset_select(np.zeros((1, 2)), np.array([[3.0, 4.0]]), 1).tolist() == [0]


def covering_radius(points, centers):
    return cdist(points, centers).min(axis=1).max()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_coreset_within_twice_optimal_k_center(seed, tau):
    rng = np.random.default_rng(seed)
    L, U = rng.normal(size=(1, 2)), rng.normal(size=(7, 2))
    pick = acq.coreset_select(L, U, tau)
    everything = np.concatenate([L, U])
    greedy = covering_radius(everything, np.concatenate([L, U[pick]]))
    best = min(covering_radius(everything, np.concatenate([L, U[list(c)]])) for c in itertools.combinations(range(7), tau))
    assert greedy <= 2 * best + 1e-12
    assert len(set(pick.tolist())) == tau


def test_coreset_single_pick_is_farthest_point():
    rng = np.random.default_rng(5)
    L, U = rng.normal(size=(20, 4)), rng.normal(size=(1000, 4))
    expected = int(np.argmax(np.array([min(np.linalg.norm(u - l) for l in L) for u in U])))
    assert acq.coreset_select(L, U, 1).tolist() == [expected]


def test_coreset_empty_pool():
    with pytest.raises(ValueError):
        acq.coreset_select(np.zeros((1, 2)), np.zeros((0, 2)), 1)


def test_typiclust_picks_from_unlabeled_blob():
    rng = np.random.default_rng(0)
    A = rng.normal(0, 0.1, (30, 2))
    B = rng.normal(10, 0.1, (30, 2))
    U = np.concatenate([A[1:], B])
    pick = acq.typiclust_select(A[:1], U, 1)
    assert pick[0] >= len(A) - 1


def test_typiclust_single_cluster_picks_densest_point():
    rng = np.random.default_rng(1)
    U = rng.normal(size=(40, 2))
    d = cdist(U, U)
    mean_knn = np.array([np.sort(np.delete(d[i], i))[:20].mean() for i in range(40)])
    assert acq.typiclust_select(np.zeros((0, 2)), U, 1).tolist() == [int(np.argmin(mean_knn))]


def test_typiclust_identical_points_deterministic():
    U = np.ones((6, 2))
    a = acq.typiclust_select(np.zeros((0, 2)), U, 1)
    b = acq.typiclust_select(np.zeros((0, 2)), U, 1)
    np.testing.assert_array_equal(a, b)
    assert a.tolist() == [0]


def test_typiclust_returns_distinct_picks_when_clusters_run_out():
    rng = np.random.default_rng(2)
    U = rng.normal(size=(12, 2))
    L = U[:4] + 1e-3
    pick = acq.typiclust_select(L, U, 8)
    assert len(pick) == 8 and len(set(pick.tolist())) == 8


def test_typicality_caps_neighbors():
    pts = np.array([[0.0], [1.0], [3.0]])
    np.testing.assert_allclose(acq.typicality(pts), 1 / np.array([2.0, 1.5, 2.5]))


def test_acquire_dispatch():
    model = dropout_model(0.1)
    rng = np.random.default_rng(0)
    xu, xl = rng.normal(size=(20, 2)), rng.normal(size=(5, 2))
    cfg = acq.McConfig(k=3, samples=20, grid=30)
    for name in acq.ACQUISITIONS:
        pick = acq.acquire(name, model, xu, xl, 3, cfg, seed=0, round_idx=0, candidate_ids=np.arange(20), rng=np.random.default_rng(1))
        assert len(pick) == 3 and len(set(np.asarray(pick).tolist())) == 3
    with pytest.raises(ValueError, match="unknown acquisition"):
        acq.acquire("nope", model, xu, xl, 1, cfg, 0, 0, np.arange(20), rng)
