"""Acquisition functions: heuristics, BALD adaptations, BALSA variants and
geometric selectors.

Scores are "higher = more informative". Model-based scorers work on a batch
of candidate rows; each row draws its dropout masks and base noise from its
own generator (see :func:`candidate_rngs`), so scores do not depend on how
the pool is chunked or ordered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans

from . import metrics
from .models import mc_distributions

HEURISTICS = ("std", "lc", "entropy")
MC_SCORERS = (
    "bald_sigma",
    "bald_lc",
    "bald_entropy",
    "nflows_out",
    "balsa_kl_grid",
    "balsa_kl_grid_norm",
    "balsa_kl_pair",
    "balsa_emd",
)
GEOMETRIC = ("random", "coreset", "typiclust")
ACQUISITIONS = GEOMETRIC + HEURISTICS + MC_SCORERS

_CHUNK = 256


@dataclass
class McConfig:
    k: int = 10
    samples: int = 200
    grid: int = 200
    rate: float | None = None  # MC dropout rate; None = model's eval rate
    shared_noise: bool = True  # same base normals for all k handles of a row
    signed: bool = False  # literal (telescoping) differences for the *_sigma/*_lc scores

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2 for MC scoring")
        if self.samples < 2:
            raise ValueError("need at least 2 samples per distribution")
        if self.grid < 2:
            raise ValueError("grid resolution must be >= 2")


def candidate_rngs(seed, round_idx, candidate_ids):
    """One generator per candidate keyed by (seed, round, candidate id)."""
    return [np.random.default_rng([int(seed), int(round_idx), int(c)]) for c in candidate_ids]


# ---------------------------------------------------------------------------
# pure kernels over stacked MC quantities: leading axis k, then candidates
# ---------------------------------------------------------------------------


def consecutive_diffs(values, signed=False):
    """sum_{i<k} |v_i - v_{i+1}| along axis 0 (signed sum if ``signed``)."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] < 2:
        raise ValueError("need at least 2 parameter samples")
    d = v[:-1] - v[1:]
    return d.sum(axis=0) if signed else np.abs(d).sum(axis=0)


def bald_sigma_from_samples(samples, signed=False):
    return consecutive_diffs(np.std(samples, axis=-1), signed)


def bald_lc_from_values(lc_values, signed=False):
    return consecutive_diffs(lc_values, signed)


def nflows_out_from_logps(logps):
    """logps: (k, ..., m) log-densities of each handle's own samples."""
    h = -np.asarray(logps).sum(axis=-1)
    return consecutive_diffs(h)


def _handle_mean(g):
    # anchored on the first handle so k identical vectors average to exactly that vector
    return g[0] + (g - g[0]).mean(axis=0)


def _unit_mass(v):
    # a density that misses [0, 1] entirely underflows to all zeros; those
    # rows are left alone rather than divided by zero
    mass = np.asarray(metrics.trapz(v))[..., None]
    return np.divide(v, mass, out=np.array(v, dtype=np.float64), where=mass > 0)


def bald_entropy_from_grids(grids):
    g = np.asarray(grids, dtype=np.float64)
    if g.shape[0] < 2:
        raise ValueError("need at least 2 parameter samples")
    h_mean = metrics.continuous_entropy(_handle_mean(g))
    return (h_mean[None] - metrics.continuous_entropy(g)).sum(axis=0)


def balsa_kl_grid_from_grids(grids, normalize=False, mean_only=False):
    """sum_i KL(p_i, mean) over the k grid vectors.

    ``normalize`` rescales to unit trapz mass before the KL. By default both
    arguments are rescaled, so identical handles still score exactly 0;
    ``mean_only`` rescales just the averaged vector.
    """
    g = np.asarray(grids, dtype=np.float64)
    if g.shape[0] < 2:
        raise ValueError("need at least 2 parameter samples")
    mean = _handle_mean(g)
    if normalize:
        mean = _unit_mass(mean)
        if not mean_only:
            g = _unit_mass(g)
    return metrics.discrete_kl(g, mean[None]).sum(axis=0)


def balsa_kl_pair_from_grids(grids):
    g = np.asarray(grids, dtype=np.float64)
    if g.shape[0] < 2:
        raise ValueError("need at least 2 parameter samples")
    return metrics.discrete_kl(g[:-1], g[1:]).sum(axis=0)


def balsa_emd_from_samples(samples):
    s = np.asarray(samples, dtype=np.float64)
    if s.shape[0] < 2:
        raise ValueError("need at least 2 parameter samples")
    return metrics.emd_1d(s[:-1], s[1:]).sum(axis=0)


# ---------------------------------------------------------------------------
# model-based scorers
# ---------------------------------------------------------------------------


def _row_noise(rngs, m):
    return np.stack([g.standard_normal(m) for g in rngs])


def score_std(model, x, rngs, samples=200):
    if samples < 2:
        raise ValueError("std needs at least 2 samples")
    dist = model.distribution(x, "eval")
    return np.std(dist.sample(samples, noise=_row_noise(rngs, samples)), axis=1)


def _least_confidence(dist, noise):
    ys = dist.sample(noise.shape[-1], noise=noise)
    return -dist.prob(ys).max(axis=1)


def score_lc(model, x, rngs, samples=200):
    if samples < 1:
        raise ValueError("lc needs at least 1 sample")
    dist = model.distribution(x, "eval")
    return _least_confidence(dist, _row_noise(rngs, samples))


def score_entropy(model, x, rngs=None, grid=200):
    dist = model.distribution(x, "eval")
    return metrics.continuous_entropy(dist.grid_likelihoods(grid))


def _mc_draws(model, rngs, cfg: McConfig, rate):
    """Per-row masks (list over layers of (k, N, w)) and base noise."""
    widths = model.config.encoder.widths
    total = sum(widths)
    bounds = np.cumsum([0] + list(widths))
    blocks, noise = [], []
    for g in rngs:
        blocks.append(g.random((cfg.k, total)) >= rate)
        shape = (cfg.samples,) if cfg.shared_noise else (cfg.k, cfg.samples)
        noise.append(g.standard_normal(shape))
    block = np.stack(blocks, axis=1)  # (k, N, total)
    masks = [block[..., bounds[i] : bounds[i + 1]] for i in range(len(widths))]
    noise = np.stack(noise, axis=0) if cfg.shared_noise else np.stack(noise, axis=1)
    return masks, noise


def mc_handles(model, x, rngs, cfg: McConfig):
    rate = model.config.encoder.dropout_eval if cfg.rate is None else cfg.rate
    masks, noise = _mc_draws(model, rngs, cfg, rate)
    dists = mc_distributions(model, x, cfg.k, masks=masks, rate=rate)
    return dists, noise


def _handle_noise(noise, i, shared):
    return noise if shared else noise[i]


def _mc_samples(dists, noise, cfg):
    return np.stack(
        [d.sample(cfg.samples, noise=_handle_noise(noise, i, cfg.shared_noise)) for i, d in enumerate(dists)]
    )


def score_mc(name, model, x, rngs, cfg: McConfig):
    """Score rows of ``x`` with one of the MC-dropout acquisition functions."""
    dists, noise = mc_handles(model, x, rngs, cfg)
    if name == "bald_sigma":
        return bald_sigma_from_samples(_mc_samples(dists, noise, cfg), cfg.signed)
    if name == "bald_lc":
        lc = np.stack(
            [_least_confidence(d, _handle_noise(noise, i, cfg.shared_noise)) for i, d in enumerate(dists)]
        )
        return bald_lc_from_values(lc, cfg.signed)
    if name == "nflows_out":
        samples = _mc_samples(dists, noise, cfg)
        logps = np.stack([d.log_prob(s) for d, s in zip(dists, samples)])
        return nflows_out_from_logps(logps)
    if name == "balsa_emd":
        return balsa_emd_from_samples(_mc_samples(dists, noise, cfg))
    grids = np.stack([d.grid_likelihoods(cfg.grid) for d in dists])
    if name == "bald_entropy":
        return bald_entropy_from_grids(grids)
    if name == "balsa_kl_grid":
        return balsa_kl_grid_from_grids(grids)
    if name == "balsa_kl_grid_norm":
        return balsa_kl_grid_from_grids(grids, normalize=True)
    if name == "balsa_kl_pair":
        return balsa_kl_pair_from_grids(grids)
    raise ValueError(f"unknown MC acquisition {name!r}")


def score_pool(name, model, x, rngs, cfg: McConfig):
    """Scores for every row of ``x``, processed in chunks."""
    out = np.empty(len(x))
    for s in range(0, len(x), _CHUNK):
        sl = slice(s, s + _CHUNK)
        xs, rs = x[sl], rngs[sl]
        if name == "std":
            out[sl] = score_std(model, xs, rs, cfg.samples)
        elif name == "lc":
            out[sl] = score_lc(model, xs, rs, cfg.samples)
        elif name == "entropy":
            out[sl] = score_entropy(model, xs, rs, cfg.grid)
        elif name in MC_SCORERS:
            out[sl] = score_mc(name, model, xs, rs, cfg)
        else:
            raise ValueError(f"{name!r} is not a scoring acquisition")
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise FloatingPointError(f"{name}: non-finite score for candidate {bad}")
    return out


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------


def select_top_tau(scores, tau):
    """Positions of the ``tau`` largest scores; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if tau > len(scores):
        raise ValueError(f"tau={tau} exceeds pool size {len(scores)}")
    return np.argsort(-scores, kind="stable")[:tau]


def random_select(n_pool, tau, rng):
    if tau > n_pool:
        raise ValueError(f"tau={tau} exceeds pool size {n_pool}")
    return rng.choice(n_pool, size=tau, replace=False)


def coreset_select(latents_l, latents_u, tau):
    """Greedy k-center in latent space."""
    latents_u = np.asarray(latents_u, dtype=np.float64)
    if len(latents_u) == 0:
        raise ValueError("empty unlabeled pool")
    if tau > len(latents_u):
        raise ValueError(f"tau={tau} exceeds pool size {len(latents_u)}")
    latents_l = np.asarray(latents_l, dtype=np.float64).reshape(-1, latents_u.shape[1])
    if len(latents_l):
        min_dist = cdist(latents_u, latents_l).min(axis=1)
    else:
        min_dist = np.full(len(latents_u), np.inf)
    chosen = []
    for _ in range(tau):
        j = int(np.argmax(min_dist))
        chosen.append(j)
        min_dist = np.minimum(min_dist, cdist(latents_u, latents_u[j : j + 1])[:, 0])
        min_dist[chosen] = -np.inf
    return np.array(chosen, dtype=int)


def typicality(points, k_neighbors=20):
    """Inverse mean distance to the K nearest other points (K capped by size)."""
    n = len(points)
    if n == 1:
        return np.ones(1)
    k = min(k_neighbors, n - 1)
    d = cdist(points, points)
    np.fill_diagonal(d, np.inf)
    knn = np.sort(d, axis=1)[:, :k]
    return 1.0 / (knn.mean(axis=1) + 1e-12)


def typiclust_select(latents_l, latents_u, tau, seed=0, k_neighbors=20):
    """Cluster-and-pick-typical selection.

    All latents are clustered into |L| + tau groups with k-means. Clusters
    without labeled points are visited by unlabeled count (descending) and
    each yields its most typical unlabeled point. If that runs out, the
    remaining picks take the next most typical points of clusters already
    used, again in cluster order.
    """
    latents_u = np.asarray(latents_u, dtype=np.float64)
    if len(latents_u) == 0:
        raise ValueError("empty unlabeled pool")
    if tau > len(latents_u):
        raise ValueError(f"tau={tau} exceeds pool size {len(latents_u)}")
    latents_l = np.asarray(latents_l, dtype=np.float64).reshape(-1, latents_u.shape[1])
    n_l = len(latents_l)
    points = np.concatenate([latents_l, latents_u]) if n_l else latents_u
    n_clusters = min(n_l + tau, len(points))
    if n_clusters > 1:
        labels = KMeans(n_clusters=n_clusters, n_init=1, random_state=seed).fit(points).labels_
    else:
        labels = np.zeros(len(points), dtype=int)
    lab_l, lab_u = labels[:n_l], labels[n_l:]
    has_labeled = set(lab_l.tolist())

    ranked = {}
    for c in np.unique(lab_u):
        members = np.flatnonzero(lab_u == c)
        typ = typicality(points[labels == c], k_neighbors)
        # typicality of the unlabeled members, computed within the full cluster
        typ_u = typ[np.flatnonzero(labels == c) >= n_l]
        order = np.lexsort((members, -typ_u))
        ranked[c] = list(members[order])
    clusters = sorted(ranked, key=lambda c: (-len(ranked[c]), c))

    chosen = []
    for c in clusters:
        if len(chosen) == tau:
            break
        if c in has_labeled:
            continue
        chosen.append(ranked[c].pop(0))
    while len(chosen) < tau:
        progressed = False
        for c in clusters:
            if len(chosen) == tau:
                break
            if ranked[c]:
                chosen.append(ranked[c].pop(0))
                progressed = True
        if not progressed:
            break
    return np.array(chosen, dtype=int)


def acquire(name, model, x_unlabeled, x_labeled, tau, cfg: McConfig, seed, round_idx, candidate_ids, rng):
    """Pick ``tau`` positions (into ``x_unlabeled``) to label next."""
    if name not in ACQUISITIONS:
        raise ValueError(f"unknown acquisition {name!r}; choose from {', '.join(ACQUISITIONS)}")
    if name == "random":
        return random_select(len(x_unlabeled), tau, rng)
    if name == "coreset":
        return coreset_select(model.latent(x_labeled), model.latent(x_unlabeled), tau)
    if name == "typiclust":
        return typiclust_select(model.latent(x_labeled), model.latent(x_unlabeled), tau, seed=int(rng.integers(2**31)))
    rngs = candidate_rngs(seed, round_idx, candidate_ids)
    scores = score_pool(name, model, np.asarray(x_unlabeled), rngs, cfg)
    return select_top_tau(scores, tau)
