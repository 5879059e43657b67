"""Fast property and oracle checks runnable from the command line."""

from __future__ import annotations

import itertools
import math
import time
import traceback

import numpy as np
from scipy.stats import rankdata

from . import acquisition as acq
from . import autodiff as ad
from . import metrics, reporting, spline
from .models import EncoderConfig, GaussianDistribution, ModelConfig, build_model, mc_distributions, nll_loss

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def _tiny_config(family, rate=0.0):
    return ModelConfig(
        family=family,
        encoder=EncoderConfig(widths=[6, 5], dropout_train=rate, dropout_eval=rate),
        decoder_widths=[7],
        n_transforms=2,
    )


def check_gradients(rng):
    worst = 0.0
    for family in ("gaussian", "flow"):
        model = build_model(2, _tiny_config(family), seed=int(rng.integers(1000)))
        # perturb the zero output layer so the flow is not the identity
        for p in model.params():
            p.data += 0.3 * rng.standard_normal(p.shape)
        x, y = rng.standard_normal((5, 2)), rng.random(5)

        def loss():
            return nll_loss(model, x, y, mode="eval")

        for p in model.params():
            p.grad = None
        loss().backward()
        for p in model.params():
            idx = rng.choice(p.data.size, size=min(4, p.data.size), replace=False)
            with ad.no_grad():
                num = ad.numerical_grad(lambda: loss().data, p, indices=idx)
            a, n = p.grad.reshape(-1)[idx], num.reshape(-1)[idx]
            worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1e-6, np.abs(n) + np.abs(a)))))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_flow(rng):
    n, K = 1000, spline.DEFAULT_BINS
    params = [rng.standard_normal((n, K)), rng.standard_normal((n, K)), rng.standard_normal((n, K - 1))]
    x = rng.uniform(-5, 5, (n, 1))
    with ad.no_grad():
        y, _ = spline.rq_forward(x, *params)
    back, _ = spline.rq_inverse(y.data, *params)
    err = float(np.abs(back - x).max())
    model = build_model(1, _tiny_config("flow"), seed=0)
    lp = float(model.distribution(np.zeros((1, 1))).log_prob(np.zeros(1))[0])
    ok = err < 1e-5 and abs(lp + HALF_LOG_2PI) < 1e-9
    return ok, f"round trip {err:.1e}, identity log_prob offset {abs(lp + HALF_LOG_2PI):.1e}"


def check_metrics(rng):
    ok = abs(metrics.discrete_kl([0.5, 0.5], [0.5, 0.5])) < 1e-12
    ok &= abs(metrics.emd_1d([0, 1, 2], [1, 2, 3]) - 1.0) < 1e-12
    ok &= abs(metrics.trapz([1.0, 1.0, 1.0]) - 2.0) < 1e-12
    # sample CRPS vs closed form for a standard normal
    draws = rng.standard_normal((1, 4000))
    est = metrics.crps_samples(np.zeros(1), draws)[0]
    exact = metrics.crps_gaussian(np.zeros(1), np.zeros(1), np.ones(1))[0]
    ok &= abs(est - exact) < 0.02
    return bool(ok), f"sample CRPS {est:.4f} vs closed form {exact:.4f}"


def check_kl_identity(rng):
    worst = 0.0
    for _ in range(200):
        p, q = rng.random(20), rng.random(20)
        r = metrics.discrete_kl(p, q) + metrics.self_entropy(p) - metrics.cross_entropy(p, q)
        worst = max(worst, abs(r))
    return worst < 1e-10, f"max residual {worst:.1e}"


def check_zero_collapse(rng):
    model = build_model(1, _tiny_config("flow"), seed=3)
    for p in model.params():
        p.data += 0.2 * rng.standard_normal(p.shape)
    x = rng.random((6, 1))
    cfg = acq.McConfig(k=10, samples=20, grid=50, rate=0.0)
    worst = 0.0
    for name in acq.MC_SCORERS:
        score = acq.score_mc(name, model, x, acq.candidate_rngs(0, 0, np.arange(6)), cfg)
        worst = max(worst, float(np.abs(score).max()))
    return worst == 0.0, f"max |score| {worst:g} over {len(acq.MC_SCORERS)} scorers"


def check_grid(rng):
    model = build_model(1, _tiny_config("gaussian"), seed=0)
    dists = mc_distributions(model, rng.random((3, 1)), k=2, rng=rng, rate=0.0)
    length = dists[0].grid_likelihoods().shape[1]
    d = GaussianDistribution(np.array([0.4, 0.5, 0.6]), np.array([0.1, 0.05, 0.02]))
    mass = metrics.trapz_physical(d.grid_likelihoods())
    ok = length == 200 and np.all(np.abs(mass - 1) < 1e-3)
    return bool(ok), f"grid length {length}, masses {np.round(mass, 5).tolist()}"


def check_wilcoxon(rng):
    worst = 0.0
    for n in range(1, 11):
        a, b = rng.integers(0, 4, n).astype(float), rng.integers(0, 4, n).astype(float)
        _, p = reporting.wilcoxon_signed_rank(a, b) if np.any(a != b) else (0, 1.0)
        d = (a - b)[a != b]
        if len(d) == 0:
            continue
        r = rankdata(np.abs(d))
        w = r[d > 0].sum()
        sums = np.array([r[np.array(s, bool)].sum() for s in itertools.product((0, 1), repeat=len(d))])
        oracle = min(1.0, 2 * min(np.mean(sums <= w + 1e-9), np.mean(sums >= w - 1e-9)))
        worst = max(worst, abs(p - oracle))
    holm = reporting.holm_correct([0.01, 0.04]) == [True, True]
    return worst < 1e-12 and holm, f"max p-value error {worst:.1e}"


CHECKS = (
    ("autodiff gradients", check_gradients),
    ("flow round trip and identity", check_flow),
    ("distribution metrics", check_metrics),
    ("KL / entropy identity", check_kl_identity),
    ("zero-dropout score collapse", check_zero_collapse),
    ("grid likelihood contract", check_grid),
    ("Wilcoxon and Holm", check_wilcoxon),
)


def run(out=print, seed=0):
    """Run every check; returns True when all pass."""
    rng = np.random.default_rng(seed)
    all_ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception:  # report and continue with the next check
            ok, detail = False, traceback.format_exc(limit=3).strip().splitlines()[-1]
        all_ok &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    return all_ok
