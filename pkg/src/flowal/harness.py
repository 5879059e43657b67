"""Pool-based active learning loop: pools, training, evaluation, trajectories."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import metrics
from .acquisition import McConfig, acquire
from .config import ExperimentConfig
from .models import (
    EncoderConfig,
    GaussianDistribution,
    ModelConfig,
    ModelStateError,
    build_model,
    nll_loss,
)

log = logging.getLogger(__name__)

CSV_HEADER = ("round", "labeled_size", "nll", "mae", "crps", "seconds")

# stream ids for derived generators
_POOL, _INIT, _SHUFFLE, _DROP, _EVAL, _ACQ = range(6)


def derived_rng(seed, *keys):
    return np.random.default_rng([int(seed), *map(int, keys)])


class PoolError(RuntimeError):
    pass


@dataclass
class PoolState:
    labeled: list[int]
    unlabeled: list[int]
    round: int = 0
    history: dict[int, list[int]] = field(default_factory=dict)

    @property
    def n_total(self):
        return len(self.labeled) + len(self.unlabeled)

    def check(self, n_total):
        lab, unl = set(self.labeled), set(self.unlabeled)
        if len(lab) != len(self.labeled) or len(unl) != len(self.unlabeled):
            raise PoolError("duplicate indices in a pool")
        if lab & unl:
            raise PoolError("labeled and unlabeled pools overlap")
        if lab | unl != set(range(n_total)):
            raise PoolError("pools no longer cover the training set")


def init_pools(n_train, seed_size, rng):
    if seed_size > n_train:
        raise PoolError(f"seed set of {seed_size} exceeds {n_train} training points")
    perm = rng.permutation(n_train)
    labeled = sorted(int(i) for i in perm[:seed_size])
    unlabeled = sorted(int(i) for i in perm[seed_size:])
    return PoolState(labeled, unlabeled)


def run_round(state: PoolState, positions):
    """Move ``positions`` (indices into ``state.unlabeled``) to the labeled pool."""
    if not state.unlabeled:
        raise PoolError("unlabeled pool is empty")
    positions = [int(p) for p in positions]
    if len(set(positions)) != len(positions):
        raise PoolError("acquisition returned duplicate positions")
    picked = [state.unlabeled[p] for p in positions]
    keep = set(positions)
    state.unlabeled = [u for j, u in enumerate(state.unlabeled) if j not in keep]
    state.labeled = state.labeled + picked
    state.history[state.round] = picked
    state.round += 1
    return state


def model_config(cfg: ExperimentConfig):
    a = cfg.arch
    return ModelConfig(
        family=cfg.model,
        encoder=EncoderConfig(widths=list(a.encoder), dropout_train=cfg.train_dropout, dropout_eval=cfg.eval_dropout),
        decoder_widths=list(a.decoder),
        n_transforms=a.n_transforms,
        bins=a.bins,
        bound=a.bound,
        sigma_floor=a.sigma_floor,
    )


def _mean_nll(model, x, y, chunk=4096):
    total = 0.0
    with ad.no_grad():
        for s in range(0, len(x), chunk):
            total -= model.log_prob(x[s : s + chunk], y[s : s + chunk], "eval").data.sum()
    return total / len(x)


def _fit(model, x, y, x_val, y_val, tc, lr, seed, round_idx):
    opt = ad.NAdam(model.params(), lr=lr, weight_decay=tc.weight_decay)
    shuffle = derived_rng(seed, _SHUFFLE, round_idx)
    drop = derived_rng(seed, _DROP, round_idx)
    best, best_state, stale = np.inf, model.state(), 0
    n = len(x)
    for _epoch in range(tc.max_epochs):
        order = shuffle.permutation(n)
        for s in range(0, n, tc.batch_size):
            b = order[s : s + tc.batch_size]
            opt.zero_grad()
            loss = nll_loss(model, x[b], y[b], mode="train", rng=drop)
            loss.backward()
            opt.step()
        val = _mean_nll(model, x_val, y_val)
        if not np.isfinite(val):
            raise ModelStateError("non-finite validation NLL")
        if val < best - 1e-12:
            best, best_state, stale = val, model.state(), 0
        else:
            stale += 1
            if stale >= tc.patience:
                break
    model.load_state(best_state)
    return model, best


def train_model(cfg: ExperimentConfig, x, y, x_val, y_val, round_idx=0):
    """Fresh model fitted with NAdam on NLL, early-stopped on validation NLL.

    On divergence the fit is retried once with a tenth of the learning rate.
    """
    if len(x) == 0:
        raise ValueError("cannot train on an empty labeled pool")
    mcfg = model_config(cfg)
    lr = cfg.train.lr
    for attempt in range(2):
        init_seed = int(derived_rng(cfg.seed, _INIT, round_idx).integers(2**31))
        model = build_model(x.shape[1], mcfg, seed=init_seed)
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                model, _ = _fit(model, x, y, x_val, y_val, cfg.train, lr, cfg.seed, round_idx)
            return model
        except (ModelStateError, ad.GradientError, FloatingPointError) as e:
            if attempt:
                raise ModelStateError(f"training diverged twice (last lr={lr}): {e}") from e
            log.warning("round %d: training diverged (%s); retrying with lr=%g", round_idx, e, lr / 10)
            lr /= 10
    raise AssertionError("unreachable")


def evaluate(model, x, y, rng, samples=200):
    """Test NLL, MAE (vs predictive mean) and CRPS on normalized targets."""
    if len(x) == 0:
        raise ValueError("empty test set")
    dist = model.distribution(x, "eval")
    lp = dist.log_prob(y)
    if isinstance(dist, GaussianDistribution):
        point = dist.mu
        crps = metrics.crps_gaussian(y, dist.mu, dist.sigma)
    else:
        draws = dist.sample(samples, rng=rng)
        point = draws.mean(axis=1)
        crps = metrics.crps_samples(y, draws)
    out = {"nll": -lp, "mae": np.abs(point - y), "crps": crps}
    for k, v in out.items():
        bad = np.flatnonzero(~np.isfinite(v))
        if len(bad):
            raise ModelStateError(f"non-finite {k} at test index {int(bad[0])}")
    return {k: float(v.mean()) for k, v in out.items()}


@dataclass
class Trajectory:
    rows: list[dict]
    metadata: dict

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r["round"], r["labeled_size"]] + [_fmt(r[k]) for k in ("nll", "mae", "crps", "seconds")])
        return buf.getvalue()

    def write(self, out_dir, stem):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.csv").write_text(self.to_csv())
        (out_dir / f"{stem}.json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True) + "\n")


def _fmt(v):
    return "nan" if v is None or not np.isfinite(v) else repr(float(v))


def read_trajectory(csv_path):
    csv_path = Path(csv_path)
    with csv_path.open() as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{csv_path}: unexpected header {reader.fieldnames}")
        rows = [
            {
                "round": int(r["round"]),
                "labeled_size": int(r["labeled_size"]),
                **{k: float(r[k]) for k in ("nll", "mae", "crps", "seconds")},
            }
            for r in reader
        ]
    meta_path = csv_path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Trajectory(rows, meta)


def load_dataset(spec, base_dir=None):
    if spec.name in data_mod.SYNTHETIC_KINDS and spec.path is None and spec.manifest is None:
        return data_mod.make_synthetic(
            spec.name, spec.n, noise=spec.noise, rng=np.random.default_rng(spec.data_seed), n_features=spec.n_features
        )
    base = Path(base_dir) if base_dir else Path.cwd()
    if spec.manifest:
        m = Path(spec.manifest)
        manifest = data_mod.load_manifest(m if m.is_absolute() else base / m)
        return data_mod.load_from_manifest(manifest, spec.name)
    if spec.path:
        p = Path(spec.path)
        return data_mod.load_csv(p if p.is_absolute() else base / p, spec.target, spec.categorical, spec.drop, spec.name)
    raise ValueError(f"dataset {spec.name!r}: not synthetic and no path/manifest given")


def run_experiment(cfg: ExperimentConfig, out_dir=None, record_time=False, base_dir=None, progress=None):
    """Seed set -> [train, evaluate, acquire]* -> final train + evaluate.

    Returns the :class:`Trajectory`. With ``out_dir`` the CSV and metadata
    are rewritten after every round, so a failure leaves the partial run.
    """
    dataset = load_dataset(cfg.dataset, base_dir)
    sd = data_mod.prepare(dataset, cfg.split, cfg.split_seed)
    n_train = len(sd.y_train)
    if cfg.seed_set + cfg.budget > n_train:
        raise ValueError(f"seed set + budget ({cfg.seed_set}+{cfg.budget}) exceeds {n_train} training points")

    state = init_pools(n_train, cfg.seed_set, derived_rng(cfg.seed, _POOL))
    mc = McConfig(
        k=cfg.mc.k,
        samples=cfg.mc.samples,
        grid=cfg.mc.grid,
        rate=cfg.eval_dropout if cfg.uses_mc else None,
        shared_noise=cfg.mc.shared_noise,
        signed=cfg.mc.signed,
    )
    meta = {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "algorithm": cfg.algorithm,
        "dataset": cfg.dataset.name,
        "model": cfg.model,
        "n_train": n_train,
        "dataset_digest": dataset.digest(),
        "status": "running",
    }
    traj = Trajectory([], meta)
    stem = f"seed_{cfg.seed}"
    acquired = 0
    while True:
        t0 = time.perf_counter()
        lab = np.array(state.labeled)
        model = train_model(cfg, sd.x_train[lab], sd.y_train[lab], sd.x_val, sd.y_val, state.round)
        scores = evaluate(model, sd.x_test, sd.y_test, derived_rng(cfg.seed, _EVAL, state.round), cfg.eval_samples)
        tau = min(cfg.query_size, cfg.budget - acquired, len(state.unlabeled))
        if tau > 0:
            unl = np.array(state.unlabeled)
            positions = acquire(
                cfg.acquisition,
                model,
                sd.x_train[unl],
                sd.x_train[lab],
                tau,
                mc,
                cfg.seed,
                state.round,
                unl,
                derived_rng(cfg.seed, _ACQ, state.round),
            )
        row = {"round": state.round, "labeled_size": len(lab), **scores}
        row["seconds"] = time.perf_counter() - t0 if record_time else float("nan")
        traj.rows.append(row)
        if progress:
            progress(row)
        if tau <= 0:
            break
        run_round(state, positions)
        acquired += tau
        state.check(n_train)
        if out_dir is not None:
            traj.write(out_dir, stem)
    meta["status"] = "complete"
    meta["acquired"] = acquired
    meta["history"] = {str(k): v for k, v in state.history.items()}
    if out_dir is not None:
        traj.write(out_dir, stem)
    return traj


def auc(rows, metric="nll"):
    """Trapezoid area under metric vs labeled size, divided by the size span."""
    if len(rows) < 2:
        raise ValueError("AUC needs at least 2 trajectory rows")
    x = np.array([r["labeled_size"] for r in rows], dtype=np.float64)
    y = np.array([r[metric] for r in rows], dtype=np.float64)
    span = x[-1] - x[0]
    if span <= 0:
        raise ValueError("trajectory has no labeled-size span")
    return float((0.5 * (y[1:] + y[:-1]) * np.diff(x)).sum() / span)
