"""Gaussian-head and conditional spline-flow regressors with MC dropout.

Both models share an MLP encoder (ReLU, dropout after every hidden layer)
that maps features to a latent ``z``. The Gaussian model decodes ``z`` into a
mean and a softplus scale; the flow model feeds ``z`` to a conditioner MLP
that emits the parameters of an affine layer followed by a stack of
rational-quadratic splines. Targets are one-dimensional.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import spline

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


class ModelStateError(RuntimeError):
    """Raised when a model produces non-finite likelihoods."""


@dataclass
class EncoderConfig:
    widths: list[int] = field(default_factory=lambda: [32, 64, 128])
    dropout_train: float = 0.0
    dropout_eval: float = 0.0  # rate used for MC scoring
    activation: str = "relu"

    def __post_init__(self):
        if not self.widths:
            raise ValueError("encoder needs at least one layer")
        for r in (self.dropout_train, self.dropout_eval):
            if not 0.0 <= r < 1.0:
                raise ValueError(f"dropout rate {r} outside [0, 1)")
        if self.activation != "relu":
            raise ValueError("only relu activation is supported")


@dataclass
class ModelConfig:
    family: str = "flow"  # "gaussian" or "flow"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_widths: list[int] = field(default_factory=lambda: [128, 128])
    n_transforms: int = 2
    bins: int = spline.DEFAULT_BINS
    bound: float = spline.DEFAULT_BOUND
    sigma_floor: float = 1e-3

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.family not in ("gaussian", "flow"):
            raise ValueError(f"unknown model family {self.family!r}")

    def to_dict(self):
        return asdict(self)


class Linear:
    def __init__(self, n_in, n_out, rng, name, zero=False):
        w = np.zeros((n_in, n_out)) if zero else ad.kaiming_uniform(n_in, n_out, rng)
        self.weight = ad.Parameter(w, name=f"{name}.weight")
        self.bias = ad.Parameter(np.zeros(n_out), name=f"{name}.bias")

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)

    def params(self):
        return [self.weight, self.bias]


def draw_masks(widths, n_rows, rate, rng):
    """Keep-masks (bool) for each encoder layer, shape (n_rows, width)."""
    return [rng.random((n_rows, w)) >= rate for w in widths]


class Encoder:
    def __init__(self, n_features, config: EncoderConfig, rng):
        self.config = config
        self.layers = []
        n_in = n_features
        for i, w in enumerate(config.widths):
            self.layers.append(Linear(n_in, w, rng, f"encoder.{i}"))
            n_in = w

    @property
    def out_width(self):
        return self.config.widths[-1]

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def __call__(self, x, mode="eval", rng=None, masks=None, rate=None):
        if rate is None:
            rate = self.config.dropout_train if mode == "train" else self.config.dropout_eval
        h = x
        for i, layer in enumerate(self.layers):
            h = ad.relu(layer(h))
            mask = None if masks is None else masks[i]
            h = ad.dropout(h, rate, mode, rng=rng, mask=mask)
        return h


class _Model:
    family = ""

    def __init__(self, n_features, config: ModelConfig, seed=0):
        self.n_features = int(n_features)
        self.config = config
        self.init_seed = seed
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(n_features, config.encoder, rng)
        self._build_head(rng)

    def _build_head(self, rng):
        raise NotImplementedError

    def head_params(self):
        raise NotImplementedError

    def params(self):
        return self.encoder.params() + self.head_params()

    def _check_x(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.n_features:
            raise ad.ShapeError(f"expected {self.n_features} features, got {x.shape[-1]}")
        return x

    def encode(self, x, mode="eval", rng=None, masks=None, rate=None):
        return self.encoder(ad.Tensor(self._check_x(x)), mode, rng=rng, masks=masks, rate=rate)

    def latent(self, x):
        """Deterministic latent embedding (eval mode) as an array."""
        with ad.no_grad():
            return self.encode(x, "eval").data

    def log_prob(self, x, y, mode="eval", rng=None, masks=None, rate=None):
        """Differentiable log-density of scalar targets ``y`` given ``x``."""
        z = self.encode(x, mode, rng=rng, masks=masks, rate=rate)
        y = ad.Tensor(np.asarray(y, dtype=np.float64).reshape(-1, 1))
        return self._log_prob_from_latent(z, y)[:, 0]

    def _log_prob_from_latent(self, z, y):
        raise NotImplementedError

    def distribution(self, x, mode="eval", rng=None, masks=None, rate=None):
        """Predictive distribution for each row of ``x`` with one dropout draw."""
        with ad.no_grad():
            z = self.encode(x, mode, rng=rng, masks=masks, rate=rate)
            return self._distribution_from_latent(z)

    def _distribution_from_latent(self, z):
        raise NotImplementedError

    # checkpoints --------------------------------------------------------
    def save(self, path):
        arrays = {f"p{i:03d}": p.data for i, p in enumerate(self.params())}
        meta = {
            "version": CHECKPOINT_VERSION,
            "family": self.family,
            "n_features": self.n_features,
            "seed": self.init_seed,
            "config": self.config.to_dict(),
        }
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)

    def state(self):
        return [p.data.copy() for p in self.params()]

    def load_state(self, arrays):
        for p, a in zip(self.params(), arrays):
            p.data[...] = a


def load_model(path):
    with np.load(path) as f:
        meta = json.loads(bytes(f["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        config = ModelConfig(**meta["config"])
        model = build_model(meta["n_features"], config, seed=meta["seed"])
        keys = sorted(k for k in f.files if k != "__meta__")
        model.load_state([f[k] for k in keys])
    return model


def build_model(n_features, config: ModelConfig, seed=0):
    cls = {"gaussian": GaussianModel, "flow": FlowModel}[config.family]
    return cls(n_features, config, seed=seed)


class GaussianModel(_Model):
    family = "gaussian"

    def _build_head(self, rng):
        w = self.encoder.out_width
        self.mu_head = Linear(w, 1, rng, "head.mu")
        self.sigma_head = Linear(w, 1, rng, "head.sigma")

    def head_params(self):
        return self.mu_head.params() + self.sigma_head.params()

    def _mu_sigma(self, z):
        mu = self.mu_head(z)
        sigma = ad.softplus(self.sigma_head(z)) + self.config.sigma_floor
        return mu, sigma

    def _log_prob_from_latent(self, z, y):
        mu, sigma = self._mu_sigma(z)
        r = (y - mu) / sigma
        return -HALF_LOG_2PI - ad.log(sigma) - 0.5 * r * r

    def _distribution_from_latent(self, z):
        mu, sigma = self._mu_sigma(z)
        return GaussianDistribution(mu.data[:, 0], sigma.data[:, 0])


class FlowModel(_Model):
    family = "flow"

    def _build_head(self, rng):
        cfg = self.config
        self.conditioner = []
        n_in = self.encoder.out_width
        for i, w in enumerate(cfg.decoder_widths):
            self.conditioner.append(Linear(n_in, w, rng, f"conditioner.{i}"))
            n_in = w
        n_out = 2 + cfg.n_transforms * spline.n_params(cfg.bins)
        # zero output layer: every transform starts as the identity
        self.cond_out = Linear(n_in, n_out, rng, "conditioner.out", zero=True)

    def head_params(self):
        return [p for layer in self.conditioner for p in layer.params()] + self.cond_out.params()

    def _flow_params(self, z):
        h = z
        for layer in self.conditioner:
            h = ad.relu(layer(h))
        return self.cond_out(h)

    def _log_prob_from_latent(self, z, y):
        return flow_log_prob(self._flow_params(z), y, self.config)

    def _distribution_from_latent(self, z):
        return FlowDistribution(self._flow_params(z).data, self.config)


def flow_log_prob(params, y, config: ModelConfig):
    """log p(y) for per-row flow params (N, P) and targets (N, G)."""
    K = config.bins
    P = spline.n_params(K)
    loc = params[:, 0:1]
    log_scale = params[:, 1:2]
    u = (y - loc) * ad.exp(-log_scale)
    lad = -log_scale
    for t in range(config.n_transforms):
        block = params[:, 2 + t * P : 2 + (t + 1) * P]
        w, h, d = spline.split_params(block, K)
        u, l = spline.rq_forward(u, w, h, d, config.bound)
        lad = lad + l
    return -HALF_LOG_2PI - 0.5 * u * u + lad


class PredictiveDistribution:
    """Batch of predictive densities, one per input row, for a fixed mask.

    ``log_prob`` takes targets of shape (N,) or (N, G) and broadcasts per row.
    """

    def __len__(self):
        raise NotImplementedError

    def log_prob(self, y):
        raise NotImplementedError

    def sample(self, n, rng=None, noise=None):
        """(N, n) draws. ``noise`` gives the base normals directly."""
        raise NotImplementedError

    def prob(self, y):
        return np.exp(self.log_prob(y))

    def grid_likelihoods(self, resolution=200):
        """Densities on ``resolution`` evenly spaced points spanning [0, 1]."""
        if resolution < 2:
            raise ValueError("grid resolution must be at least 2")
        grid = np.broadcast_to(np.linspace(0.0, 1.0, resolution), (len(self), resolution))
        return self.prob(grid)

    def mean(self, n=200, rng=None, noise=None):
        return self.sample(n, rng=rng, noise=noise).mean(axis=1)

    def _base_noise(self, n, rng, noise):
        if noise is None:
            if rng is None:
                raise ValueError("sampling needs an rng or explicit noise")
            noise = rng.standard_normal((len(self), n))
        return np.broadcast_to(np.asarray(noise, dtype=np.float64), (len(self), n))


def _as_2d(y, n):
    y = np.asarray(y, dtype=np.float64)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    if y.shape[0] != n:
        y = np.broadcast_to(y, (n, y.shape[-1]))
    return y, squeeze


class GaussianDistribution(PredictiveDistribution):
    def __init__(self, mu, sigma):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.sigma = np.asarray(sigma, dtype=np.float64)

    def __len__(self):
        return len(self.mu)

    def log_prob(self, y):
        y, squeeze = _as_2d(y, len(self))
        r = (y - self.mu[:, None]) / self.sigma[:, None]
        out = -HALF_LOG_2PI - np.log(self.sigma[:, None]) - 0.5 * r * r
        return out[:, 0] if squeeze else out

    def sample(self, n, rng=None, noise=None):
        if n < 1:
            raise ValueError("n must be >= 1")
        eps = self._base_noise(n, rng, noise)
        return self.mu[:, None] + self.sigma[:, None] * eps

    def mean(self, n=200, rng=None, noise=None):
        return self.mu.copy()


class FlowDistribution(PredictiveDistribution):
    _CHUNK = 1 << 17  # rows*points per evaluation block

    def __init__(self, params, config: ModelConfig):
        self.params = np.asarray(params, dtype=np.float64)
        self.config = config

    def __len__(self):
        return len(self.params)

    def log_prob(self, y):
        y, squeeze = _as_2d(y, len(self))
        G = y.shape[1]
        rows = max(1, self._CHUNK // max(G, 1))
        out = np.empty(y.shape)
        with ad.no_grad():
            for s in range(0, len(self), rows):
                sl = slice(s, s + rows)
                out[sl] = flow_log_prob(ad.Tensor(self.params[sl]), ad.Tensor(y[sl]), self.config).data
        if not np.all(np.isfinite(out)):
            raise ModelStateError("flow produced non-finite log-likelihoods")
        return out[:, 0] if squeeze else out

    def sample(self, n, rng=None, noise=None):
        if n < 1:
            raise ValueError("n must be >= 1")
        u = np.array(self._base_noise(n, rng, noise))
        cfg = self.config
        K = cfg.bins
        P = spline.n_params(K)
        for t in reversed(range(cfg.n_transforms)):
            block = self.params[:, 2 + t * P : 2 + (t + 1) * P]
            w, h, d = block[:, :K], block[:, K : 2 * K], block[:, 2 * K :]
            u, _ = spline.rq_inverse(u, w, h, d, cfg.bound)
        loc = self.params[:, 0:1]
        scale = np.exp(self.params[:, 1:2])
        return loc + scale * u

    def to_base(self, y):
        """Normalizing direction: map targets (N, G) to base-space values."""
        cfg = self.config
        K = cfg.bins
        P = spline.n_params(K)
        with ad.no_grad():
            params = ad.Tensor(self.params)
            u = (ad.Tensor(np.asarray(y, dtype=np.float64)) - params[:, 0:1]) * ad.exp(-params[:, 1:2])
            for t in range(cfg.n_transforms):
                w, h, d = spline.split_params(params[:, 2 + t * P : 2 + (t + 1) * P], K)
                u, _ = spline.rq_forward(u, w, h, d, cfg.bound)
        return u.data


def mc_distributions(model, x, k, rng=None, masks=None, rate=None):
    """``k`` predictive distributions for the rows of ``x``, one mask each.

    ``masks`` may be given as a list (per encoder layer) of arrays shaped
    (k, N, width); otherwise they are drawn from ``rng``. Each handle keeps
    its mask, so its grid values and samples describe the same density.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x = model._check_x(x)
    n = len(x)
    widths = model.config.encoder.widths
    if rate is None:
        rate = model.config.encoder.dropout_eval
    if rate == 0.0:
        # no dropout: every handle is the same network, so evaluate it once
        # (a stacked matmul may round rows differently)
        dist = model.distribution(x, "eval")
        return [dist] * k
    if masks is None:
        if rng is None:
            raise ValueError("mc_distributions needs an rng or explicit masks")
        masks = [np.stack(m) for m in zip(*(draw_masks(widths, n, rate, rng) for _ in range(k)))]
    flat = [np.asarray(m).reshape(k * n, -1) for m in masks]
    xs = np.broadcast_to(x, (k, n, x.shape[1])).reshape(k * n, -1)
    dist = model.distribution(xs, "mc", masks=flat, rate=rate)
    return [_slice_dist(dist, slice(i * n, (i + 1) * n)) for i in range(k)]


def _slice_dist(dist, sl):
    if isinstance(dist, GaussianDistribution):
        return GaussianDistribution(dist.mu[sl], dist.sigma[sl])
    return FlowDistribution(dist.params[sl], dist.config)


def nll_loss(model, x, y, mode="train", rng=None):
    """Mean negative log-likelihood over a batch (differentiable)."""
    if len(y) == 0:
        raise ValueError("nll_loss on an empty batch")
    loss = -model.log_prob(x, y, mode=mode, rng=rng).mean()
    if not np.isfinite(loss.data):
        raise ModelStateError("non-finite training loss")
    return loss
