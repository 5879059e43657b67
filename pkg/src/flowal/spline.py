"""Monotone rational-quadratic spline on [-B, B] with identity tails.

The forward direction (data -> base) is differentiable: knot construction
and bin evaluation are graph nodes with analytic gradients. The inverse is only needed for sampling and works on plain
arrays.

Unconstrained parameters per input row: ``K`` widths, ``K`` heights and
``K - 1`` interior derivatives. All-zero parameters give the identity map.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad

DEFAULT_BINS = 8
DEFAULT_BOUND = 4.0
MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3

# softplus(_DERIV_SHIFT) + MIN_DERIVATIVE == 1, so zero raw derivatives are identity
_DERIV_SHIFT = math.log(math.expm1(1.0 - MIN_DERIVATIVE))


def n_params(bins=DEFAULT_BINS):
    return 3 * bins - 1


def split_params(params, bins=DEFAULT_BINS):
    """Slice a (..., 3K-1) tensor into widths, heights, derivatives."""
    return (
        params[..., :bins],
        params[..., bins : 2 * bins],
        params[..., 2 * bins :],
    )


def _knots(raw, bound, min_size):
    """Cumulative knot positions (N, K+1) from raw sizes (N, K), as one node."""
    raw = ad.as_tensor(raw)
    r = raw.data
    bins = r.shape[-1]
    e = np.exp(r - r.max(axis=-1, keepdims=True))
    sm = e / e.sum(axis=-1, keepdims=True)
    scale = 1.0 - min_size * bins
    cum = np.cumsum(sm * scale + min_size, axis=-1)
    out = np.empty(r.shape[:-1] + (bins + 1,))
    out[..., 0] = -bound
    out[..., 1:bins] = 2.0 * bound * cum[..., :-1] - bound
    # pin the last knot to exactly +bound
    out[..., bins] = bound

    def back(g):
        g_cum = np.zeros_like(sm)
        g_cum[..., :-1] = 2.0 * bound * g[..., 1:bins]
        g_sizes = np.cumsum(g_cum[..., ::-1], axis=-1)[..., ::-1] * scale
        return (sm * (g_sizes - (g_sizes * sm).sum(axis=-1, keepdims=True)),)

    return ad.make_node(out, (raw,), back)


def _derivatives(raw):
    """Interior derivatives with boundary 1s attached, (N, K+1), as one node."""
    raw = ad.as_tensor(raw)
    z = raw.data + _DERIV_SHIFT
    out = np.ones(z.shape[:-1] + (z.shape[-1] + 2,))
    out[..., 1:-1] = np.logaddexp(0.0, z) + MIN_DERIVATIVE
    return ad.make_node(out, (raw,), lambda g: (g[..., 1:-1] * ad._sigmoid(z),))


def spline_knots(w_raw, h_raw, d_raw, bound=DEFAULT_BOUND):
    """Knot x-positions, knot y-positions and knot derivatives, each (N, K+1).

    Boundary derivatives are fixed at 1 so the identity tails join smoothly.
    """
    cw = _knots(w_raw, bound, MIN_BIN_WIDTH)
    ch = _knots(h_raw, bound, MIN_BIN_HEIGHT)
    return cw, ch, _derivatives(d_raw)


def _bin_index(knots, x):
    """Bin of each ``x`` given (N, K+1) knots and x of shape (N, G)."""
    inner = knots[..., 1:-1]
    return (x[..., :, None] >= inner[..., None, :]).sum(axis=-1)


def _scatter(idx, values, n_rows, width):
    """Sum ``values`` (N, G) into an (N, width) array at columns ``idx``."""
    flat = (np.arange(n_rows)[:, None] * width + idx).ravel()
    return np.bincount(flat, weights=values.ravel(), minlength=n_rows * width).reshape(n_rows, width)


def rq_apply(x, cw, ch, d, bound=DEFAULT_BOUND):
    """Evaluate the spline given knot tensors; returns ``(y, logabsdet)``.

    ``x`` is (N, G), knots are (N, K+1). Both outputs are graph nodes with
    hand-written gradients for ``x`` and all three knot tensors.
    """
    x = ad.as_tensor(x)
    xd, cwd, chd, dd = x.data, cw.data, ch.data, d.data
    n, width = cwd.shape
    inside = (xd >= -bound) & (xd <= bound)
    xc = np.where(inside, xd, 0.0)
    idx = _bin_index(cwd, xc)
    idx1 = idx + 1
    take = lambda a, i: np.take_along_axis(a, i, axis=-1)  # noqa: E731
    x_k, y_k, d_k = take(cwd, idx), take(chd, idx), take(dd, idx)
    w = take(cwd, idx1) - x_k
    h = take(chd, idx1) - y_k
    d_k1 = take(dd, idx1)
    s = h / w
    theta = (xc - x_k) / w
    omt = 1.0 - theta
    t = theta * omt
    A = s * theta * theta + d_k * t
    c = d_k1 + d_k - 2.0 * s
    den = s + c * t
    B = d_k1 * theta * theta + 2.0 * s * t + d_k * omt * omt

    y = np.where(inside, y_k + h * A / den, xd)
    lad = np.where(inside, 2.0 * np.log(s) + np.log(B) - 2.0 * np.log(den), 0.0)

    def knot_grads(g_xk, g_w, g_yk, g_h, g_dk, g_dk1):
        g_cw = _scatter(idx, g_xk - g_w, n, width) + _scatter(idx1, g_w, n, width)
        g_ch = _scatter(idx, g_yk - g_h, n, width) + _scatter(idx1, g_h, n, width)
        g_d = _scatter(idx, g_dk, n, width) + _scatter(idx1, g_dk1, n, width)
        return g_cw, g_ch, g_d

    def back_y(g):
        gi = np.where(inside, g, 0.0)
        den2 = den * den
        r_theta = h * ((2.0 * s * theta + d_k * (1.0 - 2.0 * theta)) * den - A * c * (1.0 - 2.0 * theta)) / den2
        r_s = h * (theta * theta * den - A * (1.0 - 2.0 * t)) / den2
        r_h = A / den
        r_dk = h * t * (den - A) / den2
        r_dk1 = -h * A * t / den2
        g_theta = gi * r_theta / w
        g_s = gi * r_s / w
        g_x = np.where(inside, g_theta, g)
        return (g_x,) + knot_grads(-g_theta, -g_theta * theta - g_s * s, gi, gi * r_h + g_s, gi * r_dk, gi * r_dk1)

    def back_lad(g):
        gi = np.where(inside, g, 0.0)
        l_theta = (2.0 * d_k1 * theta + 2.0 * s * (1.0 - 2.0 * theta) - 2.0 * d_k * omt) / B - 2.0 * c * (
            1.0 - 2.0 * theta
        ) / den
        l_s = 2.0 / s + 2.0 * t / B - 2.0 * (1.0 - 2.0 * t) / den
        l_dk = omt * omt / B - 2.0 * t / den
        l_dk1 = theta * theta / B - 2.0 * t / den
        g_theta = gi * l_theta / w
        g_s = gi * l_s / w
        zero = np.zeros_like(g)
        return (g_theta,) + knot_grads(-g_theta, -g_theta * theta - g_s * s, zero, g_s, gi * l_dk, gi * l_dk1)

    parents = (x, cw, ch, d)
    return ad.make_node(y, parents, back_y), ad.make_node(lad, parents, back_lad)


def rq_forward(x, w_raw, h_raw, d_raw, bound=DEFAULT_BOUND):
    """Apply the spline to ``x`` (shape (N, G)) with per-row params (N, *).

    Returns ``(y, logabsdet)``, both (N, G). Points outside [-B, B] pass
    through unchanged with zero log-det.
    """
    cw, ch, d = spline_knots(w_raw, h_raw, d_raw, bound)
    return rq_apply(x, cw, ch, d, bound)


def rq_inverse(y, w_raw, h_raw, d_raw, bound=DEFAULT_BOUND):
    """Inverse of :func:`rq_forward` on plain arrays.

    ``y`` is (N, G); parameter arrays are (N, *). Returns ``(x, logabsdet)``
    where ``logabsdet`` is log|dx/dy|.
    """
    with ad.no_grad():
        cw, ch, d = (t.data for t in spline_knots(w_raw, h_raw, d_raw, bound))
    y = np.asarray(y, dtype=np.float64)
    inside = (y >= -bound) & (y <= bound)
    yc = np.where(inside, y, 0.0)
    idx = _bin_index(ch, yc)

    def gather(a):
        return np.take_along_axis(a, idx, axis=-1)

    x_k = gather(cw[..., :-1])
    w_k = gather(cw[..., 1:]) - x_k
    y_k = gather(ch[..., :-1])
    h_k = gather(ch[..., 1:]) - y_k
    d_k = gather(d[..., :-1])
    d_k1 = gather(d[..., 1:])
    s_k = h_k / w_k

    dy = yc - y_k
    tmp = dy * (d_k1 + d_k - 2.0 * s_k)
    a = h_k * (s_k - d_k) + tmp
    b = h_k * d_k - tmp
    c = -s_k * dy
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    theta = (2.0 * c) / (-b - np.sqrt(disc))
    x_in = theta * w_k + x_k

    t1mt = theta * (1.0 - theta)
    denom = s_k + (d_k1 + d_k - 2.0 * s_k) * t1mt
    dnumer = s_k * s_k * (d_k1 * theta * theta + 2.0 * s_k * t1mt + d_k * (1.0 - theta) ** 2)
    lad_in = -(np.log(dnumer) - 2.0 * np.log(denom))

    x = np.where(inside, x_in, y)
    lad = np.where(inside, lad_in, 0.0)
    return x, lad
