"""Aggregate trajectories: AUC ranks, Wilcoxon-Holm comparisons, tables, SVG plots."""

from __future__ import annotations

import csv
import io
import itertools
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .harness import auc, read_trajectory

METRICS = ("nll", "mae", "crps")
EXACT_BELOW = 20

_PALETTE = (
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#ff7f0e",
    "#9467bd",
    "#8c564b",
    "#e377c2",
    "#7f7f7f",
    "#bcbd22",
    "#17becf",
)


class ReportError(ValueError):
    pass


@dataclass
class RankTable:
    """One row per (algorithm, dataset, seed) with its AUC and within-group rank."""

    rows: list[dict]

    @property
    def algorithms(self):
        return sorted({r["algorithm"] for r in self.rows})

    @property
    def groups(self):
        return sorted({(r["dataset"], r["seed"]) for r in self.rows})

    def mean_ranks(self):
        acc = defaultdict(list)
        for r in self.rows:
            acc[r["algorithm"]].append(r["rank"])
        return {a: float(np.mean(v)) for a, v in sorted(acc.items())}

    def rank_matrix(self):
        """(groups, algorithms) array of ranks, in sorted order on both axes."""
        algs, groups = self.algorithms, self.groups
        col = {a: j for j, a in enumerate(algs)}
        row = {g: i for i, g in enumerate(groups)}
        out = np.full((len(groups), len(algs)), np.nan)
        for r in self.rows:
            out[row[(r["dataset"], r["seed"])], col[r["algorithm"]]] = r["rank"]
        return out


def rank_algorithms(records):
    """Rank algorithms by ascending AUC within each (dataset, seed) group.

    ``records`` are dicts with keys algorithm, dataset, seed, auc. Ties get
    the average rank. Every algorithm must appear in every group.
    """
    records = list(records)
    if not records:
        raise ReportError("no AUC records to rank")
    algs = sorted({r["algorithm"] for r in records})
    cells = {}
    for r in records:
        key = (r["dataset"], r["seed"], r["algorithm"])
        if key in cells:
            raise ReportError(f"duplicate record for {key}")
        if not np.isfinite(r["auc"]):
            raise ReportError(f"non-finite AUC for {key}")
        cells[key] = float(r["auc"])
    groups = sorted({(r["dataset"], r["seed"]) for r in records})
    missing = [f"{a}@{d}/seed {s}" for d, s in groups for a in algs if (d, s, a) not in cells]
    if missing:
        raise ReportError("missing cells: " + ", ".join(missing))
    rows = []
    for d, s in groups:
        values = np.array([cells[(d, s, a)] for a in algs])
        ranks = stats.rankdata(values, method="average")
        for a, v, rk in zip(algs, values, ranks):
            rows.append({"algorithm": a, "dataset": d, "seed": s, "auc": float(v), "rank": float(rk)})
    return RankTable(rows)


def _exact_counts(doubled):
    """Number of sign assignments giving each value of the doubled W+ sum."""
    total = int(sum(doubled))
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    return counts


def wilcoxon_signed_rank(a, b, exact_below=EXACT_BELOW):
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped. With fewer than ``exact_below`` remaining
    pairs the null distribution is enumerated exactly (ties handled via
    average ranks); otherwise a tie-corrected normal approximation is used.
    Returns ``(statistic, p)`` with statistic = min(W+, W-).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-d and of equal length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        warnings.warn("all paired differences are zero; returning p = 1", RuntimeWarning, stacklevel=2)
        return 0.0, 1.0
    ranks = stats.rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    statistic = min(w_plus, w_minus)
    if n < exact_below:
        # average ranks are multiples of 1/2, so doubling makes them integers
        doubled = np.rint(2 * ranks).astype(int)
        counts = _exact_counts(doubled)
        w2 = int(np.rint(2 * w_plus))
        total = counts.sum()
        lower = counts[: w2 + 1].sum() / total
        upper = counts[w2:].sum() / total
        p = min(1.0, 2.0 * min(lower, upper))
    else:
        if n < 5:
            raise ValueError("normal approximation needs at least 5 non-zero differences")
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
        if var <= 0:
            return statistic, 1.0
        z = (w_plus - mean) / math.sqrt(var)
        p = min(1.0, 2.0 * stats.norm.sf(abs(z)))
    return statistic, float(p)


def holm_correct(pvalues, alpha=0.05):
    """Holm step-down decisions, returned in the input order."""
    p = np.asarray(pvalues, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise ValueError("holm_correct needs a non-empty 1-d list of p-values")
    m = len(p)
    order = np.argsort(p, kind="stable")
    reject = np.zeros(m, dtype=bool)
    for i, j in enumerate(order):
        if p[j] > alpha / (m - i):
            break
        reject[j] = True
    return reject.tolist()


def pairwise_tests(table: RankTable, alpha=0.05):
    """All-pairs Wilcoxon tests on per-group ranks, Holm-corrected jointly."""
    algs = table.algorithms
    mat = table.rank_matrix()
    out = []
    for (i, a), (j, b) in itertools.combinations(enumerate(algs), 2):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            statistic, p = wilcoxon_signed_rank(mat[:, i], mat[:, j])
        out.append(
            {
                "algorithm_a": a,
                "algorithm_b": b,
                "n": int(mat.shape[0]),
                "mean_rank_a": float(mat[:, i].mean()),
                "mean_rank_b": float(mat[:, j].mean()),
                "statistic": statistic,
                "p": p,
            }
        )
    if out:
        for row, rej in zip(out, holm_correct([r["p"] for r in out], alpha)):
            row["holm_reject"] = bool(rej)
    return out


# ---------------------------------------------------------------------------
# collection


def collect(results_dir):
    """Load every ``seed_*.csv`` trajectory (with sidecar) under a directory."""
    results_dir = Path(results_dir)
    if not results_dir.is_dir():
        raise ReportError(f"{results_dir}: not a directory")
    trajs = []
    for path in sorted(results_dir.rglob("seed_*.csv")):
        t = read_trajectory(path)
        meta = t.metadata
        for key in ("algorithm", "dataset", "seed"):
            if key not in meta:
                raise ReportError(f"{path}: metadata sidecar lacks {key!r}")
        if meta.get("status", "complete") != "complete":
            raise ReportError(f"{path}: run did not complete (status={meta['status']!r})")
        trajs.append(t)
    if not trajs:
        raise ReportError(f"{results_dir}: no trajectories found")
    return trajs


def auc_records(trajectories, metric="nll"):
    return [
        {
            "algorithm": t.metadata["algorithm"],
            "dataset": t.metadata["dataset"],
            "seed": int(t.metadata["seed"]),
            "auc": auc(t.rows, metric),
        }
        for t in trajectories
    ]


# ---------------------------------------------------------------------------
# output


def _fmt(v):
    return repr(float(v))


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _summary_md(table, pairwise, metric, alpha):
    ranks = sorted(table.mean_ranks().items(), key=lambda kv: (kv[1], kv[0]))
    lines = [
        f"# Ranking by {metric.upper()} AUC",
        "",
        f"{len(table.groups)} (dataset, seed) groups, {len(table.algorithms)} algorithms. Rank 1 is best.",
        "",
        "| algorithm | mean rank |",
        "|---|---|",
    ]
    lines += [f"| {a} | {r:.4f} |" for a, r in ranks]
    lines += ["", f"## All-pairs Wilcoxon signed-rank tests on ranks, Holm-corrected at alpha={alpha}", ""]
    if pairwise:
        lines += ["| a | b | p | reject |", "|---|---|---|---|"]
        lines += [
            f"| {r['algorithm_a']} | {r['algorithm_b']} | {r['p']:.4g} | {'yes' if r['holm_reject'] else 'no'} |"
            for r in pairwise
        ]
    else:
        lines.append("Only one algorithm, no comparisons.")
    return "\n".join(lines) + "\n"


def _curves(trajectories, metric):
    """{algorithm: (sizes, mean, std)} with mean/std over seeds per labeled size."""
    by_alg = defaultdict(lambda: defaultdict(list))
    for t in trajectories:
        for r in t.rows:
            by_alg[t.metadata["algorithm"]][r["labeled_size"]].append(r[metric])
    out = {}
    for alg in sorted(by_alg):
        sizes = sorted(by_alg[alg])
        vals = [np.asarray(by_alg[alg][s]) for s in sizes]
        out[alg] = (
            np.array(sizes, dtype=np.float64),
            np.array([v.mean() for v in vals]),
            np.array([v.std() for v in vals]),
        )
    return out


def trajectory_svg(trajectories, title="", metrics=METRICS):
    """One panel per metric; each algorithm gets a mean curve and a +-1 std band."""
    panel_w, panel_h, pad = 360, 240, 45
    width = pad + len(metrics) * (panel_w + pad)
    height = panel_h + 2 * pad + 20
    algs = sorted({t.metadata["algorithm"] for t in trajectories})
    color = {a: _PALETTE[i % len(_PALETTE)] for i, a in enumerate(algs)}
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{pad}" y="18" font-size="14" font-family="sans-serif">{title}</text>',
    ]
    for k, metric in enumerate(metrics):
        curves = _curves(trajectories, metric)
        x0, y0 = pad + k * (panel_w + pad), pad
        xs = np.concatenate([c[0] for c in curves.values()])
        lo = min((c[1] - c[2]).min() for c in curves.values())
        hi = max((c[1] + c[2]).max() for c in curves.values())
        x_lo, x_hi = xs.min(), xs.max()
        x_hi = x_hi if x_hi > x_lo else x_lo + 1.0
        hi = hi if hi > lo else lo + 1.0

        def px(v, x_lo=x_lo, x_hi=x_hi, x0=x0):
            return x0 + (v - x_lo) / (x_hi - x_lo) * panel_w

        def py(v, lo=lo, hi=hi, y0=y0):
            return y0 + panel_h - (v - lo) / (hi - lo) * panel_h

        out.append(f'<g class="panel" data-metric="{metric}">')
        out.append(
            f'<rect x="{x0}" y="{y0}" width="{panel_w}" height="{panel_h}" fill="none" stroke="#000" stroke-width="0.5"/>'
        )
        out.append(
            f'<text x="{x0 + panel_w / 2:.1f}" y="{y0 - 8}" font-size="12" text-anchor="middle" '
            f'font-family="sans-serif">{metric.upper()}</text>'
        )
        out.append(f'<text x="{x0}" y="{y0 + panel_h + 14}" font-size="10" font-family="sans-serif">{x_lo:g}</text>')
        out.append(
            f'<text x="{x0 + panel_w}" y="{y0 + panel_h + 14}" font-size="10" text-anchor="end" '
            f'font-family="sans-serif">{x_hi:g}</text>'
        )
        out.append(f'<text x="{x0 - 4}" y="{y0 + 10}" font-size="10" text-anchor="end" font-family="sans-serif">{hi:.3g}</text>')
        out.append(
            f'<text x="{x0 - 4}" y="{y0 + panel_h}" font-size="10" text-anchor="end" font-family="sans-serif">{lo:.3g}</text>'
        )
        for alg, (sz, mean, sd) in curves.items():
            upper = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(sz, mean + sd))
            lower = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(sz[::-1], (mean - sd)[::-1]))
            out.append(
                f'<polygon points="{upper} {lower}" fill="{color[alg]}" fill-opacity="0.15" stroke="none"/>'
            )
            d = " ".join(("M" if i == 0 else "L") + f"{px(a):.2f},{py(b):.2f}" for i, (a, b) in enumerate(zip(sz, mean)))
            out.append(f'<path d="{d}" fill="none" stroke="{color[alg]}" stroke-width="1.5" data-algorithm="{alg}"/>')
        out.append("</g>")
    for i, alg in enumerate(algs):
        lx = pad + i * 150
        ly = height - 12
        out.append(f'<rect x="{lx}" y="{ly - 8}" width="10" height="10" fill="{color[alg]}"/>')
        out.append(f'<text x="{lx + 14}" y="{ly}" font-size="11" font-family="sans-serif">{alg}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(table: RankTable, pairwise, out_dir, trajectories=(), metric="nll", alpha=0.05):
    """Write ranks.csv, pairwise.csv, summary.md and one SVG per dataset."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"cannot create {out_dir}: {e}") from e
    written = []

    def write(name, text):
        path = out_dir / name
        try:
            path.write_text(text)
        except OSError as e:
            raise ReportError(f"cannot write {path}: {e}") from e
        written.append(path)

    rows = sorted(table.rows, key=lambda r: (r["dataset"], r["seed"], r["algorithm"]))
    write(
        "ranks.csv",
        _csv(
            ("algorithm", "dataset", "seed", "auc", "rank"),
            [(r["algorithm"], r["dataset"], r["seed"], _fmt(r["auc"]), _fmt(r["rank"])) for r in rows],
        ),
    )
    write(
        "pairwise.csv",
        _csv(
            ("algorithm_a", "algorithm_b", "n", "mean_rank_a", "mean_rank_b", "statistic", "p", "holm_reject"),
            [
                (
                    r["algorithm_a"],
                    r["algorithm_b"],
                    r["n"],
                    _fmt(r["mean_rank_a"]),
                    _fmt(r["mean_rank_b"]),
                    _fmt(r["statistic"]),
                    _fmt(r["p"]),
                    int(r["holm_reject"]),
                )
                for r in pairwise
            ],
        ),
    )
    write("summary.md", _summary_md(table, pairwise, metric, alpha))
    by_dataset = defaultdict(list)
    for t in trajectories:
        by_dataset[t.metadata["dataset"]].append(t)
    for ds in sorted(by_dataset):
        trajs = sorted(by_dataset[ds], key=lambda t: (t.metadata["algorithm"], int(t.metadata["seed"])))
        write(f"trajectories_{ds}.svg", trajectory_svg(trajs, title=ds))
    return written


def report(results_dir, out_dir, metric="nll", alpha=0.05):
    """Collect a results directory and write the full report; returns the RankTable."""
    if metric not in METRICS:
        raise ReportError(f"unknown metric {metric!r}")
    trajs = collect(results_dir)
    table = rank_algorithms(auc_records(trajs, metric))
    emit_report(table, pairwise_tests(table, alpha), out_dir, trajs, metric, alpha)
    return table
