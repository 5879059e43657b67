"""Dataset ingestion, synthetic generators, splitting and normalization."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SYNTHETIC_KINDS = ("heteroscedastic", "bimodal", "linear")


@dataclass
class Dataset:
    name: str
    features: np.ndarray
    targets: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    dropped_rows: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if self.features.ndim != 2 or len(self.features) != len(self.targets):
            raise ValueError("features must be (N, F) with N matching the targets")

    def __len__(self):
        return len(self.targets)

    @property
    def n_features(self):
        return self.features.shape[1]

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.targets).tobytes())
        h.update(json.dumps(self.feature_names).encode())
        return h.hexdigest()


def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def _to_float(s):
    s = s.strip()
    if s == "" or s.lower() in ("nan", "na", "null", "?"):
        return math.nan
    return float(s)


def load_csv(path, target=None, categorical=(), drop=(), name=None):
    """Read a header CSV into a :class:`Dataset`.

    ``target`` is a column name (default: last column). Columns that are
    not fully numeric, plus any listed in ``categorical``, are one-hot
    encoded with categories in sorted order. Rows with missing values are
    dropped and counted.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    target = header[-1] if target is None else target
    if target not in header:
        raise ValueError(f"{path}: target column {target!r} not found")
    missing = [c for c in list(categorical) + list(drop) if c not in header]
    if missing:
        raise ValueError(f"{path}: unknown columns {missing}")
    for r in rows:
        if len(r) != len(header):
            raise ValueError(f"{path}: row with {len(r)} fields, header has {len(header)}")

    cols = {h: [r[i].strip() for r in rows] for i, h in enumerate(header)}
    is_missing = lambda v: v == "" or v.lower() in ("nan", "na", "null", "?")  # noqa: E731
    keep = np.array([not any(is_missing(cols[h][j]) for h in header if h not in drop) for j in range(len(rows))], dtype=bool)
    dropped = int((~keep).sum())
    if keep.sum() == 0:
        raise ValueError(f"{path}: no usable rows")

    blocks, names = [], []
    for h in header:
        if h == target or h in drop:
            continue
        values = [v for v, k in zip(cols[h], keep) if k]
        if h in categorical or not all(_is_number(v) for v in values):
            cats = sorted(set(values))
            onehot = np.array([[v == c for c in cats] for v in values], dtype=np.float64)
            blocks.append(onehot.reshape(len(values), len(cats)))
            names.extend(f"{h}={c}" for c in cats)
        else:
            blocks.append(np.array([_to_float(v) for v in values])[:, None])
            names.append(h)
    y = np.array([_to_float(v) for v, k in zip(cols[target], keep) if k])
    x = np.concatenate(blocks, axis=1) if blocks else np.zeros((len(y), 0))
    if dropped:
        log.info("%s: dropped %d rows with missing values", path.name, dropped)
    return Dataset(name or path.stem, x, y, names, dropped)


def load_manifest(path):
    """Manifest JSON: {name: {"path", "target", "categorical", "drop"}}.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    entries = json.loads(path.read_text())
    for entry in entries.values():
        unknown = set(entry) - {"path", "target", "categorical", "drop"}
        if unknown:
            raise ValueError(f"manifest: unknown keys {sorted(unknown)}")
        p = Path(entry["path"])
        entry["path"] = str(p if p.is_absolute() else path.parent / p)
    return entries


def load_from_manifest(manifest, name):
    entry = manifest[name]
    return load_csv(
        entry["path"],
        target=entry.get("target"),
        categorical=entry.get("categorical", ()),
        drop=entry.get("drop", ()),
        name=name,
    )


def make_synthetic(kind, n, noise=None, rng=None, n_features=1):
    """Synthetic regression problems on x ~ U[0, 1].

    heteroscedastic
        y = sin(4 pi x) + eps, eps std ramping linearly from 0.01 to 0.3.
    bimodal
        y = +-(0.2 + 0.8 x) with equal odds, plus N(0, noise) (default 0.05).
    linear
        y = a . x + N(0, noise) (default 0.01) with fixed coefficients a.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if n < 10:
        raise ValueError("synthetic datasets need n >= 10")
    rng = np.random.default_rng(0) if rng is None else rng
    if kind == "linear":
        x = rng.uniform(0.0, 1.0, size=(n, n_features))
        a = np.linspace(1.0, 2.0, n_features)
        sd = 0.01 if noise is None else noise
        y = x @ a + sd * rng.standard_normal(n)
    elif kind == "heteroscedastic":
        x = rng.uniform(0.0, 1.0, size=(n, 1))
        sd = 0.01 + 0.29 * x[:, 0]
        y = np.sin(4.0 * np.pi * x[:, 0]) + sd * rng.standard_normal(n)
    else:
        x = rng.uniform(0.0, 1.0, size=(n, 1))
        sd = 0.05 if noise is None else noise
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        y = sign * (0.2 + 0.8 * x[:, 0]) + sd * rng.standard_normal(n)
    names = [f"x{i}" for i in range(x.shape[1])]
    return Dataset(kind, x, y, names)


def split_indices(n, fractions=(0.7, 0.15, 0.15), seed=0, allow_empty=False):
    """Shuffle ``range(n)`` into train/val/test index arrays.

    Sizes are floor(f * n) for train and val; test takes the remainder.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    parts = perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]
    if not allow_empty and any(len(p) == 0 for p in parts):
        raise ValueError("split produced an empty partition")
    return tuple(np.sort(p) for p in parts)


@dataclass
class Normalizer:
    """z-score features, min-max targets; statistics from the train split."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_min: float
    y_max: float

    @classmethod
    def fit(cls, x, y):
        x_std = x.std(axis=0)
        x_std = np.where(x_std > 0, x_std, 1.0)
        y_min, y_max = float(np.min(y)), float(np.max(y))
        if y_max <= y_min:
            raise ValueError("constant targets cannot be min-max normalized")
        return cls(x.mean(axis=0), x_std, y_min, y_max)

    def features(self, x):
        return (x - self.x_mean) / self.x_std

    def targets(self, y, clip=False):
        t = (np.asarray(y, dtype=np.float64) - self.y_min) / (self.y_max - self.y_min)
        return np.clip(t, 0.0, 1.0) if clip else t

    def denormalize_targets(self, t):
        return np.asarray(t) * (self.y_max - self.y_min) + self.y_min


@dataclass
class SplitData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    normalizer: Normalizer


def prepare(dataset: Dataset, fractions=(0.7, 0.15, 0.15), seed=0):
    """Split and normalize; val/test targets are clipped to [0, 1]."""
    tr, va, te = split_indices(len(dataset), fractions, seed)
    x, y = dataset.features, dataset.targets
    norm = Normalizer.fit(x[tr], y[tr])
    return SplitData(
        norm.features(x[tr]),
        norm.targets(y[tr]),
        norm.features(x[va]),
        norm.targets(y[va], clip=True),
        norm.features(x[te]),
        norm.targets(y[te], clip=True),
        norm,
    )
