"""Dataset ingestion, normalization, splitting, Nyquist computation, and
synthetic series generation.

Normalization statistics come from the training split only. One-dimensional
series get contiguous test/validation windows (mimicking held-out stretches
of a time series); higher-dimensional data gets a uniform random split.
The Nyquist frequency is computed per input dimension in normalized units.
"""

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import (DegenerateColumn, DuplicateInputs, MissingColumn,
                     ParseError)
from .ioutil import atomic_write_text

DEFAULT_WINDOWS = 5


@dataclass
class Normalization:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float


@dataclass
class Split:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


@dataclass
class Dataset:
    x: np.ndarray  # (n, d)
    y: np.ndarray  # (n,)
    norm: Normalization = None
    split: Split = None
    nyquist: np.ndarray = None
    columns: list = field(default_factory=list)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def input_dim(self):
        return self.x.shape[1]

    def _take(self, idx):
        return self.x[idx], self.y[idx]

    def train_x(self):
        return self.x[self.split.train] if self.split else self.x

    def train_y(self):
        return self.y[self.split.train] if self.split else self.y

    def validation_x(self):
        return self.x[self.split.validation]

    def validation_y(self):
        return self.y[self.split.validation]

    def test_x(self):
        return self.x[self.split.test]

    def test_y(self):
        return self.y[self.split.test]

    def input_span(self):
        """Per-dimension range of the training inputs."""
        xt = self.train_x()
        span = np.ptp(xt, axis=0)
        return np.where(span > 0, span, 1.0)

    def train_y_variance(self):
        return float(np.var(self.train_y()))

    def inverse_y(self, values):
        """Map normalized targets back to the raw scale."""
        if self.norm is None:
            return np.asarray(values, dtype=float)
        return np.asarray(values, dtype=float) * self.norm.y_std + self.norm.y_mean


def _parse_cell(text, row, column):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(row, column, f"not a number: {text!r}") from None
    if not math.isfinite(v):
        raise ParseError(row, column, f"non-finite value: {text!r}")
    return v


def load_csv(path, target_column=None, has_header=True):
    """Read a numeric CSV into an unnormalized Dataset.

    ``target_column`` is a header name (or 0-based index without a header);
    it defaults to the last column. Data rows are numbered from 1 in errors.
    """
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    if not rows:
        raise ParseError(1, "", "file has no rows")
    if has_header:
        header = [c.strip() for c in rows[0]]
        body = rows[1:]
    else:
        header = [str(i) for i in range(len(rows[0]))]
        body = rows
    if target_column is None:
        target_idx = len(header) - 1
    elif isinstance(target_column, int) or str(target_column).isdigit():
        target_idx = int(target_column)
        if target_idx >= len(header):
            raise MissingColumn(f"column index {target_idx} out of range")
    else:
        if target_column not in header:
            raise MissingColumn(f"no column named {target_column!r} in {header}")
        target_idx = header.index(target_column)

    values = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise ParseError(i + 1, "", f"expected {len(header)} cells, got {len(row)}")
        for j, cell in enumerate(row):
            values[i, j] = _parse_cell(cell.strip(), i + 1, header[j])
    y = values[:, target_idx]
    x = np.delete(values, target_idx, axis=1)
    feature_names = [h for j, h in enumerate(header) if j != target_idx]
    return Dataset(x=x, y=y, columns=feature_names)


def _window_lengths(total, max_windows):
    k = min(max_windows, total)
    base, rem = divmod(total, k)
    return [base + 1] * rem + [base] * (k - rem)


def _place_windows(free, lengths, rng):
    """Mark non-overlapping windows into the free mask; return their indices."""
    chosen = []
    for length in sorted(lengths, reverse=True):
        starts = []
        run_start = None
        for i, ok in enumerate(np.append(free, False)):
            if ok and run_start is None:
                run_start = i
            elif not ok and run_start is not None:
                run_len = i - run_start
                starts.extend(range(run_start, run_start + run_len - length + 1))
                run_start = None
        if not starts:  # fall back to the largest remaining gap, trimmed
            idx = np.flatnonzero(free)
            if idx.size == 0:
                break
            start, length = idx[0], min(length, idx.size)
        else:
            start = starts[int(rng.integers(len(starts)))]
        free[start : start + length] = False
        chosen.extend(range(start, start + length))
    return np.array(sorted(chosen), dtype=int)


def _series_split(n, n_val, n_test, rng):
    free = np.ones(n, dtype=bool)
    test = _place_windows(free, _window_lengths(n_test, DEFAULT_WINDOWS), rng) \
        if n_test else np.array([], dtype=int)
    val = _place_windows(free, _window_lengths(n_val, DEFAULT_WINDOWS), rng) \
        if n_val else np.array([], dtype=int)
    train = np.flatnonzero(free)
    return train, val, test


def _random_split(n, n_val, n_test, rng):
    perm = rng.permutation(n)
    test = np.sort(perm[:n_test])
    val = np.sort(perm[n_test : n_test + n_val])
    train = np.sort(perm[n_test + n_val :])
    return train, val, test


def prepare(ds, fractions=(0.8, 0.0, 0.2), seed=0):
    """Normalize, split, and attach Nyquist frequencies.

    ``fractions`` is (train, validation, test); validation may be zero.
    One-dimensional datasets are sorted by input and split into contiguous
    held-out windows; higher dimensions use a random split.
    """
    f_train, f_val, f_test = fractions
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    if f_train <= 0 or f_test <= 0 or f_val < 0:
        raise ValueError("train and test fractions must be positive")

    x = np.array(ds.x, dtype=float)
    y = np.array(ds.y, dtype=float)
    n = x.shape[0]
    if x.shape[1] == 1:
        order = np.argsort(x[:, 0], kind="stable")
        x, y = x[order], y[order]

    rng = np.random.default_rng(seed)
    n_test = max(1, round(f_test * n))
    n_val = max(1, round(f_val * n)) if f_val > 0 else 0
    if x.shape[1] == 1:
        train, val, test = _series_split(n, n_val, n_test, rng)
    else:
        train, val, test = _random_split(n, n_val, n_test, rng)

    x_mean = x[train].mean(axis=0)
    x_std = x[train].std(axis=0)
    y_mean = float(y[train].mean())
    y_std = float(y[train].std())
    for k, s in enumerate(x_std):
        if s == 0:
            raise DegenerateColumn(f"input column {k} is constant on the train split")
    if y_std == 0:
        raise DegenerateColumn("target column is constant on the train split")

    xn = (x - x_mean) / x_std
    yn = (y - y_mean) / y_std
    norm = Normalization(x_mean=x_mean, x_std=x_std, y_mean=y_mean, y_std=y_std)
    split = Split(train=train, validation=val, test=test)
    return Dataset(x=xn, y=yn, norm=norm, split=split,
                   nyquist=nyquist_frequencies(xn), columns=list(ds.columns))


def nyquist_frequencies(x):
    """Per-dimension Nyquist frequency of the input grid.

    Equispaced inputs give half the sampling rate, 1/(2*delta); irregular
    inputs give the inverse of the smallest gap. Duplicate locations are
    flagged with a DuplicateInputs warning and skipped.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    out = np.empty(x.shape[1])
    duplicates = False
    for k in range(x.shape[1]):
        col = np.sort(x[:, k])
        if col.size >= 2 and np.any(np.diff(col) == 0):
            duplicates = True
        distinct = np.unique(col)
        if distinct.size < 2:
            raise ValueError(f"column {k} needs at least 2 distinct input values")
        gaps = np.diff(distinct)
        gmin, gmax = float(gaps.min()), float(gaps.max())
        if gmax - gmin <= 1e-9 * max(1.0, gmax):
            out[k] = 1.0 / (2.0 * float(gaps.mean()))
        else:
            out[k] = 1.0 / gmin
    if duplicates:
        warnings.warn("duplicate input locations; Nyquist computed on "
                      "distinct values", DuplicateInputs)
    return out


@dataclass
class SyntheticSpec:
    kind: str  # "chirp" or "gp-draw"
    n: int
    noise_std: float = 0.0
    seed: int = 0
    f0: float = 1.0    # chirp start frequency
    rate: float = 0.0  # chirp sweep rate
    kernel: object = None  # gp-draw covariance

    def __post_init__(self):
        if self.kind not in ("chirp", "gp-draw"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.n < 2:
            raise ValueError("need at least 2 points")
        if self.noise_std < 0 or not math.isfinite(self.noise_std):
            raise ValueError("noise_std must be finite and non-negative")


def synthesize(spec):
    """Generate a synthetic 1-d series: a frequency-swept sine or a GP draw."""
    rng = np.random.default_rng(spec.seed)
    t = np.linspace(0.0, 1.0, spec.n)
    if spec.kind == "chirp":
        y = np.sin(2.0 * math.pi * (spec.f0 + spec.rate * t) * t)
    else:
        if spec.kernel is None:
            raise ValueError("gp-draw needs a kernel")
        k = spec.kernel.gram(t.reshape(-1, 1))
        lower = linalg.cholesky(np.asarray(k), base_jitter=1e-10).lower
        y = lower @ rng.standard_normal(spec.n)
    if spec.noise_std > 0:
        y = y + spec.noise_std * rng.standard_normal(spec.n)
    return Dataset(x=t.reshape(-1, 1), y=y, columns=["t"])


def pca_first_component(x):
    """First principal component via power iteration on the covariance.

    Columns are z-scored first; the loading vector's largest-magnitude entry
    is made positive to fix the sign. Returns (scores, loadings).
    """
    x = np.asarray(x, dtype=float)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    for k, s in enumerate(std):
        if s == 0:
            raise DegenerateColumn(f"column {k} is constant")
    xz = (x - mean) / std
    cov = xz.T @ xz / max(x.shape[0] - 1, 1)
    v = np.ones(x.shape[1]) / math.sqrt(x.shape[1])
    for _ in range(10000):
        nv = cov @ v
        norm = np.linalg.norm(nv)
        if norm == 0:
            break
        nv = nv / norm
        if np.linalg.norm(nv - v) < 1e-13:
            v = nv
            break
        v = nv
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return xz @ v, v


def save_prepared(ds, base_path):
    """Cache a prepared dataset as CSV plus a JSON sidecar."""
    if ds.norm is None or ds.split is None:
        raise ValueError("dataset must be prepared before caching")
    header = [f"x{k}" for k in range(ds.input_dim)] + ["y"]
    lines = [",".join(header)]
    for i in range(ds.n):
        cells = [repr(float(v)) for v in ds.x[i]] + [repr(float(ds.y[i]))]
        lines.append(",".join(cells))
    atomic_write_text(str(base_path) + ".csv", "\n".join(lines) + "\n")
    sidecar = {
        "x_mean": [float(v) for v in ds.norm.x_mean],
        "x_std": [float(v) for v in ds.norm.x_std],
        "y_mean": ds.norm.y_mean,
        "y_std": ds.norm.y_std,
        "split": {
            "train": [int(i) for i in ds.split.train],
            "validation": [int(i) for i in ds.split.validation],
            "test": [int(i) for i in ds.split.test],
        },
        "nyquist": [float(v) for v in ds.nyquist],
        "columns": list(ds.columns),
    }
    atomic_write_text(str(base_path) + ".json",
                      json.dumps(sidecar, sort_keys=True, indent=1))


def load_prepared(base_path):
    """Load a dataset cached by ``save_prepared``."""
    raw = load_csv(str(base_path) + ".csv", target_column="y", has_header=True)
    with open(str(base_path) + ".json", encoding="utf-8") as fh:
        side = json.load(fh)
    norm = Normalization(
        x_mean=np.asarray(side["x_mean"], dtype=float),
        x_std=np.asarray(side["x_std"], dtype=float),
        y_mean=float(side["y_mean"]),
        y_std=float(side["y_std"]),
    )
    split = Split(
        train=np.asarray(side["split"]["train"], dtype=int),
        validation=np.asarray(side["split"]["validation"], dtype=int),
        test=np.asarray(side["split"]["test"], dtype=int),
    )
    return Dataset(x=raw.x, y=raw.y, norm=norm, split=split,
                   nyquist=np.asarray(side["nyquist"], dtype=float),
                   columns=side.get("columns", []))
