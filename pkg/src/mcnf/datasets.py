"""Synthetic generators, CSV ingestion, splitting and standardization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import IngestionError

STD_FLOOR = 1e-12


@dataclass(frozen=True)
class SyntheticParams:
    """Parameters of the heteroskedastic Poisson process.

    y = Poisson(max(sin x + offset, 0)) + (slope_noise * e1 + slope) * x
        + 1{u <= outlier_threshold} * outlier_scale * e2
    """

    offset: float = 0.1
    slope_noise: float = 0.05
    slope: float = 0.0
    outlier_threshold: float = 0.0
    outlier_scale: float = 25.0
    x_low: float = 0.0
    x_high: float = 10.0
    sin_squared: bool = False


ROMANO_ORIGINAL = SyntheticParams(offset=0.1, slope_noise=0.05, slope=0.0, outlier_threshold=0.0)
ROMANO_MOD = SyntheticParams(offset=0.1, slope_noise=0.05, slope=2.0, outlier_threshold=0.0)
PRESETS = {"romano-original": ROMANO_ORIGINAL, "romano-mod": ROMANO_MOD}


@dataclass
class Dataset:
    """Raw data plus (after :func:`split_standardize`) a split and frozen z-score statistics."""

    x: np.ndarray
    y: np.ndarray
    name: str = "data"
    feature_names: list = field(default_factory=list)
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_mean: float = 0.0
    y_std: float = 1.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.y = np.asarray(self.y, dtype=float)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} feature rows but {len(self.y)} targets")

    def __len__(self):
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    @property
    def is_split(self) -> bool:
        return self.train_idx is not None

    def standardize_x(self, x):
        return (np.asarray(x, dtype=float) - self.x_mean) / self.x_std

    def standardize_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def unstandardize_y(self, y):
        return np.asarray(y, dtype=float) * self.y_std + self.y_mean

    def part(self, which: str):
        """Standardized ``(x, y)`` for ``'train'`` or ``'test'``."""
        if not self.is_split:
            raise ValueError("dataset has not been split; call split_standardize first")
        idx = {"train": self.train_idx, "test": self.test_idx}[which]
        return self.standardize_x(self.x[idx]), self.standardize_y(self.y[idx])

    def to_csv(self, path, target_name="y"):
        names = self.feature_names or [f"x{i}" for i in range(self.n_features)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(list(names) + [target_name])
            for row, target in zip(self.x, self.y):
                w.writerow([repr(float(v)) for v in row] + [repr(float(target))])


def generate_romano(params: SyntheticParams = ROMANO_MOD, n=2500, seed=None, name=None) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.uniform(params.x_low, params.x_high, size=n)
    base = np.sin(x) ** 2 if params.sin_squared else np.sin(x)
    rate = np.maximum(base + params.offset, 0.0)
    eps1 = rng.standard_normal(n)
    eps2 = rng.standard_normal(n)
    u = rng.uniform(size=n)
    y = rng.poisson(rate) + (params.slope_noise * eps1 + params.slope) * x
    y = y + (u <= params.outlier_threshold) * params.outlier_scale * eps2
    return Dataset(x[:, None], y, name=name or "synthetic", feature_names=["x"])


def generate_outlier_study(slope, outlier_scale, outlier_rate=0.01, n=2500, seed=None) -> Dataset:
    params = replace(ROMANO_ORIGINAL, slope=slope, outlier_scale=outlier_scale,
                     outlier_threshold=outlier_rate)
    return generate_romano(params, n, seed, name=f"outliers-b{slope:g}-g{outlier_scale:g}")


def load_csv(path, target_column: str, name=None) -> Dataset:
    """Read a header-first, comma-delimited numeric CSV.

    Rows with an empty cell are dropped; any other non-numeric cell is an
    error that lists the offending line numbers.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if target_column not in header:
            raise IngestionError(f"{path}: no column {target_column!r}; available columns: {header}")
        rows, bad = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            cells = [cell.strip() for cell in row]
            if len(cells) != len(header) or any(cell == "" for cell in cells):
                continue
            try:
                rows.append([float(cell) for cell in cells])
            except ValueError:
                bad.append(lineno)
    if bad:
        shown = ", ".join(map(str, bad[:20])) + (" ..." if len(bad) > 20 else "")
        raise IngestionError(f"{path}: non-numeric cells on line(s) {shown}")
    if not rows:
        raise IngestionError(f"{path}: no complete numeric rows")
    data = np.array(rows)
    t = header.index(target_column)
    features = [h for i, h in enumerate(header) if i != t]
    return Dataset(np.delete(data, t, axis=1), data[:, t], name=name or path.stem, feature_names=features)


def split_standardize(data: Dataset, ratio=0.8, seed=None) -> Dataset:
    """Seeded shuffle, ``ratio`` train split, z-scores fit on the train part only."""
    n = len(data)
    if n < 5:
        raise ValueError(f"need at least 5 observations to split, got {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(ratio * n))
    train, test = np.sort(order[:n_train]), np.sort(order[n_train:])
    xt, yt = data.x[train], data.y[train]
    return replace(
        data,
        train_idx=train,
        test_idx=test,
        x_mean=xt.mean(axis=0),
        x_std=np.maximum(xt.std(axis=0), STD_FLOOR),
        y_mean=float(yt.mean()),
        y_std=float(max(yt.std(), STD_FLOOR)),
    )
