"""Dataset loading: labelled CSV tables and small synthetic generators."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

SYNTHETIC_KINDS = ("ring-mixture", "two-blobs", "two-moons")


@dataclass
class DatasetSpec:
    """Where a dataset comes from and how to prepare it.

    ``source`` is either a CSV path or one of ``SYNTHETIC_KINDS``. For CSV
    input ``feature_columns=None`` means every column except the label.
    """

    source: str = "two-blobs"
    label_column: str = "label"
    feature_columns: list[str] | None = None
    standardize: bool = False
    modes: int = 8
    radius: float = 2.0
    noise: float = 0.05
    n_total: int = 5000
    dim: int = 2
    separation: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.feature_columns is not None:
            self.feature_columns = list(self.feature_columns)
        if self.is_synthetic:
            if self.n_total < 2:
                raise ConfigError("synthetic datasets need at least two rows")
            if self.source == "ring-mixture" and self.modes < 2:
                raise ConfigError("ring-mixture needs at least two modes")
            if self.noise < 0:
                raise ConfigError("noise must be >= 0")

    @property
    def is_synthetic(self) -> bool:
        return self.source in SYNTHETIC_KINDS

    @property
    def name(self) -> str:
        return self.source if self.is_synthetic else Path(self.source).stem

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    class_names: list[str]
    feature_names: list[str]
    name: str = ""
    mean: np.ndarray | None = field(default=None, repr=False)
    std: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


# ---------------------------------------------------------------------------
# synthetic generators


def ring_mixture(n: int, rng: np.random.Generator, modes: int = 8, radius: float = 2.0, noise: float = 0.05):
    """Gaussian blobs evenly spaced on a circle; the label is the mode index."""
    k = rng.integers(0, modes, size=n)
    angle = 2.0 * np.pi * k / modes
    X = np.c_[radius * np.cos(angle), radius * np.sin(angle)] + noise * rng.normal(size=(n, 2))
    return X, k


def two_blobs(n: int, rng: np.random.Generator, dim: int = 2, separation: float = 4.0, noise: float = 1.0):
    """Two isotropic Gaussians whose means differ by ``separation`` along the first axis."""
    y = np.repeat([0, 1], [n - n // 2, n // 2])
    X = noise * rng.normal(size=(n, dim))
    X[:, 0] += np.where(y == 1, separation / 2.0, -separation / 2.0)
    return X, y


def two_moons(n: int, rng: np.random.Generator, noise: float = 0.05):
    from sklearn.datasets import make_moons

    X, y = make_moons(n_samples=n, noise=noise, random_state=int(rng.integers(2**31 - 1)))
    return X.astype(np.float64), y.astype(int)


def _synthetic(spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    if spec.source == "ring-mixture":
        X, y = ring_mixture(spec.n_total, rng, spec.modes, spec.radius, spec.noise)
        names = [f"mode{k}" for k in range(spec.modes)]
    elif spec.source == "two-blobs":
        X, y = two_blobs(spec.n_total, rng, spec.dim, spec.separation, spec.noise)
        names = ["blob0", "blob1"]
    else:
        X, y = two_moons(spec.n_total, rng, spec.noise)
        names = ["moon0", "moon1"]
    feats = [f"x{i}" for i in range(X.shape[1])]
    return Dataset(X, y.astype(int), names, feats, spec.name)


# ---------------------------------------------------------------------------
# CSV


def _label_mapping(raw: list[str]) -> list[str]:
    values = sorted(set(raw))
    try:
        return sorted(values, key=float)
    except ValueError:
        return values


def _read_csv(spec: DatasetSpec) -> Dataset:
    path = Path(spec.source)
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if spec.label_column not in header:
            raise DataError(f"{path}: label column {spec.label_column!r} not in header {header}")
        features = spec.feature_columns or [h for h in header if h != spec.label_column]
        missing = [c for c in features if c not in header]
        if missing:
            raise DataError(f"{path}: missing feature column(s) {missing}")
        cols = [header.index(c) for c in features]
        label_col = header.index(spec.label_column)
        rows, labels = [], []
        for line_no, record in enumerate(reader, start=2):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} cells, found {len(record)}")
            values = []
            for c, name in zip(cols, features):
                cell = record[c].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{line_no}: column {name!r} has non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{line_no}: column {name!r} is not finite")
                values.append(v)
            rows.append(values)
            labels.append(record[label_col].strip())
    if not rows:
        raise DataError(f"{path}: no data rows")
    names = _label_mapping(labels)
    index = {name: i for i, name in enumerate(names)}
    y = np.array([index[lab] for lab in labels], dtype=int)
    return Dataset(np.array(rows, dtype=np.float64), y, names, list(features), spec.name)


def load_dataset(spec: DatasetSpec) -> Dataset:
    """Load a dataset and optionally z-score every feature over all rows.

    Raises:
        DataError: unreadable file, missing column, non-numeric cell (with its
            line and column), or fewer than two classes.
    """
    data = _synthetic(spec) if spec.is_synthetic else _read_csv(spec)
    if data.n_classes < 2 or np.unique(data.y).size < 2:
        raise DataError(f"{spec.name}: need at least two classes, found {data.class_names}")
    if spec.standardize:
        mean = data.X.mean(axis=0)
        std = data.X.std(axis=0)
        const = [data.feature_names[i] for i in np.flatnonzero(std == 0)]
        if const:
            raise DataError(f"{spec.name}: cannot standardize constant column(s) {const}")
        data.X = (data.X - mean) / std
        data.mean, data.std = mean, std
    return data
