"""Episodes, classification metrics, sample-quality metrics and oversampling baselines."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .errors import ContractError, DataError, EpisodeError


@dataclass
class Episode:
    """An N-way K-shot task. Labels are episode-local indices ``0..N-1``."""

    n_way: int
    k_shot: int
    classes: np.ndarray
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray
    seed: int | None = None


def sample_episode(
    X,
    y,
    n_way: int,
    k_shot: int,
    query_per_class: int | None = None,
    rng: np.random.Generator | int | None = None,
) -> Episode:
    """Draw a stratified support/query split over ``n_way`` random classes.

    ``query_per_class=None`` puts every remaining row of the chosen classes in
    the query set.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if n_way < 1 or k_shot < 1:
        raise ContractError("n_way and k_shot must be >= 1")
    need = k_shot + (query_per_class if query_per_class is not None else 1)
    labels, counts = np.unique(y, return_counts=True)
    eligible = labels[counts >= need]
    if len(eligible) < n_way:
        short = [lab.item() for lab, c in zip(labels, counts) if c < need]
        raise EpisodeError(
            f"{n_way}-way {k_shot}-shot needs {need} rows per class; "
            f"too few rows in class(es) {short} ({len(eligible)} eligible)"
        )
    classes = np.sort(rng.choice(eligible, size=n_way, replace=False))
    s_idx, q_idx, s_y, q_y = [], [], [], []
    for local, cls in enumerate(classes):
        rows = np.flatnonzero(y == cls)
        perm = rng.permutation(rows)
        support = perm[:k_shot]
        rest = perm[k_shot:]
        query = rest if query_per_class is None else rest[:query_per_class]
        s_idx.append(support)
        q_idx.append(query)
        s_y.append(np.full(len(support), local))
        q_y.append(np.full(len(query), local))
    s_idx = np.concatenate(s_idx)
    q_idx = np.concatenate(q_idx)
    return Episode(
        n_way, k_shot, classes,
        X[s_idx], np.concatenate(s_y), X[q_idx], np.concatenate(q_y),
        s_idx, q_idx, seed,
    )


@dataclass
class MetricsReport:
    acc: float
    pre: float
    f1: float
    per_class: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {"acc": self.acc, "pre": self.pre, "f1": self.f1}


def compute_metrics(predictions, truth, labels=None) -> MetricsReport:
    """Accuracy plus macro precision and macro F1.

    A class that is never predicted contributes precision 0.
    """
    pred = np.asarray(predictions).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ContractError(f"{pred.size} predictions for {truth.size} labels")
    if truth.size == 0:
        raise ContractError("metrics need at least one prediction")
    labels = np.unique(truth) if labels is None else np.asarray(labels)
    acc = float(np.mean(pred == truth))
    precisions, f1s, per_class = [], [], {}
    for c in labels:
        tp = int(np.sum((pred == c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        fn = int(np.sum((pred != c) & (truth == c)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        precisions.append(p)
        f1s.append(f)
        per_class[int(c) if np.issubdtype(type(c), np.integer) else c] = {"tp": tp, "fp": fp, "fn": fn}
    return MetricsReport(acc, float(np.mean(precisions)), float(np.mean(f1s)), per_class)


# ---------------------------------------------------------------------------
# sample quality


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def _spread(X: np.ndarray, k: int) -> np.ndarray:
    if len(X) <= k:
        return X
    return X[np.linspace(0, len(X) - 1, k).astype(int)]


def median_heuristic(X, Y, max_points: int = 500) -> float:
    """Median pairwise distance over the pooled samples.

    At most ``max_points`` evenly spaced rows are taken from each side so the
    result does not depend on argument order.
    """
    pool = np.vstack([_spread(X, max_points), _spread(Y, max_points)])
    d = np.sqrt(_sq_dists(pool, pool)[np.triu_indices(len(pool), k=1)])
    med = float(np.median(d))
    return med if med > 0 else 1.0


def _kernel_sum(A: np.ndarray, B: np.ndarray, gamma: float, block: int = 1024) -> float:
    total = 0.0
    for i in range(0, len(A), block):
        total += float(np.exp(-gamma * _sq_dists(A[i : i + block], B)).sum())
    return total


def mmd_rbf(X, Y, bandwidth: float | str = "median-heuristic") -> float:
    """Unbiased MMD^2 with an RBF kernel, clamped at zero."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise ContractError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise ContractError("mmd_rbf needs at least two rows per sample")
    if bandwidth == "median-heuristic":
        bandwidth = median_heuristic(X, Y)
    if not bandwidth > 0:
        raise ContractError("bandwidth must be positive")
    gamma = 1.0 / (2.0 * float(bandwidth) ** 2)
    kxx = (_kernel_sum(X, X, gamma) - m) / (m * (m - 1))
    kyy = (_kernel_sum(Y, Y, gamma) - n) / (n * (n - 1))
    kxy = _kernel_sum(X, Y, gamma) if m <= n else _kernel_sum(Y, X, gamma)
    return max(0.0, kxx + kyy - 2.0 * kxy / (m * n))


def score_analog(samples, reference_classifier) -> float:
    """exp(mean KL(p(y|x) || p(y))) under a reference classifier.

    ``reference_classifier`` is either a callable returning class
    probabilities or an object with ``predict_proba``.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise ContractError("score_analog needs at least one sample")
    fn = getattr(reference_classifier, "predict_proba", reference_classifier)
    out = fn(samples)
    probs = np.asarray(out[0] if isinstance(out, tuple) else out, dtype=np.float64)
    marginal = probs.mean(axis=0, keepdims=True)
    kl = np.sum(xlogy(probs, probs) - xlogy(probs, np.broadcast_to(marginal, probs.shape)), axis=1)
    return float(math.exp(np.mean(kl)))


# ---------------------------------------------------------------------------
# oversampling baselines


def _class_rows(X: np.ndarray, y: np.ndarray):
    for cls in np.unique(y):
        yield cls, X[y == cls]


def baseline_ros(X, y, target_per_class: int, rng: np.random.Generator):
    """Random oversampling: duplicate rows until every class has ``target_per_class``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    out_x, out_y = [], []
    for cls, rows in _class_rows(X, y):
        if len(rows) == 0:
            raise DataError(f"class {cls} has no rows")
        if target_per_class < len(rows):
            raise ContractError(f"target {target_per_class} below class {cls} count {len(rows)}")
        extra = rows[rng.integers(0, len(rows), size=target_per_class - len(rows))]
        out_x.append(np.vstack([rows, extra]))
        out_y.append(np.full(target_per_class, cls))
    return np.vstack(out_x), np.concatenate(out_y)


def _knn(rows: np.ndarray, k: int) -> np.ndarray:
    d = _sq_dists(rows, rows)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def baseline_smote(X, y, target_per_class: int, k_neighbors: int, rng: np.random.Generator, gap: float | None = None):
    """SMOTE: interpolate towards one of the k nearest same-class neighbours.

    ``gap`` fixes the interpolation fraction instead of drawing it uniformly.
    Singleton classes fall back to random oversampling with a warning.
    """
    if k_neighbors < 1:
        raise ContractError("k_neighbors must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    out_x, out_y = [], []
    for cls, rows in _class_rows(X, y):
        if target_per_class < len(rows):
            raise ContractError(f"target {target_per_class} below class {cls} count {len(rows)}")
        n_new = target_per_class - len(rows)
        if len(rows) < 2:
            warnings.warn(f"class {cls} has a single row; falling back to random oversampling")
            extra = np.repeat(rows, n_new, axis=0)
        else:
            nn = _knn(rows, min(k_neighbors, len(rows) - 1))
            base = rng.integers(0, len(rows), size=n_new)
            pick = nn[base, rng.integers(0, nn.shape[1], size=n_new)]
            u = rng.random((n_new, 1)) if gap is None else np.full((n_new, 1), float(gap))
            extra = rows[base] + u * (rows[pick] - rows[base])
        out_x.append(np.vstack([rows, extra]))
        out_y.append(np.full(target_per_class, cls))
    return np.vstack(out_x), np.concatenate(out_y)
