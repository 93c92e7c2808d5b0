"""Task metrics and the cross-metric normalization used for model selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from m3h.errors import DomainError

METRIC_FOR = {"binary": "auroc", "multiclass": "avg_auroc", "regression": "r2", "cluster": "silhouette"}


@dataclass(frozen=True)
class ScoreReport:
    task: str
    metric: str
    raw: float
    normalized: float
    n_evaluated: int


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise DomainError(f"{scores.size} scores vs {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def averaged_auroc(log_probs, labels) -> float:
    """One-vs-rest AUROC averaged over the classes present in ``labels``."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int).reshape(-1)
    if log_probs.ndim != 2 or log_probs.shape[0] != labels.size:
        raise DomainError(f"log_probs shape {log_probs.shape} does not match {labels.size} labels")
    if labels.size < 2:
        raise DomainError("averaged AUROC needs n >= 2")
    present = np.unique(labels)
    if present.size < 2:
        raise DomainError("averaged AUROC needs at least 2 classes present")
    return float(np.mean([auroc(log_probs[:, c], (labels == c).astype(int)) for c in present]))


def r_squared(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape or target.size < 2:
        raise DomainError("R^2 needs two equal-length vectors with n >= 2")
    ss_tot = float(((target - target.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise DomainError("R^2 undefined for a constant target")
    return 1.0 - float(((target - pred) ** 2).sum()) / ss_tot


def silhouette(points, assignments) -> float:
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(assignments).reshape(-1)
    n = len(points)
    clusters, counts = np.unique(labels, return_counts=True)
    if not 2 <= clusters.size <= n - 1:
        raise DomainError(f"silhouette needs 2 <= clusters <= n-1, got {clusters.size} clusters for n={n}")
    dist = cdist(points, points)
    onehot = labels[:, None] == clusters[None, :]
    sums = dist @ onehot
    own = onehot.argmax(1)
    own_count = counts[own]
    a = np.where(own_count > 1, sums[np.arange(n), own] / np.maximum(own_count - 1, 1), 0.0)
    mean_other = sums / counts[None, :]
    mean_other[np.arange(n), own] = np.inf
    b = mean_other.min(1)
    denom = np.maximum(a, b)
    s = np.where((own_count > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def normalize_score(kind: str, raw: float) -> float:
    """Map a metric onto [0, 1] so heterogeneous tasks can be averaged."""
    if kind in ("auroc", "avg_auroc"):
        return float(raw)
    if kind == "r2":
        return float(min(max(raw, 0.0), 1.0))
    if kind == "silhouette":
        return (float(raw) + 1.0) / 2.0
    raise DomainError(f"unknown metric kind {kind!r}")
