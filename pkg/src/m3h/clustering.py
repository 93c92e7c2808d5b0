"""Seeded k-means (k-means++ init, Lloyd iterations) for autoencoder latents."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from m3h.errors import DomainError


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    history: list[float] = field(default_factory=list)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx : idx + 1])[:, 0])
    return np.array(centers)


def lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    centroids = centroids.copy()
    k = len(centroids)
    history = []
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        assign = d.argmin(1)
        history.append(float(d[np.arange(len(x)), assign].sum()))
        new = centroids.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(0)
            else:
                # empty cluster: reseed at the point farthest from its centroid
                far = int(d[np.arange(len(x)), assign].argmax())
                new[j] = x[far]
                assign[far] = j
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(x, centroids)
    assign = d.argmin(1)
    inertia = float(d[np.arange(len(x)), assign].sum())
    history.append(inertia)
    return KMeansResult(assign, centroids, inertia, it, history)


def kmeans(
    latents: np.ndarray,
    k: int,
    seed: int = 0,
    restarts: int = 10,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> KMeansResult:
    """Best-inertia Lloyd run over ``restarts`` k-means++ initializations."""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2:
        raise DomainError(f"latents must be 2-D, got shape {x.shape}")
    if not 2 <= k < len(x):
        raise DomainError(f"k must satisfy 2 <= k < n={len(x)}, got {k}")
    if restarts < 1:
        raise DomainError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        result = lloyd(x, _plus_plus(x, k, rng), max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def assign(latents: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return _sq_dists(np.asarray(latents, dtype=np.float64), centroids).argmin(1)
