"""Per-class statistics of representations and pseudo-replay sampling.

Each class keeps either a Gaussian (full or diagonal covariance) or a
small centroid set fitted by k-means. Two stores exist side by side: one
for prompt-free representations and one for prompt-instructed ones.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

FULL_GAUSSIAN = "full-gaussian"
DIAG_GAUSSIAN = "diag-gaussian"
MULTI_CENTROID = "multi-centroid"
MODES = (FULL_GAUSSIAN, DIAG_GAUSSIAN, MULTI_CENTROID)

RIDGE = 1e-4
KMEANS_MAX_CENTROIDS = 10
KMEANS_ITERS = 50


@dataclass
class ClassStats:
    mode: str
    mean: np.ndarray                     # [D]
    cov: np.ndarray | None = None        # [D, D] (full) or [D] variances (diag)
    centroids: np.ndarray | None = None  # [K, D]
    counts: np.ndarray | None = None     # [K] members per centroid
    noise_scale: float = 0.0
    n_samples: int = 0
    _chol: np.ndarray | None = field(default=None, repr=False)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.mode.encode())
        for arr in (self.mean, self.cov, self.centroids, self.counts):
            if arr is not None:
                h.update(np.ascontiguousarray(arr).tobytes())
        h.update(np.float64(self.noise_scale).tobytes())
        return h.hexdigest()


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Pairwise squared distances [n, k] without the [n, k, D] blow-up."""
    d2 = (
        (points ** 2).sum(axis=1)[:, None]
        - 2.0 * points @ centers.T
        + (centers ** 2).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator):
    """Plain k-means with k-means++ seeding; empty clusters are dropped."""
    n = points.shape[0]
    k = min(k, n)
    centers = [points[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dists(points, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            break
        centers.append(points[rng.choice(n, p=d2 / total)])
    centers = np.array(centers)
    assign = np.full(n, -1, dtype=np.intp)
    for _ in range(KMEANS_ITERS):
        new_assign = _sq_dists(points, centers).argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(len(centers)):
            members = points[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    counts = np.bincount(assign, minlength=len(centers))
    keep = counts > 0
    centers, counts = centers[keep], counts[keep]
    assign = _sq_dists(points, centers).argmin(axis=1)
    return centers, counts, assign


def fit_class_stats(reps: np.ndarray, mode: str = FULL_GAUSSIAN,
                    rng: np.random.Generator | None = None) -> ClassStats:
    """Fit one class's representation cloud.

    Gaussian modes need at least two vectors; the covariance gets a ridge
    of RIDGE * I so Cholesky always succeeds. Centroid mode runs k-means
    with at most KMEANS_MAX_CENTROIDS clusters and records the mean
    within-cluster standard deviation as its sampling noise.
    """
    if mode not in MODES:
        raise ValueError(f"unknown stats mode {mode!r}")
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 2:
        raise ValueError("expected a [N, D] array of representations")
    n = reps.shape[0]
    if mode in (FULL_GAUSSIAN, DIAG_GAUSSIAN) and n < 2:
        raise ValueError(f"gaussian statistics need at least 2 samples, got {n}")
    if n < 1:
        raise ValueError("need at least one representation")

    mean = reps.mean(axis=0)
    if mode == FULL_GAUSSIAN:
        centered = reps - mean
        cov = centered.T @ centered / (n - 1)
        cov += RIDGE * np.eye(reps.shape[1])
        return ClassStats(mode, mean, cov=cov, n_samples=n)
    if mode == DIAG_GAUSSIAN:
        var = reps.var(axis=0, ddof=1) + RIDGE
        return ClassStats(mode, mean, cov=var, n_samples=n)

    rng = rng or np.random.default_rng(0)
    centers, counts, assign = _kmeans(reps, KMEANS_MAX_CENTROIDS, rng)
    within = reps - centers[assign]
    noise = float(np.sqrt(np.mean(within ** 2))) if n > len(centers) else 0.0
    return ClassStats(MULTI_CENTROID, mean, centroids=centers, counts=counts,
                      noise_scale=noise, n_samples=n)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Cholesky factor, falling back to an eigen square root for merely
    positive SEMI-definite matrices (e.g. an exactly zero covariance)."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        if vals.min() < -1e-6:
            raise ArithmeticError("covariance is not positive semi-definite")
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def class_mean(stats: ClassStats) -> np.ndarray:
    """Class mean; in centroid mode the count-weighted centroid average."""
    if stats.mode == MULTI_CENTROID:
        w = stats.counts / stats.counts.sum()
        return w @ stats.centroids
    return stats.mean


def sample_pseudo(stats: ClassStats, n: int,
                  rng: np.random.Generator | int) -> np.ndarray:
    """Draw n pseudo representations from the stored distribution."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    d = stats.mean.shape[0]
    if stats.mode == FULL_GAUSSIAN:
        if stats._chol is None:
            stats._chol = _psd_factor(stats.cov)
        z = rng.standard_normal((n, d))
        return stats.mean + z @ stats._chol.T
    if stats.mode == DIAG_GAUSSIAN:
        z = rng.standard_normal((n, d))
        return stats.mean + z * np.sqrt(stats.cov)
    idx = rng.integers(0, len(stats.centroids), size=n)
    noise = rng.standard_normal((n, d)) * stats.noise_scale
    return stats.centroids[idx] + noise


class StatsStore:
    """Class-keyed stats for uninstructed and instructed representations."""

    def __init__(self):
        self.uninstructed: dict[int, ClassStats] = {}
        self.instructed: dict[int, ClassStats] = {}
        self.task_classes: dict[int, tuple[int, ...]] = {}

    def register_task(self, task: int, classes) -> None:
        classes = tuple(int(c) for c in classes)
        for t, cs in self.task_classes.items():
            overlap = set(cs) & set(classes)
            if t != task and overlap:
                raise ValueError(
                    f"classes {sorted(overlap)} already belong to task {t}")
        self.task_classes[task] = classes

    def classes_of(self, task: int) -> tuple[int, ...]:
        return self.task_classes[task]

    def all_classes(self, upto_task: int | None = None) -> list[int]:
        out = []
        for t in sorted(self.task_classes):
            if upto_task is None or t <= upto_task:
                out.extend(self.task_classes[t])
        return out

    def checksum(self, kind: str, classes=None) -> str:
        """Checksum of one store ('u' or 'i'), optionally restricted."""
        table = self.uninstructed if kind == "u" else self.instructed
        h = hashlib.sha256()
        for c in sorted(table) if classes is None else sorted(classes):
            h.update(str(c).encode())
            h.update(table[c].checksum().encode())
        return h.hexdigest()
