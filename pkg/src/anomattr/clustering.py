"""Correlation-profile clustering of features: Pearson matrix, k-means on its
rows, elbow selection of k, silhouette validation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import KOutOfRange, SingleCluster, TooFewRows, ValidationError
from .table import TimeTable

MAX_ITER = 300


@dataclass
class CorrelationMatrix:
    names: list[str]
    R: np.ndarray


@dataclass
class ClusterAssignment:
    k: int
    assignment: dict[str, int]
    silhouette: float | None = None
    inertia: float = 0.0

    def members(self, feature_names: list[str] | None = None) -> list[list[int]]:
        """Feature indices (into `feature_names`) per cluster id."""
        names = feature_names if feature_names is not None else list(self.assignment)
        groups: list[list[int]] = [[] for _ in range(self.k)]
        for i, n in enumerate(names):
            groups[self.assignment[n]].append(i)
        return groups

    def to_json(self) -> dict:
        return {"k": self.k, "silhouette": self.silhouette, "inertia": self.inertia,
                "assignment": dict(self.assignment)}

    @classmethod
    def from_json(cls, doc: dict) -> "ClusterAssignment":
        assignment = {str(k): int(v) for k, v in doc["assignment"].items()}
        k = int(doc["k"])
        if sorted(set(assignment.values())) != list(range(k)):
            raise ValidationError("cluster assignment must use every id in [0, k)")
        return cls(k, assignment, doc.get("silhouette"), float(doc.get("inertia", 0.0)))


def correlation_matrix(table: TimeTable) -> CorrelationMatrix:
    """Pearson correlation between feature columns.

    Constant columns correlate 0 with every other column.
    """
    if table.n_rows < 2:
        raise TooFewRows("correlation needs at least 2 rows")
    X = table.values - table.values.mean(axis=0)
    ss = (X * X).sum(axis=0)
    F = table.n_features
    R = np.eye(F)
    for i in range(F):
        for j in range(i + 1, F):
            denom = np.sqrt(ss[i] * ss[j])
            r = float(X[:, i] @ X[:, j] / denom) if denom > 0 else 0.0
            R[i, j] = R[j, i] = min(1.0, max(-1.0, r))
    return CorrelationMatrix(list(table.feature_names), R)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return (diff * diff).sum(axis=2)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    for _ in range(1, k):
        d2 = _sq_dists(points, points[chosen]).min(axis=1)
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = [i for i in range(n) if i not in chosen]
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
    return points[chosen].copy()


def _repair_empty(points, labels, centers, k) -> None:
    for c in range(k):
        if np.any(labels == c):
            continue
        d2 = ((points - centers[labels]) ** 2).sum(axis=1)
        counts = np.bincount(labels, minlength=k)
        d2[counts[labels] <= 1] = -1.0  # never empty another cluster
        far = int(np.argmax(d2))
        labels[far] = c
        centers[c] = points[far]


def lloyd(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = MAX_ITER):
    """One k-means++ seeded Lloyd run. Returns (labels, centers, inertia history)."""
    centers = _kmeanspp(points, k, rng)
    labels = np.full(len(points), -1)
    history = []
    for _ in range(max_iter):
        new = np.argmin(_sq_dists(points, centers), axis=1)
        _repair_empty(points, new, centers, k)
        for c in range(k):
            centers[c] = points[new == c].mean(axis=0)
        history.append(float(((points - centers[new]) ** 2).sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, centers, history


def kmeans_features(corr: CorrelationMatrix, k: int, seed: int = 0, n_init: int = 10) -> ClusterAssignment:
    """k-means over the rows of R, best of `n_init` seeded k-means++ starts."""
    F = len(corr.names)
    if not 1 <= k <= F:
        raise KOutOfRange(f"k={k} outside [1, {F}]")
    points = np.asarray(corr.R, dtype=np.float64)
    best = None
    for child in np.random.SeedSequence(seed).spawn(n_init):
        labels, _, hist = lloyd(points, k, np.random.default_rng(child))
        if best is None or hist[-1] < best[1] - 1e-12:
            best = (labels, hist[-1])
    labels, inertia = best
    # relabel by first appearance so ids are canonical
    remap: dict[int, int] = {}
    for lab in labels:
        remap.setdefault(int(lab), len(remap))
    assignment = {n: remap[int(lab)] for n, lab in zip(corr.names, labels)}
    result = ClusterAssignment(k, assignment, None, inertia)
    if k >= 2:
        result.silhouette = silhouette(corr, result)
    return result


def silhouette(corr: CorrelationMatrix, assignment: ClusterAssignment) -> float:
    if assignment.k < 2:
        raise SingleCluster("silhouette needs at least two clusters")
    points = np.asarray(corr.R, dtype=np.float64)
    labels = np.array([assignment.assignment[n] for n in corr.names])
    dist = np.sqrt(np.maximum(_sq_dists(points, points), 0.0))
    scores = np.zeros(len(labels))
    for i, lab in enumerate(labels):
        own = labels == lab
        if own.sum() <= 1:
            continue  # singleton convention: 0
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, labels == c].mean() for c in np.unique(labels) if c != lab)
        m = max(a, b)
        scores[i] = 0.0 if m == 0 else (b - a) / m
    return float(scores.mean())


def elbow_index(inertias: list[float]) -> int | None:
    """Index of the max second difference over interior points (ties -> first)."""
    if len(inertias) < 3:
        return None
    I = np.asarray(inertias)
    d2 = I[:-2] - 2 * I[1:-1] + I[2:]
    return int(np.argmax(d2)) + 1


def select_k(corr: CorrelationMatrix, k_min: int, k_max: int, seed: int = 0) -> ClusterAssignment:
    F = len(corr.names)
    if not 1 <= k_min < k_max <= F:
        raise KOutOfRange(f"need 1 <= k_min < k_max <= {F}, got ({k_min}, {k_max})")
    fits = [kmeans_features(corr, k, seed) for k in range(k_min, k_max + 1)]
    pos = elbow_index([f.inertia for f in fits])
    return fits[0 if pos is None else pos]
