"""Zone regionalization: k-means and connectivity-constrained Ward clustering
scored by the Calinski-Harabasz variance ratio.

Three candidate methods are evaluated over a k grid: plain k-means, Ward on a
k-nearest-neighbor graph, and Ward on the contiguity graph. The winner is the
(method, k) cell with the highest score; ties go to smaller k, then to the
method order above.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._util import parallel_map, substream
from .errors import (
    DegenerateColumnError,
    DisconnectedGraphWarning,
    KTooLargeError,
    UndefinedScoreError,
)
from .geodata import SpatialWeights, ZoneSet

METHOD_ORDER = ("KMeans", "WardKNN", "WardSparse")


def standardize(X: np.ndarray) -> np.ndarray:
    """Column z-scores with population (ddof=0) standard deviation."""
    X = np.asarray(X, dtype=float)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    if np.any(sd == 0):
        bad = int(np.argmax(sd == 0))
        raise DegenerateColumnError(f"column {bad} is constant; cannot standardize")
    return (X - mu) / sd


# --- k-means ---


def _seed_greedy(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy D^2 seeding: candidates drawn with probability proportional to
    the current squared distance to the nearest chosen center; the candidate
    that most reduces total potential wins."""
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    n_cand = 2 + int(math.log(k)) if k > 1 else 1
    for c in range(1, k):
        total = float(d2.sum())
        if total > 0:
            cand = rng.choice(n, size=n_cand, p=d2 / total)
        else:
            cand = rng.integers(n, size=n_cand)
        best_pot = None
        for ci in cand:
            trial = np.minimum(d2, np.sum((X - X[int(ci)]) ** 2, axis=1))
            pot = float(trial.sum())
            if best_pot is None or pot < best_pot:
                best_pot, best_center, best_d2 = pot, X[int(ci)], trial
        centers[c] = best_center
        d2 = best_d2
    return centers


def _lloyd(X: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 300, tol: float = 1e-6):
    """One k-means run. Returns (labels, inertia, inertia trace)."""
    n = X.shape[0]
    centers = _seed_greedy(X, k, rng)
    trace: list[float] = []
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)  # ties: lowest center index
        # empty-cluster repair: hand the cluster the point farthest from its
        # current center (deterministic; monotone because the point's cost
        # drops to zero)
        present = np.bincount(new_labels, minlength=k)
        for empty in np.flatnonzero(present == 0):
            cost = d2[np.arange(n), new_labels].copy()
            cost[present[new_labels] <= 1] = -1  # keep donors non-empty
            far = int(np.argmax(cost))
            present[new_labels[far]] -= 1
            new_labels[far] = empty
            present[empty] += 1
            centers[empty] = X[far]
            d2[:, empty] = np.sum((X - X[far]) ** 2, axis=1)
        for c in range(k):
            centers[c] = X[new_labels == c].mean(axis=0)
        inertia = float(np.sum((X - centers[new_labels]) ** 2))
        if trace and inertia > trace[-1] * (1 + 1e-12) + 1e-12:
            raise RuntimeError("k-means inertia increased; invariant violated")
        converged = bool(trace) and (np.array_equal(labels, new_labels)
                                     or trace[-1] - inertia <= tol)
        trace.append(inertia)
        labels = new_labels
        if converged:
            break
    return labels, trace[-1], trace


def kmeans(X: np.ndarray, k: int, seed: int = 0, n_restarts: int = 10,
           max_iter: int = 300, tol: float = 1e-6) -> tuple[np.ndarray, float]:
    """Best-of-``n_restarts`` Lloyd k-means; ties keep the earliest restart."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise KTooLargeError(f"k must be in [1, {n}], got {k}")
    best = None
    for r in range(n_restarts):
        rng = substream(seed, 211, r)
        labels, inertia, _ = _lloyd(X, k, rng, max_iter=max_iter, tol=tol)
        if best is None or inertia < best[1]:
            best = (labels, inertia)
    return _canonical_labels(best[0]), best[1]


def _canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters 0..k-1 in order of first appearance."""
    mapping: dict[int, int] = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        if lab not in mapping:
            mapping[int(lab)] = len(mapping)
        out[i] = mapping[int(lab)]
    return out


# --- Ward agglomeration ---


def _ward_linkage(X: np.ndarray, connectivity: SpatialWeights | None):
    """Greedy Ward merge sequence under an optional adjacency constraint.

    Merge costs are maintained with the Lance-Williams recurrence on squared
    Euclidean distances (twice the within-scatter increase); merging unions
    the two clusters' adjacency rows. Returns (merges, n_components) where
    each merge is (slot_kept, slot_dropped).
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    diff = X[:, None, :] - X[None, :, :]
    M = np.sum(diff * diff, axis=2)
    np.fill_diagonal(M, np.inf)
    if connectivity is None:
        A = np.ones((n, n), dtype=bool)
    else:
        if connectivity.n != n:
            raise ValueError("connectivity size mismatch")
        A = np.zeros((n, n), dtype=bool)
        A[connectivity.i, connectivity.j] = True
        A |= A.T
    np.fill_diagonal(A, False)
    active = np.ones(n, dtype=bool)
    sizes = np.ones(n)
    merges: list[tuple[int, int]] = []
    pair_ok = A & active[:, None] & active[None, :]
    for _ in range(n - 1):
        costs = np.where(pair_ok, M, np.inf)
        flat = int(np.argmin(costs))
        i, j = divmod(flat, n)
        if not np.isfinite(costs[i, j]):
            break  # disconnected: only cross-component merges remain
        if i > j:
            i, j = j, i
        m = active.copy()
        m[i] = m[j] = False
        t = sizes[i] + sizes[j] + sizes[m]
        M[i, m] = ((sizes[i] + sizes[m]) * M[i, m]
                   + (sizes[j] + sizes[m]) * M[j, m]
                   - sizes[m] * M[i, j]) / t
        M[m, i] = M[i, m]
        sizes[i] += sizes[j]
        active[j] = False
        A[i] |= A[j]
        A[:, i] |= A[:, j]
        A[i, i] = False
        pair_ok = A & active[:, None] & active[None, :]
        merges.append((i, j))
    return merges, n - len(merges)


def _cut_linkage(n: int, merges: Sequence[tuple[int, int]], k: int) -> np.ndarray:
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in merges[: n - k]:
        parent[find(j)] = find(i)
    roots = [find(a) for a in range(n)]
    return _canonical_labels(np.asarray(roots))


def ward_cluster(X: np.ndarray, k: int,
                 connectivity: SpatialWeights | None = None) -> np.ndarray:
    """Agglomerative Ward labels; merges happen only between adjacent clusters
    when a connectivity graph is given. A disconnected graph caps the merge
    sequence at its components (with a warning) when k asks for fewer."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise KTooLargeError(f"k must be in [1, {n}], got {k}")
    merges, n_components = _ward_linkage(X, connectivity)
    if k < n_components:
        warnings.warn(
            f"connectivity graph has {n_components} components; returning "
            f"{n_components} clusters instead of {k}",
            DisconnectedGraphWarning, stacklevel=2)
        k = n_components
    return _cut_linkage(n, merges, k)


# --- cluster validity ---


def calinski_harabasz(X: np.ndarray, labels: Sequence[int]) -> float:
    """Variance-ratio score: between-cluster over within-cluster scatter,
    each scaled by its degrees of freedom."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    n = X.shape[0]
    uniq = np.unique(labels)
    k = len(uniq)
    if k < 2 or k >= n:
        raise UndefinedScoreError(f"score undefined for k={k} with n={n}")
    grand = X.mean(axis=0)
    between = 0.0
    within = 0.0
    for lab in uniq:
        pts = X[labels == lab]
        c = pts.mean(axis=0)
        between += len(pts) * float(np.sum((c - grand) ** 2))
        within += float(np.sum((pts - c) ** 2))
    if within == 0:
        raise UndefinedScoreError("zero within-cluster scatter")
    return (between / (k - 1)) / (within / (n - k))


# --- method selection ---


@dataclass
class RegionAssignment:
    labels: np.ndarray
    k: int
    method: str
    ch_score: float
    seed: int
    region_names: dict[int, str] = field(default_factory=dict)

    def name_of(self, label: int) -> str:
        return self.region_names.get(int(label), f"Region{int(label) + 1:02d}")


@dataclass(frozen=True)
class ScoreCell:
    method: str
    k: int
    ch: float  # NaN when the cell could not be evaluated


def select_regionalization(X: np.ndarray,
                           knn_conn: SpatialWeights | None = None,
                           queen_conn: SpatialWeights | None = None,
                           k_min: int = 3, k_max: int = 10, seed: int = 0,
                           n_restarts: int = 10, threads: int = 1
                           ) -> tuple[RegionAssignment, list[ScoreCell]]:
    """Evaluate the method-by-k grid and return the winning assignment plus
    the full score grid."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if k_min < 2 or k_max < k_min:
        raise ValueError("need 2 <= k_min <= k_max")
    ks = [k for k in range(k_min, k_max + 1) if k <= n - 1]
    if not ks:
        raise KTooLargeError(f"no feasible k in [{k_min}, {k_max}] for n={n}")

    linkages: dict[str, tuple] = {}
    for method, conn in (("WardKNN", knn_conn), ("WardSparse", queen_conn)):
        if conn is not None:
            linkages[method] = _ward_linkage(X, conn)

    def evaluate(cell: tuple[str, int]) -> ScoreCell:
        method, k = cell
        try:
            if method == "KMeans":
                labels, _ = kmeans(X, k, seed=seed, n_restarts=n_restarts)
            else:
                merges, n_comp = linkages[method]
                if k < n_comp:
                    return ScoreCell(method, k, float("nan"))
                labels = _cut_linkage(n, merges, k)
            return ScoreCell(method, k, calinski_harabasz(X, labels))
        except UndefinedScoreError:
            return ScoreCell(method, k, float("nan"))

    grid_keys = [(m, k) for m in METHOD_ORDER
                 for k in ks if m == "KMeans" or m in linkages]
    grid = parallel_map(evaluate, grid_keys, threads=threads)

    scored = [c for c in grid if c.ch == c.ch]
    if not scored:
        raise UndefinedScoreError("no (method, k) cell produced a defined score")
    best = min(scored, key=lambda c: (-c.ch, c.k, METHOD_ORDER.index(c.method)))
    if best.method == "KMeans":
        labels, _ = kmeans(X, best.k, seed=seed, n_restarts=n_restarts)
    else:
        merges, _ = linkages[best.method]
        labels = _cut_linkage(n, merges, best.k)
    assignment = RegionAssignment(labels=_canonical_labels(labels), k=best.k,
                                  method=best.method, ch_score=best.ch,
                                  seed=seed)
    return assignment, grid


def name_regions(assignment: RegionAssignment, zones: ZoneSet) -> dict[int, str]:
    """Name clusters by mean centroid distance from the study-area center:
    nearest first. Three clusters get the Central / Intermediate / Peripheral
    names; other k values get radius-ordered RegionNN names."""
    pts = zones.centroids()
    center = pts.mean(axis=0)
    radii = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])
    labs = np.unique(assignment.labels)
    mean_r = {int(l): float(radii[assignment.labels == l].mean()) for l in labs}
    ordered = sorted(mean_r, key=lambda l: (mean_r[l], l))
    if len(ordered) == 3:
        names = ("Central", "Intermediate", "Peripheral")
        mapping = {lab: names[pos] for pos, lab in enumerate(ordered)}
    else:
        mapping = {lab: f"Region{pos + 1:02d}" for pos, lab in enumerate(ordered)}
    assignment.region_names = mapping
    return mapping
