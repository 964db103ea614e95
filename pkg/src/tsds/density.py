"""Epanechnikov kernel density estimates over prefetched candidates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .knn import NeighborTable
from .store import EmbeddingSet

FULL_KDE_CAP = 10_000
PAIR_SEARCH_DIM = 12


def epanechnikov_weight(distance, h):
    """max(1 - distance^2 / h^2, 0); accepts scalars or arrays."""
    if not h > 0:
        raise ValueError(f"kernel size h must be > 0, got {h}")
    d = np.asarray(distance, dtype=np.float64)
    w = np.maximum(1.0 - (d * d) / (h * h), 0.0)
    return float(w) if w.ndim == 0 else w


def _weights_from_sq(d2: np.ndarray, h: float) -> np.ndarray:
    return np.maximum(1.0 - d2 / (h * h), 0.0)


@dataclass(frozen=True)
class DensityTable:
    """Densities aligned with a NeighborTable.

    ``values[i, k]`` is the density of candidate ``indices[i, k]``;
    ``positions``/``rho`` hold the same numbers once per unique candidate.
    """

    values: np.ndarray
    positions: np.ndarray
    rho: np.ndarray
    h: float
    I: int

    @classmethod
    def from_vector(cls, neighbors: NeighborTable, rho_by_position, h: float = math.nan,
                    I: int = 0) -> "DensityTable":
        """Build a table from a per-candidate density vector of length N."""
        rho_by_position = np.asarray(rho_by_position, dtype=np.float64)
        if rho_by_position.shape != (neighbors.n_candidates,):
            raise ValueError("density vector must have one entry per candidate")
        positions = np.unique(neighbors.indices)
        return cls(rho_by_position[neighbors.indices], positions,
                   rho_by_position[positions], h, I)


def _capped_sums(rows: np.ndarray, weights: np.ndarray, mult: np.ndarray,
                 n_rows: int, I: int) -> np.ndarray:
    """Per row, the exactly-rounded sum of its I largest weights.

    Each (row, weight) entry stands for ``mult`` identical points.
    """
    order = np.lexsort((-weights, rows))
    rows, weights, mult = rows[order], weights[order], mult[order]
    starts = np.searchsorted(rows, np.arange(n_rows + 1))
    out = np.empty(n_rows)
    for r in range(n_rows):
        a, b = starts[r], starts[r + 1]
        left = I
        terms = []
        for w, m in zip(weights[a:b], mult[a:b]):
            take = min(int(m), left)
            terms.extend([float(w)] * take)
            left -= take
            if left == 0:
                break
        out[r] = math.fsum(terms)
    return out


def _pairs_within(x: np.ndarray, h: float) -> np.ndarray:
    """Candidate pairs (superset) of rows closer than h.

    kd-trees stop pruning in high dimension, so the search runs in the span of
    the leading principal axes. An orthonormal projection never increases a
    distance, hence no true pair is lost; callers re-check true distances.
    """
    if x.shape[0] < 2:
        return np.zeros((0, 2), dtype=np.int64)
    y = x
    if x.shape[1] > PAIR_SEARCH_DIM:
        centered = x - x.mean(axis=0)
        _, vecs = np.linalg.eigh(centered.T @ centered)
        y = centered @ vecs[:, ::-1][:, :PAIR_SEARCH_DIM]
    return cKDTree(y).query_pairs(r=h * (1 + 1e-6), output_type="ndarray")


def kde_over(points: np.ndarray, I: int, h: float) -> np.ndarray:
    """Density of every row of ``points`` against the same point set.

    Each point sums kernel weights of its I nearest points in the set,
    itself included. Exact duplicate rows are collapsed for the neighbor
    search but still count individually.
    """
    if not h > 0:
        raise ValueError(f"kernel size h must be > 0, got {h}")
    if I < 1:
        raise ValueError("I must be >= 1")
    x = np.ascontiguousarray(points, dtype=np.float64)
    reps, inverse, counts = np.unique(x, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    U = reps.shape[0]
    pairs = _pairs_within(reps, h)
    if pairs.size:
        a, b = pairs[:, 0], pairs[:, 1]
        diff = reps[a] - reps[b]
        w = _weights_from_sq((diff * diff).sum(axis=1), h)
        keep = w > 0
        a, b, w = a[keep], b[keep], w[keep]
    else:
        a = b = np.zeros(0, dtype=np.int64)
        w = np.zeros(0)
    self_rows = np.arange(U)
    rows = np.concatenate([self_rows, a, b])
    cols = np.concatenate([self_rows, b, a])
    weights = np.concatenate([np.ones(U), w, w])
    rho_rep = _capped_sums(rows, weights, counts[cols], U, I)
    return rho_rep[inverse]


def compute_kde(neighbors: NeighborTable, candidates: EmbeddingSet, I: int, h: float) -> DensityTable:
    """Densities of every prefetched candidate, estimated within the prefetched pool.

    The pool is the set of unique candidate positions appearing in any
    neighbor row.
    """
    if neighbors.indices.size == 0:
        raise ValueError("empty neighbor table")
    positions = np.unique(neighbors.indices)
    rho = kde_over(candidates.vectors[positions], I, h)
    values = rho[np.searchsorted(positions, neighbors.indices)]
    return DensityTable(values, positions, rho, float(h), int(I))


def compute_kde_full(candidates, h: float, cap: int = FULL_KDE_CAP) -> np.ndarray:
    """All-pairs density of every candidate (brute force, desk scale)."""
    if not h > 0:
        raise ValueError(f"kernel size h must be > 0, got {h}")
    x = candidates.vectors if isinstance(candidates, EmbeddingSet) else np.asarray(candidates)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n > cap:
        raise ValueError(f"{n} candidates exceed the all-pairs cap of {cap}")
    rho = np.empty(n)
    for j in range(n):
        diff = x - x[j]
        w = _weights_from_sq((diff * diff).sum(axis=1), h)
        w = w[w > 0]
        rho[j] = math.fsum(np.sort(w)[::-1].tolist())
    return rho


def near_duplicate_distances(es: EmbeddingSet, ids) -> dict:
    """Pairwise distance summary for a hand-picked group of near-duplicates.

    The maximum is a reasonable kernel size: it is the smallest h under which
    every listed pair still falls inside the kernel.
    """
    wanted = set(int(i) for i in ids)
    rows = [k for k, i in enumerate(es.ids.tolist()) if i in wanted]
    if len(rows) < 2:
        raise ValueError("need at least two listed ids present in the set")
    x = es.vectors[rows].astype(np.float64)
    iu = np.triu_indices(len(rows), k=1)
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))[iu]
    return {"pairs": int(d.size), "min": float(d.min()), "median": float(np.median(d)),
            "max": float(d.max()), "suggested_h": float(d.max())}
