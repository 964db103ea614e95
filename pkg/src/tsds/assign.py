"""Closed-form probability transport from queries to their nearest candidates.

Three regularizers are supported:

* ``uniform`` -- max gap to the uniform transport; every query spreads its
  mass evenly over its K nearest neighbors, with one K shared by all queries.
* ``kde`` -- density-weighted max gap; mass goes to neighbors in proportion
  to 1/density, up to a shared cap s* on the cumulative inverse density.
* ``tv`` -- total variation to the uniform transport; 1/(MN) to every
  neighbor close enough to the 1-NN, the rest to the 1-NN.

All three consume a `NeighborTable` and emit a sparse `TransportPlan`.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numba
import numpy as np

from .density import DensityTable
from .knn import NeighborTable

log = logging.getLogger(__name__)

REGULARIZERS = ("uniform", "kde", "tv")


@dataclass(frozen=True)
class SelectionConfig:
    alpha: float = 0.6
    c: float = 5.0
    regularizer: str = "kde"
    h: float = 0.1
    kde_neighbors: int = 1000
    prefetch: int = 1000
    tv_threshold: str = "theorem"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.c > 0:
            raise ValueError(f"c must be > 0, got {self.c}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if not self.h > 0:
            raise ValueError(f"h must be > 0, got {self.h}")
        if self.kde_neighbors < 1:
            raise ValueError("kde_neighbors must be >= 1")
        if self.prefetch < 1:
            raise ValueError("prefetch must be >= 1")
        if self.regularizer == "kde" and self.prefetch < 2:
            raise ValueError("the kde regularizer needs prefetch >= 2")
        if self.tv_threshold not in ("theorem", "algorithm"):
            raise ValueError(f"tv_threshold must be 'theorem' or 'algorithm', got {self.tv_threshold!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TransportPlan:
    """Sparse (M, N) transport in CSR layout.

    Row i owns ``positions[indptr[i]:indptr[i+1]]`` with matching ``masses``.
    """

    M: int
    N: int
    indptr: np.ndarray
    positions: np.ndarray
    masses: np.ndarray

    def row(self, i: int):
        a, b = self.indptr[i], self.indptr[i + 1]
        return self.positions[a:b], self.masses[a:b]

    def to_dense(self) -> np.ndarray:
        g = np.zeros((self.M, self.N))
        rows = np.repeat(np.arange(self.M), np.diff(self.indptr))
        np.add.at(g, (rows, self.positions), self.masses)
        return g

    def row_sums(self) -> np.ndarray:
        return np.add.reduceat(self.masses, self.indptr[:-1]) if self.masses.size else np.zeros(self.M)

    def validate(self, tol: float = 1e-9) -> None:
        if (self.masses < 0).any():
            raise ValueError("negative mass in plan")
        if np.abs(self.row_sums() - 1.0 / self.M).max() > tol:
            raise ValueError("row sums deviate from 1/M")
        for i in range(self.M):
            pos, _ = self.row(i)
            if np.unique(pos).size != pos.size:
                raise ValueError(f"row {i} repeats a candidate")

    def identical_to(self, other: "TransportPlan") -> bool:
        return (self.M == other.M and self.N == other.N
                and self.indptr.tobytes() == other.indptr.tobytes()
                and self.positions.tobytes() == other.positions.tobytes()
                and self.masses.tobytes() == other.masses.tobytes())


def _plan_from_rows(M: int, N: int, rows: list) -> TransportPlan:
    lens = [len(p) for p, _ in rows]
    indptr = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    pos = np.concatenate([p for p, _ in rows]).astype(np.int64) if rows else np.zeros(0, np.int64)
    mass = np.concatenate([m for _, m in rows]).astype(np.float64) if rows else np.zeros(0)
    return TransportPlan(M, N, indptr, pos, mass)


@dataclass
class AssignDiagnostics:
    regularizer: str
    K: Optional[int] = None
    s_star: Optional[float] = None
    per_query: Optional[np.ndarray] = None
    truncated: bool = False
    # None means "unknown" (kde without full-repository densities)
    assumption_violated: Optional[bool] = False
    objective_value: Optional[float] = None
    warnings: list = field(default_factory=list)

    def header_fields(self) -> dict:
        out = {"truncated": self.truncated, "assumption_violated": self.assumption_violated}
        if self.K is not None:
            out["K"] = self.K
        if self.s_star is not None:
            out["s_star"] = self.s_star
        return out


def _warn(diag: AssignDiagnostics, msg: str) -> None:
    diag.warnings.append(msg)
    log.warning(msg)


@dataclass(frozen=True)
class ProbabilityAssignment:
    """Sampling probabilities over the candidates that received mass."""

    N: int
    positions: np.ndarray
    probs: np.ndarray
    ids: Optional[np.ndarray] = None

    @property
    def support_size(self) -> int:
        return int(self.positions.size)

    def dense(self) -> np.ndarray:
        p = np.zeros(self.N)
        p[self.positions] = self.probs
        return p

    def with_ids(self, candidate_ids) -> "ProbabilityAssignment":
        return ProbabilityAssignment(self.N, self.positions, self.probs,
                                     np.asarray(candidate_ids, dtype=np.uint64)[self.positions])

    def effective_support(self) -> float:
        p = self.probs[self.probs > 0]
        return float(np.exp(-(p * np.log(p)).sum()))


# --- uniform ----------------------------------------------------------------

def neighborhood_size(distances: np.ndarray, alpha: float, c: float) -> tuple[int, bool]:
    """Shared neighborhood size K for the uniform regularizer.

    K grows from 1 while K < L and
    (alpha/c) * sum_i sum_{k<=K} (d[i,K+1] - d[i,k]) < (1 - alpha) * M.
    Returns (K, truncated), truncated meaning the loop stopped only at L.
    """
    d = np.asarray(distances, dtype=np.float64)
    M, L = d.shape
    if L == 1:
        return 1, alpha < 1
    prefix = np.cumsum(d, axis=1)
    ks = np.arange(1, L)
    # gap[K-1] = sum_i (K * d[i, K] - prefix[i, K-1]) with 0-based columns
    gap = (ks * d[:, 1:] - prefix[:, :-1]).sum(axis=0)
    gap = np.maximum(gap, 0.0)
    go = alpha / c * gap < (1 - alpha) * M
    stops = np.flatnonzero(~go)
    if stops.size:
        return int(stops[0]) + 1, False
    return L, True


def assign_uniform(neighbors: NeighborTable, config: SelectionConfig):
    M, L, N = neighbors.M, neighbors.L, neighbors.n_candidates
    K, hit_l = neighborhood_size(neighbors.distances, config.alpha, config.c)
    diag = AssignDiagnostics("uniform", K=K, per_query=np.full(M, K))
    if hit_l and L < N:
        diag.truncated = True
        _warn(diag, f"neighborhood size reached the prefetch limit L={L}; increase prefetch")
    diag.assumption_violated = bool(K > N / 2)
    if diag.assumption_violated:
        _warn(diag, f"K={K} exceeds N/2={N / 2}; optimality guarantee does not apply")
    mass = 1.0 / (K * M)
    rows = [(neighbors.indices[i, :K], np.full(K, mass)) for i in range(M)]
    return _plan_from_rows(M, N, rows), diag


# --- kde --------------------------------------------------------------------

@numba.njit(cache=True)
def _kde_threshold_search(d, inv_rho, coef, thr):
    """Priority-queue search for s*.

    Returns (s_star, K per query, cumulative inverse density at K per query,
    truncated). A query whose prefetched list runs out ends the search.
    """
    M, L = d.shape
    K = np.zeros(M, np.int64)
    s_at_k = np.zeros(M)
    w = np.zeros(M)
    c = np.zeros(M)
    heap = [(inv_rho[i, 0], i) for i in range(M)]
    heapq.heapify(heap)
    total = 0.0
    s_star = 0.0
    truncated = False
    while len(heap) > 0:
        s, i = heapq.heappop(heap)
        k = K[i]
        K[i] = k + 1
        s_at_k[i] = s
        w[i] += d[i, k] * inv_rho[i, k]
        if k + 1 == L:
            s_star = s
            truncated = True
            break
        # c_i = sum_{l<=K} (d[K+1] - d[l]) / rho[l] = d[K+1] * s_K - w_K
        new_c = d[i, k + 1] * s - w[i]
        if new_c < 0.0:
            new_c = 0.0
        total += new_c - c[i]
        c[i] = new_c
        if coef * total >= thr:
            s_star = s
            break
        heapq.heappush(heap, (s + inv_rho[i, k + 1], i))
    return s_star, K, s_at_k, truncated


def assign_kde(neighbors: NeighborTable, densities: DensityTable, config: SelectionConfig,
               all_densities: Optional[np.ndarray] = None):
    """Inverse-density transport.

    ``all_densities`` (length N) enables the s* <= sum(1/rho)/2 check; without
    it the assumption flag is reported as unknown (None).
    """
    M, L, N = neighbors.M, neighbors.L, neighbors.n_candidates
    if L < 2:
        raise ValueError("kde assignment needs L >= 2")
    rho = np.asarray(densities.values, dtype=np.float64)
    if rho.shape != neighbors.indices.shape:
        raise ValueError("densities are not aligned with the neighbor table")
    if not (rho > 0).all():
        raise ValueError("densities must be positive")
    inv = 1.0 / rho
    d = np.ascontiguousarray(neighbors.distances, dtype=np.float64)
    coef = config.alpha / config.c
    thr = (1 - config.alpha) * M
    s_star, K, s_at_k, ran_out = _kde_threshold_search(d, inv, coef, thr)
    # K_i = max{k : s_k <= s*}: thresholds tied with s* may still sit in the heap
    for i in range(M):
        while K[i] < L and s_at_k[i] + inv[i, K[i]] <= s_star:
            s_at_k[i] += inv[i, K[i]]
            K[i] += 1
    diag = AssignDiagnostics("kde", s_star=float(s_star), per_query=K.copy())
    if ran_out and L < N:
        diag.truncated = True
        _warn(diag, f"threshold search exhausted the L={L} prefetched neighbors; "
                    "s* set to the last popped value")
    if all_densities is not None:
        bound = 0.5 * np.sum(1.0 / np.asarray(all_densities, dtype=np.float64))
        diag.assumption_violated = bool(s_star > bound)
        if diag.assumption_violated:
            _warn(diag, f"s*={s_star:.6g} exceeds half the total inverse density "
                        f"{bound:.6g}; optimality guarantee does not apply")
    else:
        diag.assumption_violated = None

    rows = []
    for i in range(M):
        k = int(K[i])
        mass = 1.0 / (M * s_star * rho[i, :k])
        pos = neighbors.indices[i, :k]
        if k < L:
            # equals 1/M - sum(mass) exactly in real arithmetic; never negative
            residual = (s_star - s_at_k[i]) / (M * s_star)
            if -1e-12 <= residual < 0:
                residual = 0.0
            if residual > 0:
                pos = neighbors.indices[i, :k + 1]
                mass = np.append(mass, residual)
        total = mass.sum()
        if abs(total - 1.0 / M) > 1e-9:
            mass = mass * ((1.0 / M) / total)
        rows.append((pos, mass))
    return _plan_from_rows(M, N, rows), diag


# --- tv ---------------------------------------------------------------------

def assign_tv(neighbors: NeighborTable, config: SelectionConfig):
    M, L, N = neighbors.M, neighbors.L, neighbors.n_candidates
    a, c = config.alpha, config.c
    gap = neighbors.distances[:, 1:] - neighbors.distances[:, :1]
    # alpha * gap < (1 - alpha) * C, halved in "algorithm" mode
    rhs = (1 - a) * c if config.tv_threshold == "theorem" else (1 - a) * c / 2
    qualifies = a * gap < rhs
    count = qualifies.sum(axis=1)
    diag = AssignDiagnostics("tv", per_query=count.copy())
    if L < N and (count == L - 1).any():
        diag.truncated = True
        _warn(diag, f"every prefetched neighbor qualified for some query; L={L} may truncate")
    rows = []
    for i in range(M):
        q = int(count[i])
        # all qualifiers form a prefix because rows are sorted by distance
        head = (N - q) / (M * N)
        assert head > 0, "negative residual at the 1-NN"
        mass = np.concatenate([[head], np.full(q, 1.0 / (M * N))])
        rows.append((neighbors.indices[i, :q + 1], mass))
    return _plan_from_rows(M, N, rows), diag


def assign(neighbors: NeighborTable, config: SelectionConfig,
           densities: Optional[DensityTable] = None, all_densities=None):
    if config.regularizer == "uniform":
        return assign_uniform(neighbors, config)
    if config.regularizer == "tv":
        return assign_tv(neighbors, config)
    if densities is None:
        raise ValueError("kde regularizer needs densities")
    return assign_kde(neighbors, densities, config, all_densities)


def aggregate(plan: TransportPlan) -> ProbabilityAssignment:
    """p_j = sum_i gamma_ij, restricted to candidates with positive mass."""
    p = np.bincount(plan.positions, weights=plan.masses, minlength=plan.N)
    support = np.flatnonzero(p > 0)
    return ProbabilityAssignment(plan.N, support, p[support])


# --- objective ----------------------------------------------------------------

def regularizer_value(gamma: np.ndarray, config: SelectionConfig,
                      densities: Optional[np.ndarray] = None) -> np.ndarray:
    """G(gamma) for a dense plan or a stack of plans with shape (..., M, N)."""
    g = np.asarray(gamma, dtype=np.float64)
    M, N = g.shape[-2:]
    if config.regularizer == "tv":
        return 0.5 * np.abs(g - 1.0 / (M * N)).sum(axis=(-2, -1))
    if config.regularizer == "uniform":
        return M * np.abs(g - 1.0 / (M * N)).max(axis=(-2, -1))
    if densities is None:
        raise ValueError("kde objective needs per-candidate densities")
    rho = np.asarray(densities, dtype=np.float64)
    if rho.shape != (N,):
        raise ValueError(f"densities must have length N={N}")
    ref = (1.0 / rho) / (M * np.sum(1.0 / rho))
    return M * (rho * np.abs(g - ref)).max(axis=(-2, -1))


def dense_objective(gamma, distances, config: SelectionConfig, densities=None):
    """(alpha/C) sum gamma*d + (1-alpha) G(gamma) for dense plan(s)."""
    g = np.asarray(gamma, dtype=np.float64)
    d = np.asarray(distances, dtype=np.float64)
    if g.shape[-2:] != d.shape:
        raise ValueError(f"plan shape {g.shape[-2:]} does not match distances {d.shape}")
    cost = (g * d).sum(axis=(-2, -1))
    return config.alpha / config.c * cost + (1 - config.alpha) * regularizer_value(g, config, densities)


def objective(plan: TransportPlan, distances, densities=None, config: SelectionConfig = None) -> float:
    """Exact objective of a sparse plan against the full (M, N) distance matrix.

    Entries absent from the plan count as zero mass in the regularizer.
    """
    if config is None:
        raise ValueError("config is required")
    d = np.asarray(distances, dtype=np.float64)
    if d.shape != (plan.M, plan.N):
        raise ValueError(f"distances shape {d.shape} != plan shape {(plan.M, plan.N)}")
    return float(dense_objective(plan.to_dense(), d, config, densities))
