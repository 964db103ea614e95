"""Exact and two-stage (inverted-list) K-nearest-neighbor retrieval.

Distances are Euclidean. Rows of a `NeighborTable` are sorted by
(distance, candidate position), so ties always resolve to the lower position.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from .store import EmbeddingSet

log = logging.getLogger(__name__)

# rows of float32 scores held in memory at once during the exact scan
_SCAN_BUDGET = 32_000_000


@dataclass(frozen=True)
class NeighborTable:
    """Per-query sorted neighbor positions and distances, shape (M, L)."""

    indices: np.ndarray
    distances: np.ndarray
    n_candidates: int

    @property
    def M(self) -> int:
        return self.indices.shape[0]

    @property
    def L(self) -> int:
        return self.indices.shape[1]

    def validate(self) -> None:
        if self.indices.shape != self.distances.shape or self.indices.ndim != 2:
            raise ValueError("indices and distances must share an (M, L) shape")
        if self.L > self.n_candidates:
            raise ValueError("L exceeds candidate count")
        if (self.distances < 0).any() or not np.isfinite(self.distances).all():
            raise ValueError("distances must be finite and non-negative")
        step = np.diff(self.distances, axis=1)
        if (step < 0).any():
            raise ValueError("distance rows must be non-decreasing")
        tied = step == 0
        if (np.diff(self.indices, axis=1)[tied] <= 0).any():
            raise ValueError("ties must be ordered by ascending candidate position")
        srt = np.sort(self.indices, axis=1)
        if (np.diff(srt, axis=1) == 0).any():
            raise ValueError("neighbor positions within a row must be distinct")


def neighbors_from_distances(distances, L: Optional[int] = None) -> NeighborTable:
    """Rank a dense (M, N) distance matrix into a NeighborTable."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError("distance matrix must be 2-d")
    M, N = d.shape
    L = N if L is None else L
    if not 1 <= L <= N:
        raise ValueError(f"L={L} must be in [1, {N}]")
    pos = np.arange(N)
    idx = np.empty((M, L), dtype=np.int64)
    for i in range(M):
        idx[i] = np.lexsort((pos, d[i]))[:L]
    return NeighborTable(idx, np.take_along_axis(d, idx, axis=1), N)


def sq_dists(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances from q to each row, in float64."""
    diff = rows.astype(np.float64) - q.astype(np.float64)
    return (diff * diff).sum(axis=1)


def _rank(candidates: np.ndarray, positions: np.ndarray, q: np.ndarray, L: int):
    d2 = sq_dists(candidates[positions], q)
    order = np.lexsort((positions, d2))[:L]
    return positions[order], np.sqrt(d2[order])


@dataclass(frozen=True)
class IndexParams:
    """``mode`` is "exact" or "two_stage".

    For two_stage, ``partition_count`` centroids are refined with
    ``iterations`` Lloyd steps on at most ``train_per_partition`` points per
    centroid; queries gather at least ``coarse_fetch`` points from the
    closest partitions before exact re-ranking.
    """

    mode: str = "exact"
    coarse_fetch: int = 4096
    partition_count: Optional[int] = None
    iterations: int = 10
    train_per_partition: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("exact", "two_stage"):
            raise ValueError(f"unknown index mode {self.mode!r}")
        if self.coarse_fetch < 1:
            raise ValueError("coarse_fetch must be >= 1")
        if self.partition_count is not None and self.partition_count < 1:
            raise ValueError("partition_count must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


class Index:
    """Immutable search structure over one candidate set."""

    def __init__(self, candidates: EmbeddingSet, params: IndexParams,
                 centroids: Optional[np.ndarray] = None,
                 labels: Optional[np.ndarray] = None):
        self.candidates = candidates
        self.params = params
        self.centroids = centroids
        self.labels = labels
        self.lists: list[np.ndarray] = []
        if params.mode == "two_stage":
            order = np.argsort(labels, kind="stable")
            bounds = np.searchsorted(labels[order], np.arange(len(centroids) + 1))
            self.lists = [order[bounds[p]:bounds[p + 1]] for p in range(len(centroids))]
        x = candidates.vectors
        self._sqnorms = np.einsum("ij,ij->i", x, x, dtype=np.float32)

    @property
    def n(self) -> int:
        return self.candidates.count

    @property
    def partition_sizes(self) -> np.ndarray:
        return np.array([len(lst) for lst in self.lists], dtype=np.int64)


def _nearest_centroid(x: np.ndarray, centroids: np.ndarray, chunk: int = 65536) -> np.ndarray:
    c = centroids.astype(np.float64)
    cn = (c * c).sum(axis=1)
    out = np.empty(x.shape[0], dtype=np.int64)
    for s in range(0, x.shape[0], chunk):
        xb = x[s:s + chunk].astype(np.float64)
        score = cn[None, :] - 2.0 * xb @ c.T
        out[s:s + chunk] = np.argmin(score, axis=1)
    return out


def _lloyd(x: np.ndarray, k: int, iterations: int, rng: np.random.Generator) -> np.ndarray:
    centroids = x[np.sort(rng.choice(x.shape[0], size=k, replace=False))].astype(np.float64)
    for _ in range(iterations):
        labels = _nearest_centroid(x, centroids)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x.astype(np.float64))
        live = counts > 0
        centroids[live] = sums[live] / counts[live, None]
        empty = np.flatnonzero(~live)
        if empty.size:
            # re-seed empty partitions at the points worst served by their centroid
            err = ((x - centroids[labels]) ** 2).sum(axis=1)
            far = np.argsort(-err, kind="stable")[:empty.size]
            centroids[empty] = x[far]
    return centroids


def build_index(candidates: EmbeddingSet, params: IndexParams = IndexParams()) -> Index:
    if candidates.count < 1:
        raise ValueError("cannot index an empty candidate set")
    if params.mode == "exact":
        return Index(candidates, params)
    P = params.partition_count or max(1, int(round(np.sqrt(candidates.count))))
    if P > candidates.count:
        raise ValueError(f"partition_count {P} exceeds candidate count {candidates.count}")
    rng = np.random.default_rng(params.seed)
    x = candidates.vectors
    n_train = min(x.shape[0], P * params.train_per_partition)
    train = x if n_train == x.shape[0] else x[np.sort(rng.choice(x.shape[0], n_train, replace=False))]
    centroids = _lloyd(train, P, params.iterations, rng)
    labels = _nearest_centroid(x, centroids)
    counts = np.bincount(labels, minlength=P)
    for p in np.flatnonzero(counts == 0):
        # move one point from the largest partition so every list is non-empty
        donor = int(np.argmax(counts))
        members = np.flatnonzero(labels == donor)
        d = ((x[members] - centroids[donor]) ** 2).sum(axis=1)
        mover = members[int(np.argmax(d))]
        labels[mover] = p
        centroids[p] = x[mover]
        counts[donor] -= 1
        counts[p] += 1
    resolved = IndexParams("two_stage", params.coarse_fetch, P, params.iterations,
                           params.train_per_partition, params.seed)
    return Index(candidates, resolved, centroids, labels)


def _exact_block(index: Index, q: np.ndarray, L: int):
    """Exact L-NN for a block of queries.

    A float32 scan shortlists everything within a safety band of the L-th
    score; the shortlist is then re-ranked in float64 so results do not
    depend on BLAS rounding.
    """
    x = index.candidates.vectors
    qn = np.einsum("ij,ij->i", q, q, dtype=np.float32)
    scores = index._sqnorms[None, :] - 2.0 * (q @ x.T)
    kth = np.partition(scores, L - 1, axis=1)[:, L - 1]
    scale = qn + float(index._sqnorms.max()) if len(x) else qn
    band = 1e-4 * (scale + 1.0)
    idx = np.empty((q.shape[0], L), dtype=np.int64)
    dist = np.empty((q.shape[0], L), dtype=np.float64)
    for r in range(q.shape[0]):
        short = np.flatnonzero(scores[r] <= kth[r] + band[r])
        idx[r], dist[r] = _rank(x, short, q[r], L)
    return idx, dist


def _two_stage_block(index: Index, q: np.ndarray, L: int):
    x = index.candidates.vectors
    c = index.centroids
    idx = np.empty((q.shape[0], L), dtype=np.int64)
    dist = np.empty((q.shape[0], L), dtype=np.float64)
    sizes = index.partition_sizes
    target = max(index.params.coarse_fetch, L)
    for r in range(q.shape[0]):
        cd = ((c - q[r].astype(np.float64)) ** 2).sum(axis=1)
        order = np.lexsort((np.arange(len(c)), cd))
        upto = int(np.searchsorted(np.cumsum(sizes[order]), target)) + 1
        gathered = np.sort(np.concatenate([index.lists[p] for p in order[:upto]]))
        idx[r], dist[r] = _rank(x, gathered, q[r], L)
    return idx, dist


def get_knn(index: Index, queries: EmbeddingSet, L: int, threads: int = 1) -> NeighborTable:
    """L nearest candidates for every query row."""
    if queries.dim != index.candidates.dim:
        raise ValueError(f"query dim {queries.dim} != candidate dim {index.candidates.dim}")
    if L < 1:
        raise ValueError("L must be >= 1")
    if L > index.n:
        raise ValueError(f"L={L} exceeds candidate count {index.n}")
    if index.params.mode == "two_stage" and L > index.params.coarse_fetch:
        raise ValueError(f"L={L} exceeds coarse_fetch={index.params.coarse_fetch}")
    q = queries.vectors
    if index.params.mode == "exact":
        block = max(1, min(1024, _SCAN_BUDGET // max(index.n, 1)))
        fn = _exact_block
    else:
        block = 256
        fn = _two_stage_block
    starts = list(range(0, q.shape[0], block))
    work = lambda s: fn(index, q[s:s + block], L)
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    idx = np.vstack([p[0] for p in parts]) if parts else np.zeros((0, L), np.int64)
    dist = np.vstack([p[1] for p in parts]) if parts else np.zeros((0, L))
    return NeighborTable(idx, dist, index.n)


def naive_knn(candidates: EmbeddingSet, queries: EmbeddingSet, L: int) -> NeighborTable:
    """Full-scan reference ranking (no shortlist)."""
    x = candidates.vectors
    pos = np.arange(x.shape[0])
    rows = [_rank(x, pos, qv, L) for qv in queries.vectors]
    return NeighborTable(np.array([r[0] for r in rows], dtype=np.int64).reshape(-1, L),
                         np.array([r[1] for r in rows]).reshape(-1, L), x.shape[0])


def recall_at_L(exact: NeighborTable, approx: NeighborTable) -> float:
    if exact.indices.shape != approx.indices.shape:
        raise ValueError(f"shape mismatch {exact.indices.shape} vs {approx.indices.shape}")
    M, L = exact.indices.shape
    if M == 0:
        raise ValueError("empty neighbor tables")
    hits = sum(np.intersect1d(exact.indices[i], approx.indices[i]).size for i in range(M))
    return hits / (M * L)


# --- persistence -----------------------------------------------------------

INDEX_MAGIC = b"TSIX"
INDEX_VERSION = 1
_MODES = {"exact": 0, "two_stage": 1}


@numba.njit(cache=True)
def _fnv1a(data):
    h = np.uint64(0xcbf29ce484222325)
    prime = np.uint64(0x100000001b3)
    for b in data:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    return int(_fnv1a(np.frombuffer(data, dtype=np.uint8)))


def save_index(index: Index, path, candidate_hash: int) -> None:
    """Write ``TSIX | u32 version | u8 mode | u64 candidate FNV-1a | payload``.

    The two_stage payload is u32 coarse_fetch, u32 partitions, u32 dim,
    u32 iterations, u64 seed, f64 centroids, then u32 labels per candidate.
    """
    p = index.params
    out = [struct.pack("<4sIBQ", INDEX_MAGIC, INDEX_VERSION, _MODES[p.mode], candidate_hash)]
    if p.mode == "two_stage":
        P, dim = index.centroids.shape
        out.append(struct.pack("<IIIIQQ", p.coarse_fetch, P, dim, p.iterations, p.seed, index.n))
        out.append(index.centroids.astype("<f8").tobytes())
        out.append(index.labels.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_index(path, candidates: EmbeddingSet, candidate_hash: int) -> Index:
    buf = Path(path).read_bytes()
    head = struct.Struct("<4sIBQ")
    if len(buf) < 4 or buf[:4] != INDEX_MAGIC:
        raise ValueError("bad magic")
    if len(buf) < head.size:
        raise ValueError("truncated index header")
    _, version, mode, stored = head.unpack_from(buf)
    if version != INDEX_VERSION:
        raise ValueError(f"unsupported index version {version}")
    if stored != candidate_hash:
        raise ValueError("index was built for a different candidate file")
    if mode == _MODES["exact"]:
        return Index(candidates, IndexParams("exact"))
    if mode != _MODES["two_stage"]:
        raise ValueError(f"unknown index mode {mode}")
    sub = struct.Struct("<IIIIQQ")
    off = head.size
    if len(buf) < off + sub.size:
        raise ValueError("truncated index payload")
    coarse, P, dim, iters, seed, n = sub.unpack_from(buf, off)
    off += sub.size
    need = P * dim * 8 + n * 4
    if len(buf) - off != need:
        raise ValueError("truncated index payload")
    if n != candidates.count or dim != candidates.dim:
        raise ValueError("index shape does not match candidates")
    centroids = np.frombuffer(buf, "<f8", P * dim, off).reshape(P, dim).copy()
    labels = np.frombuffer(buf, "<u4", n, off + P * dim * 8).astype(np.int64)
    return Index(candidates, IndexParams("two_stage", coarse, P, iters, seed=seed),
                 centroids, labels)
