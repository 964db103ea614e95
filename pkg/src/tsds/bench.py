"""Desk-scale experiments: duplicate robustness and distribution alignment."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from .assign import SelectionConfig
from .knn import IndexParams
from .pipeline import select
from .sampler import SamplePlan, sample
from .store import (DuplicationSpec, EmbeddingSet, choose_duplicates, duplicate_groups,
                    inject_duplicates, synth_mixture)

ALIGNMENT_CAP = 500


@dataclass
class DupRobustnessReport:
    regularizer: str
    fraction: float
    factor: int
    mass_on_duplicated_content: float
    baseline_mass: float
    inflation_ratio: float
    effective_support: float
    baseline_effective_support: float
    duplicated_count: int

    def to_dict(self) -> dict:
        return asdict(self)


def jitter_copies(es: EmbeddingSet, original_count: int, radius: float, seed: int) -> EmbeddingSet:
    """Move every row past ``original_count`` to a uniform point in a ball of ``radius``."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    k = es.count - original_count
    if radius == 0 or k == 0:
        return es
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    v = es.vectors.astype(np.float64)
    dirs = rng.standard_normal((k, es.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r = radius * rng.random((k, 1)) ** (1.0 / es.dim)
    v[original_count:] += dirs * r
    return EmbeddingSet(es.ids, v)


def dup_robustness(candidates: EmbeddingSet, queries: EmbeddingSet, config: SelectionConfig,
                   spec: DuplicationSpec, index_params: Optional[IndexParams] = None,
                   radius: float = 0.0) -> DupRobustnessReport:
    """Probability mass on duplicated content, before and after duplication.

    Content is tracked by provenance: each chosen row plus all of its copies.
    With ``radius > 0`` the copies are near-duplicates scattered in a ball
    around their original instead of exact copies.
    """
    base = select(candidates, queries, config, index_params=index_params)
    chosen = choose_duplicates(candidates.count, spec)
    dup_set, _ = inject_duplicates(candidates, spec)
    dup_set = jitter_copies(dup_set, candidates.count, radius, spec.seed)
    after = base if chosen.size == 0 else select(dup_set, queries, config, index_params=index_params)

    p0 = base.assignment.dense()
    p1 = after.assignment.dense()
    baseline = float(p0[chosen].sum()) if chosen.size else 0.0
    groups = duplicate_groups(candidates.count, chosen, spec.factor)
    content = float(sum(p1[g].sum() for g in groups)) if groups else 0.0
    if baseline > 0:
        ratio = content / baseline
    else:
        ratio = 1.0 if content == 0 else float("inf")
    return DupRobustnessReport(config.regularizer, spec.fraction, spec.factor, content, baseline,
                               ratio, after.assignment.effective_support(),
                               base.assignment.effective_support(), int(chosen.size))


def _as_points(x) -> np.ndarray:
    return np.asarray(x.vectors if isinstance(x, EmbeddingSet) else x, dtype=np.float64)


def alignment_metric(selected, queries, cap: int = ALIGNMENT_CAP) -> float:
    """Exact 1-Wasserstein distance between two uniform empirical distributions."""
    a, b = _as_points(selected), _as_points(queries)
    if a.ndim != 2 or b.ndim != 2 or not len(a) or not len(b):
        raise ValueError("both point sets must be non-empty 2-d arrays")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if len(a) > cap or len(b) > cap:
        raise ValueError(f"point sets are capped at {cap} each")
    diff = a[:, None, :] - b[None, :, :]
    cost = np.sqrt((diff * diff).sum(axis=-1))
    n, m = cost.shape
    if n == m:
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].sum() / n)
    # transport LP: rows ship 1/n, columns receive 1/m
    rows = sparse.kron(sparse.eye(n), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, n)), sparse.eye(m))
    A = sparse.vstack([rows, cols]).tocsr()
    rhs = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = linprog(cost.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def mixture_corpus(seed: int, dim: int = 8, components: int = 4, per_component: int = 500,
                   spread: float = 3.0, std: float = 1.0) -> EmbeddingSet:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    means = rng.normal(scale=spread, size=(components, dim))
    return synth_mixture([(m, std, per_component) for m in means], seed)


def alignment_trial(seed: int, config: SelectionConfig, n_queries: int = 30,
                    n_select: int = 100, dim: int = 8, components: int = 4,
                    per_component: int = 500):
    """(tsds_w1, random_w1) for one Gaussian-mixture trial.

    Queries come from component 0 of the same mixture as the candidates.
    """
    cands = mixture_corpus(seed, dim, components, per_component)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    means = np.random.default_rng(np.random.SeedSequence([seed, 1])).normal(
        scale=3.0, size=(components, dim))
    q = means[0] + rng.standard_normal((n_queries, dim))
    queries = EmbeddingSet(np.arange(n_queries, dtype=np.uint64), q)
    sel = select(cands, queries, replace(config, prefetch=min(config.prefetch, cands.count)))
    # mixture ids are row positions
    picked = sample(sel.assignment, SamplePlan(n_select, 1, seed))[0].astype(np.int64)
    rand = rng.choice(cands.count, size=n_select, replace=True)
    return (alignment_metric(cands.vectors[picked], q),
            alignment_metric(cands.vectors[rand], q))


def isolated_corpus(n: int, dim: int, spacing: float, seed: int) -> EmbeddingSet:
    """Points on a jittered grid line, pairwise at least ``spacing`` apart."""
    rng = np.random.default_rng(seed)
    x = np.zeros((n, dim))
    x[:, 0] = spacing * np.arange(1, n + 1)
    x[:, 1:] = rng.uniform(-0.1 * spacing, 0.1 * spacing, size=(n, dim - 1)) if dim > 1 else 0
    return EmbeddingSet(np.arange(n, dtype=np.uint64), x)
