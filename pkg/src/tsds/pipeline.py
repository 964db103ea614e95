"""index -> knn -> [kde] -> assign -> aggregate."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

from .assign import (AssignDiagnostics, ProbabilityAssignment, SelectionConfig,
                     TransportPlan, aggregate, assign)
from .density import DensityTable, compute_kde
from .knn import Index, IndexParams, NeighborTable, build_index, get_knn
from .store import EmbeddingSet

log = logging.getLogger(__name__)


@dataclass
class Selection:
    neighbors: NeighborTable
    densities: Optional[DensityTable]
    plan: TransportPlan
    diagnostics: AssignDiagnostics
    assignment: ProbabilityAssignment


def select(candidates: EmbeddingSet, queries: EmbeddingSet, config: SelectionConfig,
           index: Optional[Index] = None, index_params: Optional[IndexParams] = None,
           threads: int = 1) -> Selection:
    """Probability assignment over ``candidates`` guided by ``queries``.

    The returned assignment carries candidate ids.
    """
    if index is None:
        index = build_index(candidates, index_params or IndexParams())
    L = config.prefetch
    if L > candidates.count:
        raise ValueError(f"prefetch L={L} exceeds candidate count {candidates.count}")
    neighbors = get_knn(index, queries, L, threads=threads)
    log.info("retrieved %d x %d neighbors", neighbors.M, neighbors.L)
    densities = None
    if config.regularizer == "kde":
        densities = compute_kde(neighbors, candidates, config.kde_neighbors, config.h)
        log.info("estimated densities for %d prefetched candidates", densities.positions.size)
    plan, diag = assign(neighbors, config, densities)
    return Selection(neighbors, densities, plan, diag,
                     aggregate(plan).with_ids(candidates.ids))
