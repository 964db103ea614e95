"""Query-guided data selection by regularized optimal transport.

Query embeddings pull probability mass onto their nearest candidates; the
regularizer decides how widely that mass spreads and whether near-duplicate
candidates are discounted. The resulting distribution is sampled with
replacement to build a training set.
"""

import logging

from .assign import (AssignDiagnostics, ProbabilityAssignment, SelectionConfig, TransportPlan,
                     aggregate, assign, assign_kde, assign_tv, assign_uniform, objective)
from .density import DensityTable, compute_kde, compute_kde_full, epanechnikov_weight
from .knn import IndexParams, NeighborTable, build_index, get_knn, recall_at_L
from .pipeline import Selection, select
from .sampler import SamplePlan, sample
from .store import (DuplicationSpec, EmbeddingSet, ingest_jsonl, inject_duplicates, normalize,
                    read_binary, synth_mixture, write_binary)

logging.getLogger(__name__).addHandler(logging.NullHandler())

__version__ = "0.1.0"
