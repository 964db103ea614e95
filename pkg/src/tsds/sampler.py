"""Seeded categorical sampling with replacement, one fresh draw per epoch.

Epoch ``e`` uses ``numpy.random.Generator(PCG64(SeedSequence([seed, e])))``
and inverse-CDF lookup over the sparse support, so output depends only on
(assignment, seed, epoch) and is stable across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assign import ProbabilityAssignment


@dataclass(frozen=True)
class SamplePlan:
    n_per_epoch: int
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_per_epoch < 1:
            raise ValueError("n_per_epoch must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def epoch_generator(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))


def draw(probs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """n support indices drawn i.i.d. from probs (need not sum exactly to 1)."""
    cdf = np.cumsum(probs)
    u = rng.random(n) * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)


def sample(assignment: ProbabilityAssignment, plan: SamplePlan, fixed: bool = False) -> list:
    """One array of candidate ids per epoch (positions when the assignment has no ids).

    With ``fixed`` a single draw is repeated for every epoch.
    """
    keep = assignment.probs > 0
    if not keep.any():
        raise ValueError("assignment has empty support")
    probs = assignment.probs[keep]
    labels = (assignment.ids if assignment.ids is not None
              else assignment.positions.astype(np.uint64))[keep]
    out = []
    for e in range(plan.epochs):
        if fixed and e > 0:
            out.append(out[0])
            continue
        out.append(labels[draw(probs, plan.n_per_epoch, epoch_generator(plan.seed, e))])
    return out
