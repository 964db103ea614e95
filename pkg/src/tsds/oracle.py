"""Independent optimality checks for the closed-form transports.

A projected subgradient method minimizes the regularized transport objective
directly over the product of scaled simplices, and random feasible plans give
solver-free evidence that nothing obvious beats the closed form. Neither path
uses the sorted-neighbor structure the closed forms rely on.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numba
import numpy as np

from .assign import (SelectionConfig, TransportPlan, assign, dense_objective,
                     objective)
from .density import DensityTable
from .knn import neighbors_from_distances

DESK_CAP = 200
_KIND = {"uniform": 0, "kde": 0, "tv": 1}

# Iterations are split into stages; each stage restarts from the best point
# with a smaller step. Geometric decay gives fast convergence on the sharp
# minima of piecewise-linear objectives, where a single a/sqrt(t) run stalls.
_STAGES = 100
_SHRINK = 0.8


@dataclass
class OracleReport:
    closed_form_objective: float
    oracle_objective: float
    gap: float
    mc_violations: int
    tolerance: float
    passed: bool
    mc_best: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pass"] = out.pop("passed")
        extra = out.pop("extra")
        out.update(extra)
        return out


def random_feasible(M: int, N: int, seed, size: Optional[int] = None) -> np.ndarray:
    """Rows drawn from the flat Dirichlet on the simplex, scaled by 1/M."""
    if M < 1 or N < 1:
        raise ValueError("M and N must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = (M,) if size is None else (size, M)
    return rng.dirichlet(np.ones(N), size=shape) / M


@numba.njit(cache=True)
def project_row(v, z, buf):
    """In-place Euclidean projection of v onto {x >= 0, sum(x) = z}."""
    n = v.shape[0]
    for k in range(n):
        buf[k] = v[k]
    buf.sort()
    css = 0.0
    theta = 0.0
    for k in range(n):
        u = buf[n - 1 - k]
        css += u
        t = (css - z) / (k + 1)
        if u - t > 0:
            theta = t
    for k in range(n):
        x = v[k] - theta
        v[k] = x if x > 0 else 0.0


@numba.njit(cache=True)
def value_and_subgradient(g, d, weight, ref, kind, coef, reg, grad):
    """Objective at g; a subgradient is written into grad.

    kind 0 is the weighted max gap M * max_ij weight_j |g_ij - ref_j|
    (uniform: weight 1, ref 1/(MN)); kind 1 is total variation to 1/(MN).
    """
    M, N = g.shape
    val = 0.0
    for i in range(M):
        for j in range(N):
            val += g[i, j] * d[i, j]
            grad[i, j] = coef * d[i, j]
    val *= coef
    if kind == 1:
        u = 1.0 / (M * N)
        s = 0.0
        for i in range(M):
            for j in range(N):
                diff = g[i, j] - u
                s += abs(diff)
                if diff > 0:
                    grad[i, j] += 0.5 * reg
                elif diff < 0:
                    grad[i, j] -= 0.5 * reg
        val += 0.5 * reg * s
    else:
        best = -1.0
        bi = 0
        bj = 0
        sign = 0.0
        for i in range(M):
            for j in range(N):
                diff = g[i, j] - ref[j]
                w = weight[j] * abs(diff)
                if w > best:
                    best = w
                    bi = i
                    bj = j
                    sign = 1.0 if diff > 0 else (-1.0 if diff < 0 else 0.0)
        val += reg * M * best
        grad[bi, bj] += reg * M * weight[bj] * sign
    return val


@numba.njit(cache=True)
def _descend(d, weight, ref, kind, coef, reg, g0, iterations, step0, stages, shrink):
    M, N = d.shape
    g = g0.copy()
    grad = np.zeros((M, N))
    buf = np.empty(N)
    best = np.inf
    best_g = g0.copy()
    per = max(1, iterations // stages)
    step = step0
    z = 1.0 / M
    done = 0
    while done < iterations:
        g[:, :] = best_g
        for t in range(1, per + 1):
            v = value_and_subgradient(g, d, weight, ref, kind, coef, reg, grad)
            if v < best:
                best = v
                best_g[:, :] = g
            nrm = 0.0
            for i in range(M):
                for j in range(N):
                    nrm += grad[i, j] * grad[i, j]
            if nrm == 0.0:
                return best_g, best
            st = step / np.sqrt(t) / np.sqrt(nrm)
            for i in range(M):
                for j in range(N):
                    g[i, j] -= st * grad[i, j]
                project_row(g[i], z, buf)
            done += 1
            if done >= iterations:
                break
        step *= shrink
    v = value_and_subgradient(g, d, weight, ref, kind, coef, reg, grad)
    if v < best:
        best = v
        best_g[:, :] = g
    return best_g, best


def _kernel_args(distances, densities, config: SelectionConfig):
    d = np.ascontiguousarray(distances, dtype=np.float64)
    M, N = d.shape
    if config.regularizer == "kde":
        if densities is None:
            raise ValueError("kde objective needs per-candidate densities")
        rho = np.asarray(densities, dtype=np.float64)
        weight = rho.copy()
        ref = (1.0 / rho) / (M * np.sum(1.0 / rho))
    else:
        weight = np.ones(N)
        ref = np.full(N, 1.0 / (M * N))
    return d, weight, ref, _KIND[config.regularizer], config.alpha / config.c, 1.0 - config.alpha


def subgradient(gamma, distances, config: SelectionConfig, densities=None):
    """(value, subgradient) of the objective at a dense plan."""
    d, weight, ref, kind, coef, reg = _kernel_args(distances, densities, config)
    g = np.ascontiguousarray(gamma, dtype=np.float64)
    grad = np.zeros_like(g)
    val = value_and_subgradient(g, d, weight, ref, kind, coef, reg, grad)
    return val, grad


def minimize_rt(distances, densities, config: SelectionConfig, iterations: int = 50_000,
                restarts: int = 5, seed: int = 0, cap: int = DESK_CAP):
    """Best plan and objective found by projected subgradient descent.

    Each restart starts from a seeded random feasible plan.
    """
    d, weight, ref, kind, coef, reg = _kernel_args(distances, densities, config)
    M, N = d.shape
    if M * N > cap:
        raise ValueError(f"M*N={M * N} exceeds the desk-scale cap {cap}")
    if not np.isfinite(d).all() or not np.isfinite(weight).all():
        raise ValueError("non-finite distances or densities")
    rng = np.random.default_rng(np.random.SeedSequence([seed, M, N]))
    best_plan, best_val = None, np.inf
    for _ in range(max(1, restarts)):
        g0 = random_feasible(M, N, rng)
        g, _ = _descend(d, weight, ref, kind, coef, reg, g0, iterations, 1.0 / M,
                        _STAGES, _SHRINK)
        val = float(dense_objective(g, d, config, densities))
        if not np.isfinite(val):
            raise ValueError("non-finite objective")
        if val < best_val:
            best_plan, best_val = g, val
    return best_plan, best_val


def monte_carlo_objectives(M: int, N: int, distances, densities, config: SelectionConfig,
                           samples: int, seed: int = 0, batch: int = 4096) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7, M, N]))
    out = []
    left = samples
    while left > 0:
        n = min(batch, left)
        plans = random_feasible(M, N, rng, size=n)
        out.append(dense_objective(plans, distances, config, densities))
        left -= n
    return np.concatenate(out) if out else np.zeros(0)


def verify_optimality(closed_form: TransportPlan, distances, densities, config: SelectionConfig,
                      mc_samples: int = 10_000, tolerance: float = 1e-6,
                      iterations: int = 50_000, restarts: int = 5, seed: int = 0) -> OracleReport:
    """Compare a closed-form plan against the subgradient oracle and random plans."""
    d = np.asarray(distances, dtype=np.float64)
    cf = objective(closed_form, d, densities, config)
    _, oracle_val = minimize_rt(d, densities, config, iterations, restarts, seed)
    mc = monte_carlo_objectives(closed_form.M, closed_form.N, d, densities, config,
                                mc_samples, seed)
    violations = int((mc < cf - tolerance).sum())
    gap = cf - oracle_val
    return OracleReport(cf, oracle_val, gap, violations, tolerance,
                        bool(gap <= tolerance and violations == 0),
                        float(mc.min()) if mc.size else float("nan"))


# --- random desk-scale instances ------------------------------------------------

@dataclass
class Instance:
    distances: np.ndarray
    densities: Optional[np.ndarray]
    config: SelectionConfig


def random_instance(regularizer: str, rng: np.random.Generator, M: Optional[int] = None,
                    N: Optional[int] = None, tv_threshold: str = "theorem") -> Instance:
    """M in {1,2,3}, N in 3..8, distances U[0,1], densities U[1,4],
    alpha in {0.2, 0.5, 0.8}, C in {1, 5} unless M/N are given."""
    M = int(rng.integers(1, 4)) if M is None else M
    N = int(rng.integers(3, 9)) if N is None else N
    d = rng.random((M, N))
    rho = rng.uniform(1.0, 4.0, N) if regularizer == "kde" else None
    alpha = float(rng.choice([0.2, 0.5, 0.8]))
    c = float(rng.choice([1.0, 5.0]))
    cfg = SelectionConfig(alpha=alpha, c=c, regularizer=regularizer, prefetch=N,
                          tv_threshold=tv_threshold)
    return Instance(d, rho, cfg)


def closed_form(inst: Instance):
    """Run the production assigner on a dense instance with L = N."""
    nt = neighbors_from_distances(inst.distances)
    dens = None
    if inst.config.regularizer == "kde":
        dens = DensityTable.from_vector(nt, inst.densities)
    return assign(nt, inst.config, dens, inst.densities)


def check_instance(inst: Instance, mc_samples: int = 10_000, tolerance: float = 1e-6,
                   iterations: int = 50_000, restarts: int = 5, seed: int = 0) -> OracleReport:
    plan, diag = closed_form(inst)
    rep = verify_optimality(plan, inst.distances, inst.densities, inst.config, mc_samples,
                            tolerance, iterations, restarts, seed)
    rep.extra = {
        "M": int(inst.distances.shape[0]), "N": int(inst.distances.shape[1]),
        "regularizer": inst.config.regularizer, "alpha": inst.config.alpha,
        "c": inst.config.c, "assumption_violated": bool(diag.assumption_violated),
        **({"K": diag.K} if diag.K is not None else {}),
        **({"s_star": diag.s_star} if diag.s_star is not None else {}),
    }
    return rep
