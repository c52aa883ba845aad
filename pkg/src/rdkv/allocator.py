"""Bit allocation: continuous reverse water-filling and the discrete multiple-choice knapsack.

The discrete problem picks one width per unit from a table ``bits -> eps``
to minimize ``sum_u w_u * eps(b_u)`` subject to ``sum_u b_u <= B``. Relaxing
the budget with a price ``lam`` decouples it into per-unit table lookups;
bisection on ``lam`` hits the budget and ``dual_bound`` certifies the result.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import NumericError, ShapeError

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
BRUTEFORCE_MAX_UNITS = 12


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-2
    max_iterations: int = 64
    strict: bool = False

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass(frozen=True, eq=False)
class ContinuousAllocation:
    bits: np.ndarray
    lam: float
    budget_used: float


@dataclass(frozen=True, eq=False)
class DiscreteAllocation:
    bits: np.ndarray
    lam: float
    achieved_avg_bits: float
    objective: float
    converged: bool = True
    iterations: int = 0

    @property
    def total_bits(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class DualBound:
    g_lambda: float
    primal: float
    feasible: bool

    @property
    def gap(self) -> float:
        return self.primal - self.g_lambda


def _table(eps: Mapping[int, float]) -> tuple[np.ndarray, np.ndarray]:
    """Sorted action set and its distortion values."""
    items = sorted((int(b), float(e)) for b, e in eps.items())
    if not items:
        raise ValueError("empty distortion table")
    bits = np.array([b for b, _ in items], dtype=np.int64)
    vals = np.array([e for _, e in items], dtype=np.float64)
    return bits, vals


def _weights(weights) -> np.ndarray:
    w = np.asarray(getattr(weights, "values", weights), dtype=np.float64).reshape(-1)
    if not np.isfinite(w).all() or (w < 0).any():
        raise NumericError("weights must be finite and non-negative")
    return w


# --------------------------------------------------------------------------
# continuous relaxation
# --------------------------------------------------------------------------

def _wf_bits(log_c: np.ndarray, log_lam: float) -> np.ndarray:
    # log_c = log2(ln2 * coeff); bits = [log_c - log2(lam)]_+
    return np.maximum(log_c - log_lam, 0.0)


def waterfill_continuous(coeffs, budget: float, iterations: int = 200) -> ContinuousAllocation:
    """Reverse water-filling for ``min sum c_u 2^-b_u`` s.t. ``sum b_u = B, b_u >= 0``.

    ``coeffs`` are ``w_u * sigma_u``. The water level is found by bisection on
    ``log2(lam)``; the active set it identifies is then solved in closed form.
    """
    c = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    if not budget > 0:
        raise ValueError(f"budget must be > 0, got {budget}")
    if not np.isfinite(c).all() or (c < 0).any():
        raise NumericError("coefficients must be finite and non-negative")
    if not (c > 0).any():
        raise NumericError("at least one coefficient must be positive")

    pos = c > 0
    log_c = np.full(c.shape, -np.inf)
    log_c[pos] = np.log2(LN2 * c[pos])
    hi = float(log_c.max())           # total bits 0 at this level
    lo = hi - budget - 1.0            # the largest unit alone exceeds B here
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if _wf_bits(log_c, mid).sum() > budget:
            lo = mid
        else:
            hi = mid
    log_lam = 0.5 * (lo + hi)

    # closed form on the active set: log2(lam) = (sum_active log_c - B) / k
    active = log_c > log_lam
    for _ in range(c.size):
        k = int(active.sum())
        exact = (log_c[active].sum() - budget) / k
        refined = log_c > exact
        if np.array_equal(refined, active):
            log_lam = exact
            break
        active = refined

    bits = _wf_bits(log_c, log_lam)
    return ContinuousAllocation(bits, float(2.0 ** log_lam), float(bits.sum()))


# --------------------------------------------------------------------------
# discrete problem
# --------------------------------------------------------------------------

def _argmin_bits(w: np.ndarray, bits: np.ndarray, vals: np.ndarray, lam: float) -> np.ndarray:
    if lam == 0.0:
        # free bits: the widest option carries the least distortion
        return np.full(w.shape, bits[-1], dtype=np.int64)
    if math.isinf(lam):
        return np.full(w.shape, bits[0], dtype=np.int64)
    cost = w[:, None] * vals[None, :] + lam * bits[None, :]
    # np.argmin returns the first minimum, i.e. the lower width on ties
    return bits[np.argmin(cost, axis=1)]


def per_unit_argmin(w: float, eps: Mapping[int, float], lam: float) -> int:
    """``argmin_b w * eps(b) + lam * b`` with ties going to the lower width."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    bits, vals = _table(eps)
    return int(_argmin_bits(np.array([float(w)]), bits, vals, lam)[0])


def objective(weights, eps: Mapping[int, float], allocation) -> float:
    """Weighted distortion ``sum_u w_u * eps(b_u)``."""
    w = _weights(weights)
    b = np.asarray(getattr(allocation, "bits", allocation), dtype=np.int64).reshape(-1)
    if b.shape != w.shape:
        raise ShapeError(f"{b.size} bit-widths for {w.size} weights")
    lookup = {int(k): float(v) for k, v in eps.items()}
    try:
        e = np.array([lookup[int(x)] for x in b], dtype=np.float64)
    except KeyError as exc:
        raise ValueError(f"bit-width {exc.args[0]} not in the distortion table") from exc
    return float(np.dot(w, e))


def _make_result(w, bits, vals, b, lam, converged, iterations) -> DiscreteAllocation:
    e = vals[np.searchsorted(bits, b)]
    return DiscreteAllocation(
        bits=b,
        lam=float(lam),
        achieved_avg_bits=float(b.mean()) if b.size else 0.0,
        objective=float(np.dot(w, e)),
        converged=converged,
        iterations=iterations,
    )


def mckp_bisect(
    weights,
    eps: Mapping[int, float],
    target_avg_bits: float,
    config: SolverConfig = SolverConfig(),
) -> DiscreteAllocation:
    """Lagrangian bisection for the knapsack at a target average width.

    Follows the classic loop: start from ``[0, max w]``, return as soon as the
    average width is within ``config.tolerance`` (relative) of the target,
    otherwise fall through with the last iterate and ``converged=False``.
    Two additions: the upper price is doubled until it is feasible, and a
    zero price is accepted outright when every unit fits at full width.
    With ``config.strict`` an over-budget iterate is replaced by the
    allocation at the feasible upper price.
    """
    if not 0 < target_avg_bits <= 16:
        raise ValueError(f"target average bits must lie in (0, 16], got {target_avg_bits}")
    w = _weights(weights)
    bits, vals = _table(eps)
    if w.size == 0:
        return DiscreteAllocation(np.zeros(0, np.int64), 0.0, 0.0, 0.0)

    def avg(lam):
        b = _argmin_bits(w, bits, vals, lam)
        return b, b.mean()

    b0, a0 = avg(0.0)
    if a0 <= target_avg_bits:
        return _make_result(w, bits, vals, b0, 0.0, True, 0)

    lam_hi = float(w.max()) or 1.0
    b_hi, a_hi = avg(lam_hi)
    while a_hi > target_avg_bits and not (b_hi == bits[0]).all():
        lam_hi *= 2.0
        b_hi, a_hi = avg(lam_hi)
    lam_lo = 0.0

    b, lam = b_hi, lam_hi
    for i in range(1, config.max_iterations + 1):
        lam = 0.5 * (lam_lo + lam_hi)
        b, cur = avg(lam)
        if abs(cur - target_avg_bits) / target_avg_bits < config.tolerance:
            result = _make_result(w, bits, vals, b, lam, True, i)
            break
        if cur > target_avg_bits:
            lam_lo = lam
        else:
            lam_hi = lam
    else:
        log.warning("bisection stopped after %d steps at avg %.4f (target %.4f)",
                    config.max_iterations, b.mean(), target_avg_bits)
        result = _make_result(w, bits, vals, b, lam, False, config.max_iterations)

    if config.strict and result.achieved_avg_bits > target_avg_bits:
        b_hi, _ = avg(lam_hi)
        result = _make_result(w, bits, vals, b_hi, lam_hi, result.converged, result.iterations)
    return result


def dual_bound(weights, eps: Mapping[int, float], lam: float, total_budget: float) -> DualBound:
    """Lagrangian lower bound ``g(lam)`` and the primal value of the per-unit minimizer."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    w = _weights(weights)
    bits, vals = _table(eps)
    b = _argmin_bits(w, bits, vals, lam)
    e = vals[np.searchsorted(bits, b)]
    primal = float(np.dot(w, e))
    g = float((w * e + lam * b).sum() - lam * total_budget)
    return DualBound(g, primal, bool(b.sum() <= total_budget))


def mckp_bruteforce(weights, eps: Mapping[int, float], total_budget: float) -> DiscreteAllocation:
    """Exact optimum by enumerating every assignment (test oracle, at most 12 units).

    Ties go to the lexicographically smallest bit vector.
    """
    w = _weights(weights)
    U = w.size
    if U > BRUTEFORCE_MAX_UNITS:
        raise ValueError(f"brute force limited to {BRUTEFORCE_MAX_UNITS} units, got {U}")
    bits, vals = _table(eps)
    n = bits.size

    # vectorize over the trailing units, loop over the leading ones
    tail = min(U, 8)
    head = U - tail
    grids = np.indices((n,) * tail).reshape(tail, -1)
    tail_cost = (w[head:, None] * vals[grids]).sum(axis=0)
    tail_bits = bits[grids].sum(axis=0)

    best_cost, best_idx = math.inf, None
    for prefix in itertools.product(range(n), repeat=head):
        p = np.array(prefix, dtype=np.int64)
        pre_cost = float(np.dot(w[:head], vals[p])) if head else 0.0
        pre_bits = int(bits[p].sum()) if head else 0
        feasible = pre_bits + tail_bits <= total_budget
        if not feasible.any():
            continue
        cost = np.where(feasible, pre_cost + tail_cost, np.inf)
        j = int(np.argmin(cost))
        if cost[j] < best_cost:
            best_cost = float(cost[j])
            best_idx = np.concatenate([p, grids[:, j]])
    if best_idx is None:
        raise ValueError(f"no assignment fits within {total_budget} bits")
    b = bits[best_idx]
    return DiscreteAllocation(
        bits=b,
        lam=math.nan,
        achieved_avg_bits=float(b.mean()) if U else 0.0,
        objective=float(np.dot(w, vals[best_idx])),
    )


def action_set(name: str) -> tuple[int, ...]:
    """Named action subsets used by the ablation sweeps."""
    sets = {
        "full": (0, 2, 4, 8, 16),
        "evict-only": (0, 16),
        "quant-only": (2, 4, 8, 16),
        "tri-state": (0, 4, 16),
    }
    try:
        return sets[name]
    except KeyError:
        raise ValueError(f"unknown action set {name!r}; choose from {sorted(sets)}") from None
