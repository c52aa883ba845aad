"""Per-head allocation: budget split, V-token allocation, then K-channel allocation over kept tokens."""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Optional

import numpy as np

from .allocator import DiscreteAllocation, SolverConfig, mckp_bisect
from .cache_model import KVCache, ProbeConfig, attention_probe
from .errors import FormatError, ShapeError
from .quantizer import BitSet, DistortionTable
from .weights import channel_weights, group_token_weights

FULL_BITS = 16


@dataclass(frozen=True)
class BudgetSpec:
    """FP16-equivalent budget: ``n_tokens`` tokens per layer, ``r_k`` of each head's bits to K."""

    n_tokens: float
    r_k: float = 0.5
    bits: BitSet = field(default_factory=BitSet)

    def __post_init__(self):
        if not self.n_tokens >= 1:
            raise ValueError(f"n_tokens must be >= 1, got {self.n_tokens}")
        if not 0 < self.r_k < 1:
            raise ValueError(f"r_k must lie in (0, 1), got {self.r_k}")


class HeadBudget(NamedTuple):
    head: float
    v: float
    k: float


@dataclass(frozen=True, eq=False)
class KeptSets:
    kept: np.ndarray
    evicted: np.ndarray
    v16: np.ndarray

    @classmethod
    def from_bits(cls, v_bits: np.ndarray) -> "KeptSets":
        idx = np.arange(v_bits.size)
        return cls(idx[v_bits > 0], idx[v_bits == 0], idx[v_bits == FULL_BITS])


@dataclass(frozen=True, eq=False)
class HeadAllocation:
    layer: int
    head: int
    v_bits: np.ndarray
    k_bits: np.ndarray
    kept: KeptSets
    token_weights: np.ndarray
    channel_weights: np.ndarray
    objective_v: float
    objective_k: float
    achieved_bits: float
    budget_bits: float
    converged_v: bool = True
    converged_k: bool = True

    @property
    def objective(self) -> float:
        return self.objective_v + self.objective_k


def head_budget(spec: BudgetSpec, head_dim: int, kv_heads: int) -> HeadBudget:
    """Split the per-layer token budget evenly over KV heads, then between V and K."""
    if spec.n_tokens < kv_heads:
        warnings.warn(
            f"budget of {spec.n_tokens} tokens is below one token per KV head ({kv_heads})",
            stacklevel=2,
        )
    b_tok = spec.n_tokens / kv_heads
    b_head = 2.0 * b_tok * head_dim * FULL_BITS
    return HeadBudget(b_head, (1.0 - spec.r_k) * b_head, spec.r_k * b_head)


def _solve(weights: np.ndarray, eps, target: float, config: SolverConfig) -> DiscreteAllocation:
    """``mckp_bisect`` with the degenerate targets (no budget, more than full width) handled."""
    n = weights.size
    if n == 0 or target <= 0:
        return DiscreteAllocation(np.zeros(n, np.int64), float("inf"), 0.0, float(weights.sum()))
    return mckp_bisect(weights, eps, min(target, float(FULL_BITS)), config)


def allocate_v(
    w_t,
    eps_v: Mapping[int, float],
    budget_v: float,
    head_dim: int,
    config: SolverConfig = SolverConfig(),
    forced=None,
) -> tuple[DiscreteAllocation, KeptSets]:
    """Token widths for the V cache under ``budget_v`` bits.

    ``forced`` token indices are pinned at full width and paid for first.
    """
    w = np.asarray(getattr(w_t, "values", w_t), dtype=np.float64)
    T = w.size
    if T < 1:
        raise ShapeError("V allocation needs at least one token")
    summed_budget = budget_v / head_dim
    bits = np.zeros(T, dtype=np.int64)
    free = np.ones(T, dtype=bool)
    if forced is not None and len(forced):
        free[np.asarray(forced)] = False
        bits[~free] = FULL_BITS
        summed_budget -= FULL_BITS * int((~free).sum())
    n_free = int(free.sum())
    sub = _solve(w[free], eps_v, summed_budget / n_free if n_free else 0.0, config)
    bits[free] = sub.bits
    e = np.array([eps_v[int(b)] for b in bits])
    result = DiscreteAllocation(bits, sub.lam, float(bits.mean()), float(np.dot(w, e)),
                                sub.converged, sub.iterations)
    return result, KeptSets.from_bits(bits)


def allocate_k(
    w_c,
    eps_k: Mapping[int, float],
    budget_k: float,
    kept_count: int,
    config: SolverConfig = SolverConfig(),
) -> DiscreteAllocation:
    """Channel widths for the K cache; the budget is spread over kept tokens only.

    With no kept tokens every channel is dropped.
    """
    w = np.asarray(getattr(w_c, "values", w_c), dtype=np.float64)
    if kept_count <= 0:
        return DiscreteAllocation(np.zeros(w.size, np.int64), float("inf"), 0.0, float(w.sum()))
    return _solve(w, eps_k, budget_k / (kept_count * w.size), config)


def head_weights(keys, queries, probe: ProbeConfig = ProbeConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Pooled token weights and channel weights for one KV head from its probe queries."""
    T = keys.shape[0]
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 2:
        q = q[None]
    q = q[:, -probe.window:]
    S = q.shape[1]
    if S > T:
        raise ShapeError(f"probe window {S} longer than sequence {T}")
    offsets = np.arange(T - S, T)
    attn = np.stack([attention_probe(q[i], keys, offsets).a for i in range(q.shape[0])])
    (w_t,) = group_token_weights(attn, q.shape[0], probe.pool_kernel)
    w_c = channel_weights(q.reshape(-1, q.shape[-1]), keys)
    return w_t.values, w_c.values


def allocate_head(
    keys,
    values,
    queries,
    budget: HeadBudget,
    tables: Mapping[str, Mapping[int, float]],
    probe: ProbeConfig = ProbeConfig(),
    solver: SolverConfig = SolverConfig(),
    force_window_retain: bool = False,
    layer: int = 0,
    head: int = 0,
) -> HeadAllocation:
    """Weights, then V tokens, then K channels for one ``(layer, kv_head)``.

    ``queries`` is ``[g, S, d]``: the probe rows of every query head in the group.
    """
    k = np.asarray(keys)
    if k.shape != np.shape(values):
        raise ShapeError(f"K {k.shape} and V {np.shape(values)} differ")
    T, d = k.shape
    w_t, w_c = head_weights(k, queries, probe)

    forced = np.arange(T - min(probe.window, T), T) if force_window_retain else None
    v_alloc, kept = allocate_v(w_t, tables["v"], budget.v, d, solver, forced)
    k_alloc = allocate_k(w_c, tables["k"], budget.k, kept.kept.size, solver)

    achieved = d * int(v_alloc.bits.sum()) + kept.kept.size * int(k_alloc.bits.sum())
    return HeadAllocation(
        layer=layer,
        head=head,
        v_bits=v_alloc.bits,
        k_bits=k_alloc.bits,
        kept=kept,
        token_weights=w_t,
        channel_weights=w_c,
        objective_v=v_alloc.objective,
        objective_k=k_alloc.objective,
        achieved_bits=float(achieved),
        budget_bits=float(budget.head),
        converged_v=v_alloc.converged,
        converged_k=k_alloc.converged,
    )


def worker_count(threads: Optional[int] = None) -> int:
    if threads is None:
        env = os.environ.get("RDKV_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def restrict_tables(tables: Mapping[str, DistortionTable], bits: BitSet) -> dict[str, dict]:
    return {key: t.restrict(bits.widths) for key, t in tables.items()}


def allocate_model(
    cache: KVCache,
    spec: BudgetSpec,
    tables: Mapping[str, DistortionTable],
    probe: ProbeConfig = ProbeConfig(),
    solver: SolverConfig = SolverConfig(),
    force_window_retain: bool = False,
    threads: Optional[int] = None,
) -> dict[tuple[int, int], HeadAllocation]:
    """Run ``allocate_head`` for every ``(layer, kv_head)``; output is keyed and ordered by head."""
    s = cache.shape
    budget = head_budget(spec, s.head_dim, s.kv_heads)
    eps = restrict_tables(tables, spec.bits)
    keys = [(layer, h) for layer in range(s.layers) for h in range(s.kv_heads)]

    def run(key):
        layer, h = key
        k, v = cache.head(layer, h)
        return allocate_head(k, v, cache.query_group(layer, h), budget, eps, probe, solver,
                             force_window_retain, layer, h)

    n = worker_count(threads)
    if n == 1:
        results = [run(key) for key in keys]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(run, keys))
    return dict(zip(keys, results))


# --------------------------------------------------------------------------
# JSON form
# --------------------------------------------------------------------------

def allocations_to_json(allocs: Mapping[tuple[int, int], HeadAllocation], meta: Optional[dict] = None) -> str:
    heads = []
    for (layer, h) in sorted(allocs):
        a = allocs[(layer, h)]
        heads.append({
            "layer": layer,
            "head": h,
            "v_bits": a.v_bits.tolist(),
            "k_bits": a.k_bits.tolist(),
            "token_weights": a.token_weights.tolist(),
            "channel_weights": a.channel_weights.tolist(),
            "objective_v": a.objective_v,
            "objective_k": a.objective_k,
            "achieved_bits": a.achieved_bits,
            "budget_bits": a.budget_bits,
            "converged_v": a.converged_v,
            "converged_k": a.converged_k,
        })
    doc = {"version": 1, "meta": meta or {}, "heads": heads}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def allocations_from_json(text: str) -> dict[tuple[int, int], HeadAllocation]:
    try:
        doc = json.loads(text)
        out = {}
        for item in doc["heads"]:
            v_bits = np.asarray(item["v_bits"], dtype=np.int64)
            out[(item["layer"], item["head"])] = HeadAllocation(
                layer=item["layer"],
                head=item["head"],
                v_bits=v_bits,
                k_bits=np.asarray(item["k_bits"], dtype=np.int64),
                kept=KeptSets.from_bits(v_bits),
                token_weights=np.asarray(item["token_weights"], dtype=np.float64),
                channel_weights=np.asarray(item["channel_weights"], dtype=np.float64),
                objective_v=float(item["objective_v"]),
                objective_k=float(item["objective_k"]),
                achieved_bits=float(item["achieved_bits"]),
                budget_bits=float(item["budget_bits"]),
                converged_v=bool(item.get("converged_v", True)),
                converged_k=bool(item.get("converged_k", True)),
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed allocation file: {exc}") from exc
    return out


def load_allocations(path) -> dict[tuple[int, int], HeadAllocation]:
    return allocations_from_json(Path(path).read_text())
