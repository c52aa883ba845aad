"""Command-line orchestration: fixtures, calibration, allocation, verification, sweeps and dumps."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import __version__
from .allocator import SolverConfig, action_set, dual_bound, mckp_bisect, mckp_bruteforce
from .cache_model import CacheShape, KVCache, ProbeConfig, gen_synthetic_cache, load_cache, save_cache
from .errors import RDKVError
from .pipeline import (
    BudgetSpec,
    head_weights,
    allocate_model,
    allocations_to_json,
    load_allocations,
    worker_count,
)
from .quantizer import BitSet, DistortionTable, calibrate_epsilon, dump_tables, load_tables
from .trizone import (
    append_new_token,
    build_trizone,
    dense_decode,
    dense_reconstruction,
    load_packed,
    packed_decode_step,
    save_packed,
    storage_report,
)

log = logging.getLogger("rdkv")


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    seq_id: str
    avg_bits: float
    primal: float
    dual: float
    feasible: bool


def _solve_point(w, eps, target, solver, method):
    """Primal and dual for one weight vector at one average width."""
    budget = target * w.size
    if method == "bruteforce":
        try:
            opt = mckp_bruteforce(w, eps, budget)
        except ValueError:
            # no assignment fits (e.g. quant-only below 2 bits)
            return float("inf"), -float("inf"), False
        return opt.objective, opt.objective, True
    alloc = mckp_bisect(w, eps, target, solver)
    bound = dual_bound(w, eps, alloc.lam, budget)
    return alloc.objective, bound.g_lambda, bound.feasible


def sweep_sequence(
    cache: KVCache,
    grid: Sequence[float],
    tables: Mapping[str, DistortionTable],
    actions: Sequence[int] = (0, 2, 4, 8, 16),
    kinds: Sequence[str] = ("v", "k"),
    probe: ProbeConfig = ProbeConfig(),
    solver: SolverConfig = SolverConfig(strict=True),
    method: str = "bisect",
    seq_id: str = "0",
) -> list[SweepRow]:
    """Weighted distortion and its Lagrangian lower bound across average widths.

    Each ``(layer, head, kind)`` is an independent knapsack at average width
    ``b``; the sequence's primal and dual are sums over them.
    """
    s = cache.shape
    weights = []
    for layer in range(s.layers):
        for h in range(s.kv_heads):
            k, _ = cache.head(layer, h)
            w_t, w_c = head_weights(k, cache.query_group(layer, h), probe)
            if "v" in kinds:
                weights.append((w_t, tables["v"].restrict(actions)))
            if "k" in kinds:
                weights.append((w_c, tables["k"].restrict(actions)))
    rows = []
    for target in grid:
        primal = dual = 0.0
        feasible = True
        for w, eps in weights:
            p, g, ok = _solve_point(w, eps, float(target), solver, method)
            primal += p
            dual += g
            feasible &= ok
        rows.append(SweepRow(seq_id, float(target), primal, dual, feasible))
    return rows


def aggregate(rows: Sequence[SweepRow]) -> list[SweepRow]:
    """Median and interquartile rows per grid point."""
    out = []
    grid = sorted({r.avg_bits for r in rows})
    for label, q in (("median", 50), ("q25", 25), ("q75", 75)):
        for b in grid:
            group = [r for r in rows if r.avg_bits == b]
            out.append(SweepRow(
                label, b,
                float(np.percentile([r.primal for r in group], q)),
                float(np.percentile([r.dual for r in group], q)),
                all(r.feasible for r in group),
            ))
    return out


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seq_id", "avg_bits", "primal", "dual", "feasible"])
    for r in rows:
        writer.writerow([r.seq_id, repr(r.avg_bits), repr(r.primal), repr(r.dual), int(r.feasible)])
    return buf.getvalue()


def read_sweep_csv(text: str) -> list[SweepRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(SweepRow(rec["seq_id"], float(rec["avg_bits"]), float(rec["primal"]),
                             float(rec["dual"]), rec["feasible"] == "1"))
    return rows


def _plot(rows: Sequence[SweepRow], path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    agg = {(r.seq_id, r.avg_bits): r for r in rows}
    grid = sorted({r.avg_bits for r in rows})
    med = [agg[("median", b)].primal for b in grid]
    lo = [agg[("q25", b)].primal for b in grid]
    hi = [agg[("q75", b)].primal for b in grid]
    dual = [agg[("median", b)].dual for b in grid]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(grid, med, marker="o", label="allocation (median)")
    ax.fill_between(grid, lo, hi, alpha=0.25)
    ax.plot(grid, dual, linestyle="--", label="Lagrangian lower bound")
    ax.set_xlabel("average bits")
    ax.set_ylabel("weighted distortion")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _solver(args) -> SolverConfig:
    return SolverConfig(args.delta, args.max_iter, args.strict_budget)


def _probe(args) -> ProbeConfig:
    return ProbeConfig(args.window, args.pool)


def cmd_gen(args) -> int:
    shape = CacheShape(args.layers, args.q_heads, args.kv_heads, args.head_dim, args.seq_len)
    cache = gen_synthetic_cache(args.seed, shape, args.outliers, args.outlier_scale, args.window)
    save_cache(cache, args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_calibrate(args) -> int:
    if not args.caches:
        raise SystemExit("calibrate: at least one cache file is required")
    caches = [load_cache(p) for p in args.caches]
    bits = BitSet.parse(args.bits)
    if args.granularity == "both":
        tables = {"v": calibrate_epsilon(caches, "token", bits),
                  "k": calibrate_epsilon(caches, "channel", bits)}
    else:
        t = calibrate_epsilon(caches, args.granularity, bits)
        tables = {"v" if args.granularity == "token" else "k": t}
    dump_tables(tables, args.out)
    return 0


def _require_pair(path) -> dict:
    tables = load_tables(path)
    missing = {"v", "k"} - set(tables)
    if missing:
        raise RDKVError(f"table file {path} lacks {sorted(missing)} table(s)")
    return tables


def cmd_allocate(args) -> int:
    cache = load_cache(args.cache)
    tables = _require_pair(args.tables)
    spec = BudgetSpec(args.budget_tokens, args.rk, BitSet.parse(args.bits))
    allocs = allocate_model(cache, spec, tables, _probe(args), _solver(args),
                            args.force_window_retain, args.threads)
    meta = {"n_tokens": args.budget_tokens, "r_k": args.rk, "bits": list(spec.bits.widths),
            "delta": args.delta, "max_iter": args.max_iter, "strict": args.strict_budget}
    Path(args.out_alloc).write_text(allocations_to_json(allocs, meta))
    packed = {key: build_trizone(*cache.head(*key), a) for key, a in allocs.items()}
    if args.out_packed:
        save_packed(packed, args.out_packed)

    achieved = sum(a.achieved_bits for a in allocs.values())
    budget = sum(a.budget_bits for a in allocs.values())
    flagged = [f"{k[0]}:{k[1]}" for k, a in allocs.items() if not (a.converged_v and a.converged_k)]
    summary = {
        "heads": len(allocs),
        "achieved_bits": achieved,
        "budget_bits": budget,
        "ratio": achieved / budget,
        "objective": sum(a.objective for a in allocs.values()),
        "unconverged_heads": flagged,
        "packed_bytes": sum(storage_report(c).cache_bytes for c in packed.values()),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def verify_packed(cache: KVCache, allocs, packed, queries: int = 8, new_tokens: int = 0,
                  seed: int = 0) -> dict:
    """Compare packed decode against the dense oracle over ``(K_hat, V_hat)`` for every head."""
    rng = np.random.default_rng(seed)
    d = cache.shape.head_dim
    worst = 0.0
    missing = []
    for key in sorted(allocs):
        if key not in packed:
            missing.append(key)
            continue
        k, v = cache.head(*key)
        _, k_hat, v_hat = dense_reconstruction(k, v, allocs[key])
        new_k = rng.standard_normal((new_tokens, d)).astype(np.float32)
        new_v = rng.standard_normal((new_tokens, d)).astype(np.float32)
        tz = packed[key]
        for i in range(new_tokens):
            tz = append_new_token(tz, new_k[i], new_v[i])
        for q in rng.standard_normal((queries, d)):
            ref = dense_decode(q, k_hat, v_hat, new_k, new_v)
            got = packed_decode_step(q, tz)
            err = float(np.abs(got - ref).max() / max(np.abs(ref).max(), 1e-30))
            worst = max(worst, err)
    return {"max_rel_error": worst, "missing_heads": [list(m) for m in missing]}


def cmd_verify(args) -> int:
    cache = load_cache(args.cache)
    allocs = load_allocations(args.allocation)
    try:
        packed = load_packed(args.packed)
        report = verify_packed(cache, allocs, packed, args.queries, args.new_tokens, args.seed)
    except (RDKVError, ValueError, IndexError) as exc:
        # a corrupted file is a failed verification, not a crash
        report = {"max_rel_error": None, "error": str(exc), "missing_heads": []}
    ok = report["max_rel_error"] is not None and report["max_rel_error"] < args.tol \
        and not report["missing_heads"]
    report["tolerance"] = args.tol
    report["status"] = "pass" if ok else "fail"
    print(json.dumps(report, sort_keys=True))
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    grid = [float(x) for x in args.grid.split(",") if x.strip()]
    if not grid:
        raise SystemExit("sweep: empty grid")
    if any(not 0 < b <= 16 for b in grid):
        raise SystemExit("sweep: grid values must lie in (0, 16]")
    tables = _require_pair(args.tables)
    actions = action_set(args.actions)
    kinds = ("v", "k") if args.kind == "both" else (args.kind,)
    solver = SolverConfig(args.delta, args.max_iter, strict=True)
    probe = _probe(args)

    def run(item):
        i, path = item
        return sweep_sequence(load_cache(path), grid, tables, actions, kinds, probe, solver,
                              args.solver, seq_id=str(i))

    with ThreadPoolExecutor(max_workers=worker_count(args.threads)) as pool:
        per_seq = list(pool.map(run, enumerate(args.caches)))
    rows = [r for seq in per_seq for r in seq]
    rows += aggregate(rows)
    Path(args.out).write_text(sweep_csv(rows))
    if args.plot:
        _plot(rows, Path(args.plot))
    return 0


def cmd_dump_bits(args) -> int:
    allocs = load_allocations(args.allocation)
    try:
        a = allocs[(args.layer, args.head)]
    except KeyError:
        raise SystemExit(f"dump-bits: no allocation for layer {args.layer}, head {args.head}") from None
    if args.kind == "token":
        weights, bits = a.token_weights, a.v_bits
    else:
        weights, bits = a.channel_weights, a.k_bits
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "weight", "bits"])
    for i, (w, b) in enumerate(zip(weights, bits)):
        writer.writerow([i, repr(float(w)), int(b)])
    Path(args.out).write_text(buf.getvalue())
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _add_solver_flags(p):
    p.add_argument("--bits", default="0,2,4,8,16", help="allowed bit-widths")
    p.add_argument("--delta", type=float, default=1e-2, help="relative tolerance on average bits")
    p.add_argument("--max-iter", type=_positive_int, default=64)
    p.add_argument("--window", type=_positive_int, default=32, help="probe window S_w")
    p.add_argument("--pool", type=_positive_int, default=5, help="odd pooling kernel")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker threads (default: $RDKV_THREADS or CPU count)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdkv", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic RDKVC001 cache")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=_positive_int, default=2)
    p.add_argument("--q-heads", type=_positive_int, default=8)
    p.add_argument("--kv-heads", type=_positive_int, default=2)
    p.add_argument("--head-dim", type=_positive_int, default=64)
    p.add_argument("--seq-len", type=_positive_int, default=512)
    p.add_argument("--window", type=_positive_int, default=32)
    p.add_argument("--outliers", type=int, default=0, help="outlier K channels per head")
    p.add_argument("--outlier-scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("calibrate", help="estimate distortion tables from caches")
    p.add_argument("caches", nargs="*")
    p.add_argument("--granularity", choices=("token", "channel", "both"), default="both")
    p.add_argument("--bits", default="0,2,4,8,16")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("allocate", help="allocate bits and pack every head")
    p.add_argument("--cache", required=True)
    p.add_argument("--tables", required=True)
    p.add_argument("--budget-tokens", type=float, required=True,
                   help="FP16-equivalent tokens per layer")
    p.add_argument("--rk", type=float, default=0.5, help="share of each head's bits given to K")
    p.add_argument("--force-window-retain", action="store_true",
                   help="pin probe-window tokens at 16 bits")
    p.add_argument("--strict-budget", action="store_true",
                   help="never return an over-budget allocation")
    p.add_argument("--out-alloc", required=True)
    p.add_argument("--out-packed")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("verify", help="check packed decode against the dense oracle")
    p.add_argument("--cache", required=True)
    p.add_argument("--allocation", required=True)
    p.add_argument("--packed", required=True)
    p.add_argument("--queries", type=_positive_int, default=8)
    p.add_argument("--new-tokens", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="distortion vs average bits with duality bound")
    p.add_argument("caches", nargs="+")
    p.add_argument("--tables", required=True)
    p.add_argument("--grid", default="1,2,4,8,16")
    p.add_argument("--actions", default="full",
                   choices=("full", "evict-only", "quant-only", "tri-state"))
    p.add_argument("--kind", choices=("v", "k", "both"), default="both")
    p.add_argument("--solver", choices=("bisect", "bruteforce"), default="bisect")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="optional image path for the curve")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-bits", help="per-unit weight and bit-width CSV for one head")
    p.add_argument("--allocation", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--head", type=int, required=True)
    p.add_argument("--kind", choices=("token", "channel"), default="token")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_bits)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (RDKVError, ValueError, OSError) as exc:
        parser.exit(2, f"rdkv {args.command}: error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
