"""Command-line driver: calibrate -> search -> realize -> eval, mediated by files.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .binding import SignatureMismatch, SimulatedGraph, Strategy, bind
from .calibration import CalibrationStats, collect_stats, estimate_threshold
from .graph import Graph, GraphError, edge_order, validate_graph
from .hwspec import HardwareSpec, SpecError, parse_spec
from .interpreter import EvalError, evaluate, predictions
from .io import FormatError, graph_fingerprint, load_dataset, load_graph, read_json, save_graph, write_json
from .realize import RealizeError, realize
from .search import (METHODS, BatchEvaluationError, CandidateEvaluator, build_search_space, memoize,
                     space_size)
from .topology import ConstraintError, generate_topology, insert_simulated_quantize

WORKERS_ENV = "HWQUANT_WORKERS"
EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# loaders


def _model(path) -> Graph:
    g = load_graph(path)
    report = validate_graph(g)
    if report:
        raise ValidationError(f"{path}: invalid graph: " + "; ".join(report))
    return g


def _spec(path) -> HardwareSpec:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"spec file not found: {p}")
    try:
        return parse_spec(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: {exc}") from None


def _simulated(g: Graph, spec: HardwareSpec):
    t = generate_topology(g, spec)
    return t, insert_simulated_quantize(g, t)


def _default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValidationError(f"{WORKERS_ENV}={raw!r} is not an integer") from None


# ---------------------------------------------------------------------------
# commands


def cmd_calibrate(args) -> int:
    g = _model(args.model)
    spec = _spec(args.spec)
    ds = load_dataset(args.dataset)
    _, sg = _simulated(g, spec)
    sim = SimulatedGraph(sg)
    stats = collect_stats(g, ds, bins=args.bins, edges=sim.edges)
    opts = {"method": args.method, "q": args.q, "kl_bits": args.kl_bits, "pow2": args.pow2}
    thr = {e: estimate_threshold(s, **opts) for e, s in stats.per_edge.items()}
    stats.graph_fingerprint = graph_fingerprint(g)
    stats.meta = {"estimator": opts, "thresholds": {str(e): thr[e] for e in sorted(thr)}}
    write_json(args.out, stats.to_json())

    canon = edge_order(g)
    print(f"{'edge':>5} {'src':>5} {'dst':>8} {'min':>12} {'max':>12} {'threshold':>12}")
    for e in sorted(thr):
        s = stats.per_edge[e]
        src, dst = canon[e].src[0], canon[e].dst
        print(f"{e:>5} {src:>5} {dst[0]:>5}:{dst[1]:<2} {s.min:>12.6g} {s.max:>12.6g} {thr[e]:>12.6g}")
    print(f"wrote {args.out} ({len(thr)} edges, method {args.method})")
    return EXIT_OK


def _load_stats(path, g: Graph) -> tuple[CalibrationStats, dict[int, float]]:
    doc = read_json(path, "stats file")
    try:
        stats = CalibrationStats.from_json(doc)
        thr = {int(k): float(v) for k, v in stats.meta["thresholds"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed stats file ({exc!r})") from None
    if stats.graph_fingerprint != graph_fingerprint(g):
        raise ValidationError(f"{path}: stats were collected on a different graph (fingerprint mismatch)")
    return stats, thr


def cmd_search(args) -> int:
    g = _model(args.model)
    spec = _spec(args.spec)
    stats, thr = _load_stats(args.stats, g)
    ds = load_dataset(args.dataset)
    t, sg = _simulated(g, spec)
    space = build_search_space(t, spec, min_bit=args.min_bit)
    missing = [e for e in space.edges if e not in thr]
    if missing:
        raise ValidationError(f"stats do not cover searchable edges {missing}")
    lows = {e: s.min for e, s in stats.per_edge.items()}
    workers = args.workers if args.workers is not None else _default_workers()
    ev = CandidateEvaluator(sg, thr, ds, lows=lows)
    loss = memoize(ev.loss)

    def bulk(cands):
        fresh = sorted({tuple(c) for c in cands} - set(loss.cache))
        for c, l in zip(fresh, ev.batch(fresh, workers)):
            loss.cache[c] = l
        return [loss(c) for c in cands]

    if args.method == "greedy":
        best, trace = METHODS["greedy"](space, loss, rounds=args.rounds, tol=args.tol)
    elif args.method == "anneal":
        best, trace = METHODS["anneal"](space, loss, steps=args.steps, T0=args.t0,
                                        decay=args.decay, seed=args.seed)
    elif args.method == "random":
        best, trace = METHODS["random"](space, loss, n=args.samples, seed=args.seed, batch_eval=bulk)
    else:
        best, trace = METHODS["exhaustive"](space, loss, batch_eval=bulk)

    binding = bind(ev.sim, space.as_bits(best), ev.thresholds, lows)
    doc = binding.strategy.to_json()
    doc["meta"] = {"method": args.method, "loss": loss(best), "space_size": str(space_size(space)),
                   "evaluations": trace.evaluations, "graph_fingerprint": graph_fingerprint(g)}
    write_json(args.out, doc)
    if args.trace:
        Path(args.trace).write_text(trace.to_jsonl())
    print(f"final loss {loss(best):.6f}, evaluations {trace.evaluations}, space size {space_size(space)}")
    print(f"bits {list(best)}")
    return EXIT_OK


def _load_strategy(path) -> Strategy:
    doc = read_json(path, "strategy file")
    try:
        return Strategy.from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed strategy file ({exc!r})") from None


def _dtype_summary(g: Graph) -> str:
    c = Counter()
    for n in g.nodes:
        if n.op in ("quantize", "requantize"):
            c[n.attrs["out_dtype"]] += 1
        elif "acc_dtype" in n.attrs:
            c[f"acc:{n.attrs['acc_dtype']}"] += 1
        elif n.op == "constant":
            c[f"const:{np.asarray(n.attrs['value']).dtype}"] += 1
    return ", ".join(f"{k}={v}" for k, v in sorted(c.items()))


def cmd_realize(args) -> int:
    g = _model(args.model)
    spec = _spec(args.spec)
    strategy = _load_strategy(args.strategy)
    _, sg = _simulated(g, spec)
    out = realize(sg, strategy)
    save_graph(out, args.out)
    delta = len(out.nodes) - len(g.nodes)
    ops = Counter(n.op for n in out.nodes)
    print(f"nodes {len(g.nodes)} -> {len(out.nodes)} ({delta:+d}); "
          f"quantize={ops['quantize']} requantize={ops['requantize']} dequantize={ops['dequantize']}")
    print(f"dtypes: {_dtype_summary(out)}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ga, gb = _model(args.model_a), _model(args.model_b)
    ds = load_dataset(args.dataset)
    sample = ds.samples[0]
    for path, g in ((args.model_a, ga), (args.model_b, gb)):
        for nid in g.inputs:
            n = g.node(nid)
            got = np.shape(sample.get(n.attrs["name"], ()))
            if n.attrs["name"] not in sample or tuple(got[1:]) != tuple(n.attrs["shape"][1:]):
                raise ValidationError(f"{path}: input {n.attrs['name']!r} {list(n.attrs['shape'])} "
                                      f"is incompatible with the dataset ({list(got)})")
    a = evaluate(ga, ds, overflow_mode=args.overflow_mode).astype(np.float64)
    b = evaluate(gb, ds, overflow_mode=args.overflow_mode).astype(np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"output shapes differ: {a.shape} vs {b.shape}")
    pa, pb = predictions(a), predictions(b)
    report = {"samples": len(ds), "top1_agreement": float(np.mean(pa == pb)),
              "mean_abs_diff": float(np.mean(np.abs(a - b)))}
    if ds.labels is not None:
        y = np.asarray(ds.labels)
        report["accuracy_a"] = float(np.mean(pa == y))
        report["accuracy_b"] = float(np.mean(pb == y))
        report["accuracy_drop"] = report["accuracy_a"] - report["accuracy_b"]
    for k, v in report.items():
        print(f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}")
    if args.out:
        write_json(args.out, report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hwquant", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", help="collect per-edge statistics and thresholds")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-s", "--spec", required=True)
    p.add_argument("-d", "--dataset", required=True)
    p.add_argument("--method", choices=("max", "quantile", "kl"), default="quantile")
    p.add_argument("--q", type=float, default=0.99)
    p.add_argument("--kl-bits", type=int, default=8)
    p.add_argument("--pow2", action="store_true", help="round thresholds to powers of two")
    p.add_argument("--bins", type=int, default=2048)
    p.add_argument("-o", "--out", default="stats.json")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("search", help="search per-edge effective bits")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-s", "--spec", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("-d", "--dataset", required=True, help="calibration dataset used for the loss")
    p.add_argument("--method", choices=tuple(METHODS), default="greedy")
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--tol", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-bit", type=int, default=4)
    p.add_argument("--steps", type=int, default=1000, help="annealing steps")
    p.add_argument("--t0", type=float, default=0.1)
    p.add_argument("--decay", type=float, default=0.995)
    p.add_argument("--samples", type=int, default=100, help="random-search draws")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("-o", "--out", default="strategy.json")
    p.add_argument("--trace", default=None)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("realize", help="lower to an integer graph")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-s", "--spec", required=True)
    p.add_argument("--strategy", required=True)
    p.add_argument("-o", "--out", default="realized.json")
    p.set_defaults(func=cmd_realize)

    p = sub.add_parser("eval", help="compare two models on a dataset")
    p.add_argument("model_a")
    p.add_argument("model_b")
    p.add_argument("-d", "--dataset", required=True)
    p.add_argument("--overflow-mode", choices=("saturate", "trap"), default="saturate")
    p.add_argument("-o", "--out", default=None)
    p.set_defaults(func=cmd_eval)
    return ap


_VALIDATION = (ValidationError, FileNotFoundError, FormatError, GraphError, SpecError,
               ConstraintError, SignatureMismatch, RealizeError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except _VALIDATION as exc:
        print(f"hwquant {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EvalError, BatchEvaluationError, ValueError, ArithmeticError) as exc:
        print(f"hwquant {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
