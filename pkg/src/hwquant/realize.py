"""Lower a simulated graph plus a strategy to an integer graph."""
from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np

from .binding import (Binding, EdgeChoice, SignatureMismatch, SimulatedGraph, Strategy,
                      bind_strategy)
from .fixedpoint import RequantParams, fixed_point_multiply, requantize_params
from .graph import DType, Edge, Graph, Node, traversal_order, validate_graph
from .interpreter import _quantize_node, _requantize_node
from .simulate import quant_bounds, quantize_codes, round_half_away

__all__ = [
    "RealizeError", "RequantParams", "Strategy", "EdgeChoice", "SignatureMismatch",
    "choose_storage_dtype", "requantize_params", "fixed_point_multiply", "rewrite_clip",
    "realize", "requant_params_of",
]


class RealizeError(ValueError):
    pass


def choose_storage_dtype(bit: int, candidates: Sequence[DType], sign: Optional[int] = None) -> DType:
    """Narrowest candidate that holds ``bit`` effective bits (and matches sign if given)."""
    if not candidates:
        raise RealizeError("no candidate dtypes")
    fits = [d for d in candidates if d.is_int and d.width >= bit
            and (sign is None or d.signed == bool(sign))]
    if not fits:
        names = ", ".join(d.value for d in candidates)
        raise RealizeError(f"no candidate dtype among [{names}] holds {bit} bits")
    return min(fits, key=lambda d: (d.width, not d.signed))


def rewrite_clip(min_f: float, max_f: float, s_out: float, zero_point: int,
                 dtype: DType = DType.int8) -> tuple[int, int]:
    if not s_out > 0:
        raise ValueError(f"scale must be positive, got {s_out}")
    if min_f > max_f:
        raise ValueError("clip bounds reversed")
    lo = int(round_half_away(np.float64(min_f / s_out))) + zero_point
    hi = int(round_half_away(np.float64(max_f / s_out))) + zero_point
    return max(lo, dtype.min), min(hi, dtype.max)


def _f32(x: float) -> float:
    return float(np.float32(x))


def _requant_attrs(s_in, s_out, in_zp, out_zp, dtype: DType, qmin, qmax) -> dict:
    rp = requantize_params(s_in, s_out)
    return {"multiplier": rp.multiplier, "shift": rp.shift, "in_scale": _f32(s_in),
            "out_scale": _f32(s_out), "in_zero_point": int(in_zp), "out_zero_point": int(out_zp),
            "out_dtype": dtype.value, "clip_min": int(qmin), "clip_max": int(qmax)}


def _annotate(n: Node, sim: SimulatedGraph, b: Binding) -> Node:
    sig = b.signatures[n.id]
    in_edges = sim.input_edges(n.id)
    choices = [b.strategy[e] for e in in_edges]
    attrs = {k: v for k, v in n.attrs.items() if k != "signatures"}
    attrs["acc_dtype"] = sig.out_dtype.value
    attrs["in_dtypes"] = [d.value for d in sig.in_dtypes]
    attrs["input_zero_points"] = [c.zero_point for c in choices]
    if n.op in ("conv2d", "dense") and attrs.get("bias") is not None:
        acc = sig.out_dtype
        s_acc = choices[0].scale * choices[1].scale
        q = round_half_away(np.asarray(attrs["bias"], np.float64) / s_acc)
        attrs["bias"] = np.clip(q, acc.min, acc.max).astype(acc.np)
    elif n.op == "clip":
        c = choices[0]
        attrs["a_min"], attrs["a_max"] = rewrite_clip(float(n.attrs["a_min"]), float(n.attrs["a_max"]),
                                                      c.scale, c.zero_point, sig.out_dtype)
    return Node(n.id, n.op, attrs)


def realize(sim_g: Graph, strategy: Mapping[int, EdgeChoice], check: bool = True) -> Graph:
    """Replace simulated_quantize nodes with quantize / requantize / dequantize.

    Weight quantizers are folded into integer constants. Inputs of an integer
    add are brought to a common scale (that of the larger-threshold input) by
    an extra requantize. Requantization happens after bias-add, in the
    accumulator dtype.
    """
    sim = SimulatedGraph(sim_g)
    if not sim.quant_nodes and not sim.edges and not sim.boundaries:
        return sim_g
    b = bind_strategy(sim, strategy)
    g = sim_g
    nodes: dict[int, Node] = {}
    for n in g.nodes:
        if n.op == "simulated_quantize":
            u = sim.producer(n.id)
            if n.attrs.get("role") == "boundary":
                nodes[n.id] = Node(n.id, "dequantize", {"scale": _f32(b.out_scale[u]),
                                                        "zero_point": int(b.out_zero_point[u])})
                continue
            c = b.strategy[int(n.attrs["edge"])]
            qmin, qmax = b.params[n.id].bounds
            if u in b.signatures:
                attrs = _requant_attrs(b.out_scale[u], c.scale, b.out_zero_point[u], c.zero_point,
                                       c.storage_dtype, qmin, qmax)
                nodes[n.id] = Node(n.id, "requantize", attrs)
            else:
                nodes[n.id] = Node(n.id, "quantize", {
                    "scale": _f32(c.scale), "zero_point": c.zero_point,
                    "out_dtype": c.storage_dtype.value, "clip_min": qmin, "clip_max": qmax})
        elif n.id in b.signatures:
            nodes[n.id] = _annotate(n, sim, b)
        else:
            nodes[n.id] = n

    edges = list(g.edges)
    next_id = g.next_id()
    for v in sim.quant_nodes:
        if g.node(v).op != "add":
            continue
        sig = b.signatures[v]
        target = b.out_scale[v]
        zps = list(nodes[v].attrs["input_zero_points"])
        for port, (sq, e) in enumerate(zip(g.producers(v), sim.input_edges(v))):
            c = b.strategy[e]
            if c.scale == target and c.zero_point == 0:
                continue
            dt = sig.in_dtypes[port]
            nodes[next_id] = Node(next_id, "requantize",
                                  _requant_attrs(c.scale, target, c.zero_point, 0, dt, dt.min, dt.max))
            old = Edge((sq, 0), (v, port))
            edges[edges.index(old)] = Edge((sq, 0), (next_id, 0))
            edges.append(Edge((next_id, 0), (v, port)))
            zps[port] = 0
            next_id += 1
        attrs = dict(nodes[v].attrs)
        attrs["input_zero_points"] = zps
        nodes[v] = Node(v, "add", attrs)

    out = _fold_constants(Graph(list(nodes.values()), edges, g.inputs, g.outputs))
    out = _drop_dead(out)
    if check:
        report = validate_graph(out)
        if report:
            raise RealizeError("realized graph is invalid: " + "; ".join(report))
    return out


def _fold_constants(g: Graph) -> Graph:
    """Evaluate quantize / requantize nodes whose input is a constant."""
    nodes = dict(g.by_id)
    edges = list(g.edges)
    for nid in traversal_order(g):
        n = nodes[nid]
        if n.op not in ("quantize", "requantize"):
            continue
        (src,) = [e.src[0] for e in edges if e.dst[0] == nid]
        if nodes[src].op != "constant":
            continue
        value = np.asarray(nodes[src].attrs["value"])
        folded = _quantize_node(n, value) if n.op == "quantize" else _requantize_node(n, value)
        nodes[nid] = Node(nid, "constant", {"value": folded})
        edges = [e for e in edges if e.dst[0] != nid]
    return Graph(list(nodes.values()), edges, g.inputs, g.outputs)


def _drop_dead(g: Graph) -> Graph:
    live = {nid for nid, _ in g.outputs} | set(g.inputs)
    stack = list(live)
    while stack:
        for p in g.producers(stack.pop()):
            if p not in live:
                live.add(p)
                stack.append(p)
    nodes = [n for n in g.nodes if n.id in live]
    edges = [e for e in g.edges if e.src[0] in live and e.dst[0] in live]
    return Graph(nodes, edges, g.inputs, g.outputs)


def requant_params_of(g: Graph) -> list[RequantParams]:
    """(multiplier, shift) of every requantize node in a realized graph."""
    return [RequantParams(int(n.attrs["multiplier"]), int(n.attrs["shift"]))
            for n in g.nodes if n.op == "requantize"]


def weight_codes(value: np.ndarray, c: EdgeChoice) -> np.ndarray:
    lo, hi = quant_bounds(c.bit, c.sign)
    lo, hi = max(lo, c.storage_dtype.min), min(hi, c.storage_dtype.max)
    return quantize_codes(value, c.scale, c.zero_point, lo, hi).astype(c.storage_dtype.np)
