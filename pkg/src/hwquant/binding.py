"""Bind per-edge (bit, threshold) choices onto a simulated graph.

Binding selects, for every quantized operator, the narrowest hardware
signature whose input dtypes can hold the chosen effective bits, derives the
storage dtype, sign and scale of every quantized edge, and the accumulator
dtype/scale seen by downstream quantizers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Optional

from .graph import DType, Graph, infer_shapes, traversal_order
from .hwspec import Signature, signature
from .simulate import QParams, asymmetric_params, compute_scale


class SignatureMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EdgeChoice:
    bit: int
    threshold: float
    sign: int
    zero_point: int
    storage_dtype: DType

    @property
    def scale(self) -> float:
        return compute_scale(self.threshold, self.bit, self.sign)

    def to_json(self) -> dict:
        return {"bit": self.bit, "threshold": self.threshold, "sign": self.sign,
                "zero_point": self.zero_point, "storage_dtype": self.storage_dtype.value}


class Strategy(dict):
    """Canonical edge index -> EdgeChoice."""

    def bits(self) -> dict[int, int]:
        return {e: c.bit for e, c in self.items()}

    def to_json(self) -> dict:
        return {"edges": {str(e): self[e].to_json() for e in sorted(self)}}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, doc: Mapping) -> "Strategy":
        out = cls()
        for k, v in doc["edges"].items():
            out[int(k)] = EdgeChoice(int(v["bit"]), float(v["threshold"]), int(v["sign"]),
                                     int(v["zero_point"]), DType.parse(v["storage_dtype"]))
        return out


@dataclass
class Binding:
    params: dict[int, QParams]          # simulated_quantize node id -> params
    signatures: dict[int, Signature]    # quantized op -> selected signature
    out_scale: dict[int, float]         # quantized op -> scale of its integer output
    out_zero_point: dict[int, int]
    strategy: Strategy


class SimulatedGraph:
    """Read-only structural view of a graph produced by insert_simulated_quantize."""

    def __init__(self, g: Graph):
        self.graph = g
        self.order = traversal_order(g)
        self.quant_nodes = [v for v in self.order if "signatures" in g.node(v).attrs]
        self.sq_by_edge: dict[int, int] = {}
        self.boundaries: list[int] = []
        for v in self.order:
            n = g.node(v)
            if n.op != "simulated_quantize":
                continue
            if n.attrs.get("role") == "quantize":
                self.sq_by_edge[int(n.attrs["edge"])] = v
            else:
                self.boundaries.append(v)
        self.edges = sorted(self.sq_by_edge)
        self.candidates = {e: tuple(DType.parse(d) for d in g.node(self.sq_by_edge[e]).attrs["candidates"])
                           for e in self.edges}
        self.sigs = {v: [signature(s["in"], s["out"]) for s in g.node(v).attrs["signatures"]]
                     for v in self.quant_nodes}

    @cached_property
    def shapes(self):
        return infer_shapes(self.graph)

    def producer(self, nid: int) -> int:
        return self.graph.producers(nid)[0]

    def edge_of(self, sq_id: int) -> Optional[int]:
        return self.graph.node(sq_id).attrs.get("edge")

    def hi_bits(self) -> dict[int, int]:
        return {e: max(d.width for d in self.candidates[e]) for e in self.edges}

    def input_edges(self, v: int) -> list[int]:
        """Canonical edge index feeding each input port of a quantized op."""
        return [self.edge_of(p) for p in self.graph.producers(v)]


def select_signature(sigs: list[Signature], bits: list[int]) -> Optional[Signature]:
    for s in sigs:
        if all(b <= d.width for b, d in zip(bits, s.in_dtypes)):
            return s
    return None


def bind(sim: SimulatedGraph, bits: Mapping[int, int], thresholds: Mapping[int, float],
         lows: Optional[Mapping[int, float]] = None,
         zero_points: Optional[Mapping[int, int]] = None) -> Binding:
    """Resolve QParams for every simulated_quantize node.

    ``lows`` (per edge minimum) only matters for unsigned edges; when
    ``zero_points`` is given, unsigned thresholds are taken as the full range.
    """
    g = sim.graph
    lows = lows or {}
    choice: dict[int, EdgeChoice] = {}
    sigs: dict[int, Signature] = {}
    out_scale: dict[int, float] = {}
    out_zp: dict[int, int] = {}

    for v in sim.quant_nodes:
        n = g.node(v)
        in_edges = sim.input_edges(v)
        in_bits = [int(bits[e]) for e in in_edges]
        sig = select_signature(sim.sigs[v], in_bits)
        if sig is None:
            raise SignatureMismatch(f"node {v} ({n.op}): no hardware signature holds bits {in_bits}")
        sigs[v] = sig
        for e, b, dt in zip(in_edges, in_bits, sig.in_dtypes):
            thr = float(thresholds[e])
            if dt.signed:
                c = EdgeChoice(b, thr, 1, 0, dt)
            elif zero_points is not None and e in zero_points:
                c = EdgeChoice(b, thr, 0, int(zero_points[e]), dt)
            else:
                rng, zp = asymmetric_params(float(lows.get(e, 0.0)), thr, b)
                c = EdgeChoice(b, rng, 0, zp, dt)
            if e in choice and choice[e] != c:
                raise SignatureMismatch(f"edge {e} bound twice with different choices")
            choice[e] = c
        scales = [choice[e].scale for e in in_edges]
        zps = [choice[e].zero_point for e in in_edges]
        if n.op in ("conv2d", "dense"):
            out_scale[v], out_zp[v] = scales[0] * scales[1], 0
        elif n.op == "add":
            thr = [choice[e].threshold for e in in_edges]
            k = max(range(len(thr)), key=lambda i: (thr[i], -i))
            out_scale[v], out_zp[v] = scales[k], 0
        elif n.op == "global_avg_pool2d":
            _, _, h, w = sim.shapes[g.producers(v)[0]]
            out_scale[v], out_zp[v] = scales[0] / (h * w), 0
        else:
            out_scale[v], out_zp[v] = scales[0], zps[0]

    params: dict[int, QParams] = {}
    for e in sim.edges:
        sq = sim.sq_by_edge[e]
        c = choice[e]
        acc_dtype, acc_scale = _accumulator(sim, sq, sigs, out_scale, out_zp)
        params[sq] = QParams(c.threshold, c.bit, c.sign, c.storage_dtype, c.zero_point,
                             acc_dtype, acc_scale)
    for sq in sim.boundaries:
        acc_dtype, acc_scale = _accumulator(sim, sq, sigs, out_scale, out_zp)
        params[sq] = QParams(math.inf, 0, 1, DType.float32, 0, acc_dtype, acc_scale)
    strategy = Strategy((e, choice[e]) for e in sim.edges)
    return Binding(params, sigs, out_scale, out_zp, strategy)


def _accumulator(sim, sq, sigs, out_scale, out_zp):
    u = sim.producer(sq)
    if u in sigs and out_zp[u] == 0:
        return sigs[u].out_dtype, out_scale[u]
    return None, None


def bind_strategy(sim: SimulatedGraph, strategy: Mapping[int, EdgeChoice]) -> Binding:
    missing = [e for e in sim.edges if e not in strategy]
    if missing:
        raise SignatureMismatch(f"strategy does not cover edges {missing}")
    b = bind(sim, {e: c.bit for e, c in strategy.items()},
             {e: c.threshold for e, c in strategy.items()},
             zero_points={e: c.zero_point for e, c in strategy.items() if c.sign == 0})
    for e in sim.edges:
        if b.strategy[e].storage_dtype != strategy[e].storage_dtype:
            raise SignatureMismatch(
                f"edge {e}: strategy stores {strategy[e].storage_dtype} but the hardware "
                f"signature selected for bit {strategy[e].bit} uses {b.strategy[e].storage_dtype}")
    return b


def bound_graph(sim: SimulatedGraph, binding: Binding) -> Graph:
    """Copy of the simulated graph with QParams written into node attrs."""
    from .graph import Node

    nodes = []
    for n in sim.graph.nodes:
        p = binding.params.get(n.id)
        if p is None:
            nodes.append(n)
            continue
        attrs = dict(n.attrs)
        attrs.update({
            "in_dtype": p.acc_dtype.value if p.acc_dtype else "float32",
            "out_dtype": p.dtype.value,
            "bit": p.bit if p.dtype.is_int else None,
            "threshold": p.threshold if p.dtype.is_int else None,
            "sign": p.sign,
            "zero_point": p.zero_point,
            "acc_dtype": p.acc_dtype.value if p.acc_dtype else None,
            "acc_scale": p.acc_scale,
            "passthrough": False,
        })
        nodes.append(Node(n.id, n.op, attrs))
    g = sim.graph
    return Graph(nodes, g.edges, g.inputs, g.outputs)
