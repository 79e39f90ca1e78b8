"""Quantized / non-quantized vertex partition and simulated-quantize insertion."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .graph import SOURCE_OPS, DType, Edge, Graph, Node, edge_order, traversal_order
from .hwspec import HardwareSpec, OpClass, classify_op


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    qv: frozenset[int]
    nqv: frozenset[int]
    edge_dtypes: dict[Edge, tuple[DType, ...]]
    fixed_edges: dict[Edge, DType]
    edge_index: dict[Edge, int]
    classes: dict[int, OpClass] = field(default_factory=dict)
    signatures: dict[int, list] = field(default_factory=dict)

    def searchable_edges(self) -> list[Edge]:
        """Edges that get a searchable simulated_quantize, in canonical order."""
        return sorted(self.edge_dtypes, key=self.edge_index.__getitem__)

    def to_json(self) -> dict:
        return {
            "qv": sorted(self.qv),
            "nqv": sorted(self.nqv),
            "edges": {
                str(self.edge_index[e]): {
                    "src": list(e.src), "dst": list(e.dst),
                    "candidates": [d.value for d in self.edge_dtypes[e]] if e in self.edge_dtypes else None,
                    "fixed": self.fixed_edges[e].value if e in self.fixed_edges else None,
                }
                for e in sorted(self.edge_index, key=self.edge_index.__getitem__)
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _dtype_key(d: DType):
    return (d.width, not d.signed)


def generate_topology(g: Graph, spec: HardwareSpec) -> Topology:
    order = traversal_order(g)
    qv: set[int] = set()
    nqv: set[int] = set()
    classes: dict[int, OpClass] = {}
    for v in order:
        n = g.node(v)
        if n.op in SOURCE_OPS:
            continue
        cls = classify_op(spec, n.op)
        classes[v] = cls
        if cls is OpClass.float_only:
            nqv.add(v)
        elif cls is OpClass.integer_only:
            qv.add(v)
        elif all(s in nqv or g.node(s).op in SOURCE_OPS for s in g.producers(v)):
            nqv.add(v)
        else:
            qv.add(v)

    # sources follow their consumers
    for v in order:
        if g.node(v).op in SOURCE_OPS:
            cons = g.consumers(v)
            (qv if cons and all(c in qv for c in cons) else nqv).add(v)

    index = {e: i for i, e in enumerate(edge_order(g))}
    edge_dtypes: dict[Edge, tuple[DType, ...]] = {}
    fixed: dict[Edge, DType] = {}
    signatures: dict[int, list] = {}
    for v in qv:
        n = g.node(v)
        if n.op in SOURCE_OPS:
            continue
        sigs = spec.integer_signatures(n.op)
        if not sigs:
            raise ConstraintError(f"node {v} ({n.op}) is quantized but the hardware offers "
                                  "no integer signature for it")
        signatures[v] = sigs
    for e in g.edges:
        dst = e.dst[0]
        if dst in qv:
            cands = {s.in_dtypes[e.dst[1]] for s in signatures[dst]}
            edge_dtypes[e] = tuple(sorted(cands, key=_dtype_key))
        else:
            fixed[e] = DType.float32
    return Topology(frozenset(qv), frozenset(nqv), edge_dtypes, fixed, index, classes, signatures)


def _is_quantized_op(g: Graph, t: Topology, nid: int) -> bool:
    return nid in t.qv and g.node(nid).op not in SOURCE_OPS


def insert_simulated_quantize(g: Graph, t: Topology) -> Graph:
    """Insert one simulated_quantize per qualifying edge.

    Edges into quantized vertices get a searchable quantizer; edges and graph
    outputs leaving a quantized vertex toward float code get a float32
    boundary that only models accumulator overflow. Inserted nodes start in
    pass-through mode.
    """
    nodes: list[Node] = []
    for n in g.nodes:
        if _is_quantized_op(g, t, n.id):
            attrs = dict(n.attrs)
            attrs["signatures"] = [s.to_json() for s in t.signatures[n.id]]
            nodes.append(Node(n.id, n.op, attrs))
        else:
            nodes.append(n)

    next_id = g.next_id()
    edges: list[Edge] = []
    for e in sorted(g.edges, key=t.edge_index.__getitem__):
        src, dst = e.src[0], e.dst[0]
        attrs = None
        if e in t.edge_dtypes:
            attrs = {
                "edge": t.edge_index[e],
                "role": "quantize",
                "candidates": [d.value for d in t.edge_dtypes[e]],
            }
        elif _is_quantized_op(g, t, src):
            attrs = {"edge": t.edge_index[e], "role": "boundary"}
        if attrs is None:
            edges.append(e)
            continue
        attrs.update(_unbound_slots())
        nodes.append(Node(next_id, "simulated_quantize", attrs))
        edges.append(Edge(e.src, (next_id, 0)))
        edges.append(Edge((next_id, 0), e.dst))
        next_id += 1

    outputs = []
    for k, (nid, port) in enumerate(g.outputs):
        if _is_quantized_op(g, t, nid):
            attrs = {"edge": None, "output": k, "role": "boundary"}
            attrs.update(_unbound_slots())
            nodes.append(Node(next_id, "simulated_quantize", attrs))
            edges.append(Edge((nid, port), (next_id, 0)))
            outputs.append((next_id, 0))
            next_id += 1
        else:
            outputs.append((nid, port))
    return Graph(nodes, edges, g.inputs, outputs)


def _unbound_slots() -> dict:
    return {"in_dtype": None, "out_dtype": None, "bit": None, "threshold": None,
            "sign": None, "zero_point": 0, "passthrough": True}


@dataclass(frozen=True)
class Segment:
    nodes: frozenset[int]
    interior: tuple[Edge, ...]
    boundary: tuple[Edge, ...]


@dataclass(frozen=True)
class Partition:
    segments: tuple[Segment, ...]
    remainder_nodes: frozenset[int]
    remainder_edges: tuple[Edge, ...]

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)


def partition_segments(g: Graph, t: Topology) -> Partition:
    """Maximal connected groups of quantized operator vertices."""
    order = traversal_order(g)
    members = [v for v in order if _is_quantized_op(g, t, v)]
    parent = {v: v for v in members}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for e in g.edges:
        a, b = e.src[0], e.dst[0]
        if a in parent and b in parent:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

    groups: dict[int, list[int]] = {}
    for v in members:
        groups.setdefault(find(v), []).append(v)
    first = {v: i for i, v in enumerate(order)}
    segs = []
    covered: set[Edge] = set()
    for root in sorted(groups, key=lambda r: first[groups[r][0]]):
        nodes = frozenset(groups[root])
        interior = tuple(e for e in g.edges if e.src[0] in nodes and e.dst[0] in nodes)
        boundary = tuple(e for e in g.edges if (e.src[0] in nodes) != (e.dst[0] in nodes))
        covered.update(interior)
        covered.update(boundary)
        segs.append(Segment(nodes, interior, boundary))
    in_segments = set().union(*(s.nodes for s in segs)) if segs else set()
    remainder_nodes = frozenset(n.id for n in g.nodes if n.id not in in_segments)
    remainder_edges = tuple(e for e in g.edges if e not in covered)
    return Partition(tuple(segs), remainder_nodes, remainder_edges)
