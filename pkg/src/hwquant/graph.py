"""Dataflow graph IR: datatypes, nodes, edges, validation and traversal orders."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping, NamedTuple

import numpy as np


class GraphError(ValueError):
    pass


class CycleError(GraphError):
    def __init__(self, node_id: int):
        super().__init__(f"cycle detected through node {node_id}")
        self.node_id = node_id


class DType(enum.Enum):
    float32 = "float32"
    int8 = "int8"
    uint8 = "uint8"
    int16 = "int16"
    int32 = "int32"

    @property
    def is_float(self) -> bool:
        return self is DType.float32

    @property
    def is_int(self) -> bool:
        return not self.is_float

    @property
    def width(self) -> int:
        return _WIDTH[self]

    @property
    def signed(self) -> bool:
        return self is not DType.uint8

    @property
    def min(self) -> int:
        if self.is_float:
            raise TypeError("float32 has no integer range")
        return -(1 << (self.width - 1)) if self.signed else 0

    @property
    def max(self) -> int:
        if self.is_float:
            raise TypeError("float32 has no integer range")
        return (1 << (self.width - 1)) - 1 if self.signed else (1 << self.width) - 1

    @property
    def np(self) -> np.dtype:
        return np.dtype(self.value)

    @classmethod
    def parse(cls, token: "str | DType") -> "DType":
        if isinstance(token, DType):
            return token
        try:
            return cls(token)
        except ValueError:
            raise ValueError(f"unknown dtype token {token!r}") from None

    def __str__(self) -> str:
        return self.value


_WIDTH = {DType.float32: 32, DType.int8: 8, DType.uint8: 8, DType.int16: 16, DType.int32: 32}


@dataclass(frozen=True)
class OpInfo:
    arity: int
    required: tuple[str, ...] = ()


# Closed operator table. `arity` counts data inputs (edges).
OPS: dict[str, OpInfo] = {
    "input": OpInfo(0, ("name", "shape")),
    "constant": OpInfo(0, ("value",)),
    "conv2d": OpInfo(2),
    "dense": OpInfo(2),
    "add": OpInfo(2),
    "relu": OpInfo(1),
    "clip": OpInfo(1, ("a_min", "a_max")),
    "max_pool2d": OpInfo(1, ("pool_size",)),
    "global_avg_pool2d": OpInfo(1),
    "flatten": OpInfo(1),
    "simulated_quantize": OpInfo(1),
    "quantize": OpInfo(1, ("scale", "zero_point", "out_dtype")),
    "dequantize": OpInfo(1, ("scale", "zero_point")),
    "requantize": OpInfo(1, ("multiplier", "shift", "out_dtype")),
}

SOURCE_OPS = ("input", "constant")


@dataclass(frozen=True, eq=False)
class Node:
    id: int
    op: str
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Node):
            return NotImplemented
        return self.id == other.id and self.op == other.op and _attrs_equal(self.attrs, other.attrs)

    def __hash__(self):
        return hash((self.id, self.op))


def _attrs_equal(a: Mapping, b: Mapping) -> bool:
    if a.keys() != b.keys():
        return False
    for k in a:
        va, vb = a[k], b[k]
        if isinstance(va, np.ndarray) or isinstance(vb, np.ndarray):
            va, vb = np.asarray(va), np.asarray(vb)
            if va.dtype != vb.dtype or va.shape != vb.shape or va.tobytes() != vb.tobytes():
                return False
        elif va != vb:
            return False
    return True


class Edge(NamedTuple):
    src: tuple[int, int]
    dst: tuple[int, int]

    def __str__(self):
        return f"{self.src[0]}.{self.src[1]}->{self.dst[0]}.{self.dst[1]}"


class Graph:
    """Immutable dataflow graph. Transformations build new graphs."""

    def __init__(self, nodes: Iterable[Node], edges: Iterable[Edge],
                 inputs: Iterable[int] = (), outputs: Iterable[tuple[int, int]] = ()):
        self.nodes = tuple(nodes)
        self.edges = tuple(Edge(tuple(e[0]), tuple(e[1])) for e in edges)
        self.inputs = tuple(inputs)
        self.outputs = tuple(tuple(o) for o in outputs)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.nodes == other.nodes and self.edges == other.edges
                and self.inputs == other.inputs and self.outputs == other.outputs)

    def __repr__(self):
        return f"Graph({len(self.nodes)} nodes, {len(self.edges)} edges)"

    @cached_property
    def by_id(self) -> dict[int, Node]:
        return {n.id: n for n in self.nodes}

    def node(self, nid: int) -> Node:
        return self.by_id[nid]

    @cached_property
    def _in_edges(self) -> dict[int, list[Edge]]:
        out: dict[int, list[Edge]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            out.setdefault(e.dst[0], []).append(e)
        for lst in out.values():
            lst.sort(key=lambda e: e.dst[1])
        return out

    @cached_property
    def _out_edges(self) -> dict[int, list[Edge]]:
        out: dict[int, list[Edge]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            out.setdefault(e.src[0], []).append(e)
        for lst in out.values():
            lst.sort(key=lambda e: (e.dst[1], e.dst[0]))
        return out

    def in_edges(self, nid: int) -> list[Edge]:
        return self._in_edges.get(nid, [])

    def out_edges(self, nid: int) -> list[Edge]:
        return self._out_edges.get(nid, [])

    def producers(self, nid: int) -> list[int]:
        return [e.src[0] for e in self.in_edges(nid)]

    def consumers(self, nid: int) -> list[int]:
        return [e.dst[0] for e in self.out_edges(nid)]

    def input_names(self) -> list[str]:
        return [self.node(i).attrs["name"] for i in self.inputs]

    def next_id(self) -> int:
        return max((n.id for n in self.nodes), default=-1) + 1

    def count(self, op: str) -> int:
        return sum(1 for n in self.nodes if n.op == op)


class GraphBuilder:
    """Incremental helper for assembling graphs by hand or in fixtures."""

    def __init__(self, start_id: int = 0):
        self._nodes: list[Node] = []
        self._edges: list[Edge] = []
        self._inputs: list[int] = []
        self._next = start_id

    def add(self, op: str, *srcs: int, **attrs) -> int:
        nid = self._next
        self._next += 1
        self._nodes.append(Node(nid, op, attrs))
        for port, src in enumerate(srcs):
            self._edges.append(Edge((src, 0), (nid, port)))
        if op == "input":
            self._inputs.append(nid)
        return nid

    def input(self, name: str, shape) -> int:
        return self.add("input", name=name, shape=list(shape), dtype="float32")

    def constant(self, value) -> int:
        return self.add("constant", value=np.asarray(value, dtype=np.float32))

    def build(self, outputs: Iterable[int]) -> Graph:
        return Graph(self._nodes, self._edges, self._inputs, [(o, 0) for o in outputs])


# ---------------------------------------------------------------------------
# traversal


def traversal_order(g: Graph) -> list[int]:
    """Deterministic depth-first topological order.

    Roots are the graph inputs (ascending id), then constants. A node is
    emitted the first time all of its producers have been emitted; children
    are explored in (input port, node id) order.
    """
    pending = {n.id: len(set(g.producers(n.id))) for n in g.nodes}
    emitted: set[int] = set()
    order: list[int] = []

    roots = sorted(i for i in g.inputs if i in g.by_id)
    roots += sorted(n.id for n in g.nodes if n.op == "constant")
    roots += sorted(n.id for n in g.nodes if pending[n.id] == 0 and n.id not in roots)

    def children(nid):
        seen = set()
        for e in g.out_edges(nid):
            c = e.dst[0]
            if c not in seen:
                seen.add(c)
                yield c

    for root in roots:
        if root in emitted:
            continue
        emitted.add(root)
        order.append(root)
        stack = [children(root)]
        while stack:
            for child in stack[-1]:
                pending[child] -= 1
                if pending[child] == 0 and child not in emitted:
                    emitted.add(child)
                    order.append(child)
                    stack.append(children(child))
                    break
            else:
                stack.pop()

    if len(order) != len(g.nodes):
        raise CycleError(_find_cycle_node(g, emitted))
    return order


def _find_cycle_node(g: Graph, emitted: set[int]) -> int:
    # every unemitted node is on or downstream of a cycle; walk producers until repeat
    start = min(n.id for n in g.nodes if n.id not in emitted)
    seen: list[int] = []
    cur = start
    while cur not in seen:
        seen.append(cur)
        cur = next(p for p in g.producers(cur) if p not in emitted)
    return cur


def edge_order(g: Graph) -> list[Edge]:
    """Canonical edge indexing: by consumer position in traversal_order, then port."""
    pos = {nid: i for i, nid in enumerate(traversal_order(g))}
    return sorted(g.edges, key=lambda e: (pos[e.dst[0]], e.dst[1]))


# ---------------------------------------------------------------------------
# validation and shape inference


def validate_graph(g: Graph) -> list[str]:
    """Return a list of violations; empty means the graph is valid."""
    report: list[str] = []
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        report.append(f"duplicate node ids {dup}")
    by_id = g.by_id

    for n in g.nodes:
        info = OPS.get(n.op)
        if info is None:
            report.append(f"node {n.id}: unknown op {n.op!r}")
            continue
        for key in info.required:
            if key not in n.attrs:
                report.append(f"node {n.id}: {n.op} missing attr {key!r}")

    structural_ok = not report
    fed: dict[tuple[int, int], int] = {}
    for e in g.edges:
        for end, (nid, port) in (("src", e.src), ("dst", e.dst)):
            if nid not in by_id:
                report.append(f"edge {e}: dangling {end} node id {nid}")
                structural_ok = False
        if e.src[0] in by_id and e.src[1] != 0:
            report.append(f"edge {e}: node {e.src[0]} has a single output port")
            structural_ok = False
        if e.dst[0] in by_id:
            info = OPS.get(by_id[e.dst[0]].op)
            if info is not None and not 0 <= e.dst[1] < info.arity:
                report.append(f"edge {e}: node {e.dst[0]} has no input port {e.dst[1]}")
                structural_ok = False
        fed[e.dst] = fed.get(e.dst, 0) + 1

    for n in g.nodes:
        info = OPS.get(n.op)
        if info is None:
            continue
        for port in range(info.arity):
            k = fed.get((n.id, port), 0)
            if k != 1:
                report.append(f"node {n.id}: input port {port} fed by {k} edges")
                structural_ok = False

    for i in g.inputs:
        if i not in by_id or by_id[i].op != "input":
            report.append(f"graph input {i} is not an input node")
            structural_ok = False
    for nid, port in g.outputs:
        if nid not in by_id or port != 0:
            report.append(f"graph output ({nid}, {port}) references a missing port")
            structural_ok = False

    if structural_ok:
        try:
            traversal_order(g)
        except CycleError as exc:
            report.append(f"cycle through node {exc.node_id}")
            structural_ok = False

    if structural_ok:
        try:
            infer_shapes(g)
        except GraphError as exc:
            report.append(str(exc))
    return report


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pair(v, default) -> tuple[int, int]:
    if v is None:
        v = default
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    return int(v[0]), int(v[1])


def infer_shapes(g: Graph) -> dict[int, tuple[int, ...]]:
    """Static output shape of every node (batch dimension taken from inputs)."""
    shapes: dict[int, tuple[int, ...]] = {}
    for nid in traversal_order(g):
        n = g.node(nid)
        ins = [shapes[p] for p in g.producers(nid)]
        shapes[nid] = _shape_rule(n, ins)
    return shapes


def _shape_rule(n: Node, ins: list[tuple[int, ...]]) -> tuple[int, ...]:
    a = n.attrs
    where = f"node {n.id} ({n.op})"
    if n.op == "input":
        return tuple(int(d) for d in a["shape"])
    if n.op == "constant":
        return tuple(np.shape(a["value"]))
    if n.op == "conv2d":
        x, w = ins
        if len(x) != 4 or len(w) != 4:
            raise GraphError(f"{where}: conv2d expects NCHW data and OIHW weight")
        if x[1] != w[1]:
            raise GraphError(f"{where}: channel mismatch {x[1]} vs {w[1]}")
        sh, sw = _pair(a.get("strides"), 1)
        ph, pw = _pair(a.get("padding"), 0)
        oh, ow = conv_out_size(x[2], w[2], sh, ph), conv_out_size(x[3], w[3], sw, pw)
        if oh <= 0 or ow <= 0:
            raise GraphError(f"{where}: empty output")
        _check_bias(a, w[0], where)
        return (x[0], w[0], oh, ow)
    if n.op == "dense":
        x, w = ins
        if len(x) != 2 or len(w) != 2 or x[1] != w[1]:
            raise GraphError(f"{where}: dense expects (N,K) x (M,K), got {x} and {w}")
        _check_bias(a, w[0], where)
        return (x[0], w[0])
    if n.op == "add":
        try:
            return tuple(np.broadcast_shapes(ins[0], ins[1]))
        except ValueError:
            raise GraphError(f"{where}: shapes {ins[0]} and {ins[1]} do not broadcast") from None
    if n.op == "max_pool2d":
        x = ins[0]
        if len(x) != 4:
            raise GraphError(f"{where}: expects NCHW")
        kh, kw = _pair(a["pool_size"], 1)
        sh, sw = _pair(a.get("strides"), (kh, kw))
        ph, pw = _pair(a.get("padding"), 0)
        return (x[0], x[1], conv_out_size(x[2], kh, sh, ph), conv_out_size(x[3], kw, sw, pw))
    if n.op == "global_avg_pool2d":
        x = ins[0]
        if len(x) != 4:
            raise GraphError(f"{where}: expects NCHW")
        return (x[0], x[1], 1, 1)
    if n.op == "flatten":
        x = ins[0]
        return (x[0], int(np.prod(x[1:], dtype=np.int64)))
    if n.op == "clip":
        if a["a_min"] > a["a_max"]:
            raise GraphError(f"{where}: a_min > a_max")
        return ins[0]
    return ins[0]


def _check_bias(attrs, channels, where):
    bias = attrs.get("bias")
    if bias is not None and np.shape(bias) != (channels,):
        raise GraphError(f"{where}: bias shape {np.shape(bias)} != ({channels},)")
