import numpy as np
import pytest

from hwquant.fixtures import fig4_chain, make_conv_chain, make_small_cnn, spec_fixture
from hwquant.graph import DType, GraphBuilder, edge_order, validate_graph
from hwquant.hwspec import parse_spec
from hwquant.interpreter import evaluate
from hwquant.topology import (ConstraintError, generate_topology, insert_simulated_quantize,
                              partition_segments)


def ops(g, ids):
    return sorted(g.node(i).op for i in ids if g.node(i).op not in ("input", "constant"))


def test_fig4_partition():
    fx = fig4_chain()
    t = generate_topology(fx.graph, spec_fixture("fig3"))
    assert ops(fx.graph, t.qv) == ["add", "conv2d"]
    assert ops(fx.graph, t.nqv) == ["global_avg_pool2d"]
    assert not t.qv & t.nqv


def test_fig4_insertion_layout():
    fx = fig4_chain()
    g = fx.graph
    t = generate_topology(g, spec_fixture("fig3"))
    sg = insert_simulated_quantize(g, t)
    assert validate_graph(sg) == []
    sqs = [n for n in sg.nodes if n.op == "simulated_quantize"]
    assert len(sqs) == 5
    feeds = sorted((sg.node(sg.consumers(n.id)[0]).op, n.attrs["role"]) for n in sqs)
    assert feeds == [("add", "quantize"), ("add", "quantize"), ("conv2d", "quantize"),
                     ("conv2d", "quantize"), ("global_avg_pool2d", "boundary")]
    cands = {n.attrs["edge"]: n.attrs["candidates"] for n in sqs if n.attrs["role"] == "quantize"}
    assert cands == {0: ["int8", "int16"], 1: ["int8", "int16"], 2: ["int32"], 3: ["int32"]}


def test_float_only_single_node():
    b = GraphBuilder()
    x = b.input("x", [1, 2])
    g = b.build([b.add("relu", x)])
    t = generate_topology(g, spec_fixture("fig3"))
    assert not t.qv
    sg = insert_simulated_quantize(g, t)
    assert len(sg.nodes) == len(g.nodes)
    assert partition_segments(g, t).segments == ()


def test_mixed_add_with_float_producers():
    b = GraphBuilder()
    x = b.input("x", [1, 1, 4, 4])
    p1 = b.add("global_avg_pool2d", x)
    p2 = b.add("global_avg_pool2d", x)
    a = b.add("add", p1, p2)
    g = b.build([a])
    t = generate_topology(g, spec_fixture("fig3"))
    assert a in t.nqv and not (t.qv - {x})


def test_quantized_vertex_without_integer_signature_is_error():
    # relu is "mixed" (int8 in, float32 out) and follows a quantized conv2d,
    # so it lands in qv, yet offers no all-integer signature
    spec = parse_spec({"ops": {
        "conv2d": [{"in": ["int8", "int8"], "out": "int32"}],
        "relu": [{"in": ["int8"], "out": "float32"}],
    }})
    b = GraphBuilder()
    x = b.input("x", [1, 1, 2, 2])
    c = b.add("conv2d", x, b.constant(np.ones((1, 1, 1, 1), np.float32)))
    r = b.add("relu", c)
    g = b.build([r])
    with pytest.raises(ConstraintError, match=f"node {r}"):
        generate_topology(g, spec)


def test_edge_invariants_and_fixed_edges():
    fx = make_small_cnn()
    t = generate_topology(fx.graph, spec_fixture("int8_int32"))
    for e in fx.graph.edges:
        if e.dst[0] in t.qv:
            assert t.edge_dtypes[e] and all(d.is_int for d in t.edge_dtypes[e])
        else:
            assert t.fixed_edges[e] is DType.float32
    ids = {n.id for n in fx.graph.nodes}
    assert t.qv | t.nqv == ids


@pytest.mark.parametrize("spec_name", ["fig3", "int8_int32", "arm_vmlal_like", "x86_vnni_like"])
def test_passthrough_is_bit_exact(spec_name):
    for fx in (fig4_chain(), make_small_cnn()):
        t = generate_topology(fx.graph, spec_fixture(spec_name))
        sg = insert_simulated_quantize(fx.graph, t)
        assert validate_graph(sg) == []
        assert np.array_equal(evaluate(fx.graph, fx.calib), evaluate(sg, fx.calib))


def test_deterministic_and_idempotent():
    fx = make_small_cnn()
    spec = spec_fixture("int8_int32")
    t1, t2 = generate_topology(fx.graph, spec), generate_topology(fx.graph, spec)
    assert t1.dumps() == t2.dumps()
    assert insert_simulated_quantize(fx.graph, t1) == insert_simulated_quantize(fx.graph, t2)


def test_segments_fig4():
    fx = fig4_chain()
    t = generate_topology(fx.graph, spec_fixture("fig3"))
    p = partition_segments(fx.graph, t)
    assert len(p) == 1
    assert ops(fx.graph, p.segments[0].nodes) == ["add", "conv2d"]
    assert ops(fx.graph, p.remainder_nodes) == ["global_avg_pool2d"]


def test_segments_alternating_chain():
    spec = parse_spec({"ops": {"relu": [{"in": ["int8"], "out": "int8"}]}})
    b = GraphBuilder()
    h = b.input("x", [1, 1, 2, 2])
    h = b.add("relu", h)
    h = b.add("global_avg_pool2d", h)
    h = b.add("relu", h)
    h = b.add("global_avg_pool2d", h)
    g = b.build([h])
    t = generate_topology(g, spec)
    p = partition_segments(g, t)
    assert [len(s.nodes) for s in p] == [1, 1]


def test_partition_covers_every_edge_once():
    fx = make_small_cnn()
    t = generate_topology(fx.graph, spec_fixture("int8_int32"))
    p = partition_segments(fx.graph, t)
    seen = [e for s in p for e in s.interior + s.boundary] + list(p.remainder_edges)
    assert sorted(seen) == sorted(fx.graph.edges)


def test_conv_chain_edge_count():
    g = make_conv_chain()
    t = generate_topology(g, spec_fixture("int8_int32"))
    assert len(t.searchable_edges()) == 118 == len(edge_order(g))
