import numpy as np
import pytest

from hwquant import fixtures as fx
from hwquant.graph import DType, validate_graph
from hwquant.interpreter import evaluate, predictions
from hwquant.io import graph_fingerprint

from conftest import FIXTURE_DIR


def test_spec_fixtures():
    assert set(fx.spec_fixture("fig3").table) == {"conv2d", "add", "global_avg_pool2d"}
    arm = {(tuple(d.value for d in s.in_dtypes), s.out_dtype.value)
           for s in fx.spec_fixture("arm_vmlal_like").signatures("conv2d")}
    assert arm == {(("int8", "int8"), "int16"), (("int16", "int16"), "int32")}
    (x86,) = fx.spec_fixture("x86_vnni_like").signatures("conv2d")
    assert [d.value for d in x86.in_dtypes] == ["uint8", "int8"] and x86.out_dtype is DType.int32
    with pytest.raises(KeyError):
        fx.spec_fixture("tpu")


def test_small_cnn_deterministic_and_valid():
    a, b = fx.make_small_cnn(), fx.make_small_cnn()
    assert graph_fingerprint(a.graph) == graph_fingerprint(b.graph)
    assert all(np.array_equal(x["x"], y["x"]) for x, y in zip(a.eval.samples, b.eval.samples))
    assert validate_graph(a.graph) == []
    assert len(a.calib) == 64 and len(a.eval) == 256
    ops = [n.op for n in a.graph.nodes]
    assert ops.count("conv2d") == 3 and "global_avg_pool2d" in ops and "dense" in ops
    out = evaluate(a.graph, a.eval)
    assert out.shape[-1] == 10
    assert np.array_equal(predictions(out), predictions(evaluate(a.graph, a.eval)))
    # measurable margin between the two top scores
    top2 = np.sort(out, axis=-1)[:, -2:]
    assert np.all(top2[:, 1] - top2[:, 0] > 0)


def test_overflow_probe_properties():
    f = fx.make_overflow_probe()
    (dense,) = [n for n in f.graph.nodes if n.op == "dense"]
    w = f.graph.node(f.graph.producers(dense.id)[1]).attrs["value"]
    assert w.shape == (10, 512)
    x = np.concatenate([s["x"] for s in f.calib.samples])
    thr = float(np.abs(x).max())
    assert fx._probe_acc_max(x, w, thr, 8) > 2 ** 15 - 1
    assert fx._probe_acc_max(x, w, thr, 6) <= 2 ** 15 - 1
    assert np.isfinite(evaluate(f.graph, f.eval)).all()
    assert np.array_equal(predictions(evaluate(f.graph, f.eval)), f.eval.labels)


def test_conv_chain_size():
    g = fx.make_conv_chain()
    assert sum(n.op == "conv2d" for n in g.nodes) == 59


def test_separable_loss_shape():
    loss = fx.separable_loss([6], [8])
    assert loss((6,)) < loss((7,)) < loss((8,)) < loss((5,))


def test_regeneration_reproduces_committed_bytes(tmp_path):
    written = fx.write_all(tmp_path)
    for p in written:
        for q in (p, p.with_suffix(".bin")):
            if q.exists():
                assert q.read_bytes() == (FIXTURE_DIR / q.name).read_bytes(), q.name
