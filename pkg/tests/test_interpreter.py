import numpy as np
import pytest

from hwquant.graph import DType, Edge, Graph, GraphBuilder, Node
from hwquant.interpreter import (AccumulatorOverflow, Dataset, EvalError, agreement, eval_fp32,
                                 eval_int, evaluate, predictions, run, top1_agreement)


def conv_oracle(x, w, stride, pad):
    """Direct nested-loop convolution, NCHW / OIHW."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for k in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, k, i, j] = np.sum(patch * w[k])
    return out


def one_op(op, shape, *consts, **attrs):
    b = GraphBuilder()
    x = b.input("x", shape)
    ids = [b.constant(c) for c in consts]
    y = b.add(op, x, *ids, **attrs)
    return b.build([y])


def test_identity_conv():
    x = np.random.default_rng(0).standard_normal((1, 1, 5, 5)).astype(np.float32)
    g = one_op("conv2d", [1, 1, 5, 5], np.ones((1, 1, 1, 1), np.float32))
    assert np.array_equal(eval_fp32(g, {"x": x})[0], x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    g = one_op("conv2d", [2, 3, 7, 6], w, strides=[stride, stride], padding=[pad, pad])
    np.testing.assert_allclose(eval_fp32(g, {"x": x})[0], conv_oracle(x, w, stride, pad), rtol=1e-5, atol=1e-5)


def test_add_zero_and_clip():
    x = np.array([[-1.0, 3.0, 9.0]], np.float32)
    assert np.array_equal(eval_fp32(one_op("add", [1, 3], np.zeros((1, 3), np.float32)), {"x": x})[0], x)
    out = eval_fp32(one_op("clip", [1, 3], a_min=0.0, a_max=6.0), {"x": x})[0]
    assert out.tolist() == [[0.0, 3.0, 6.0]]


def test_max_pool_and_gap():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    assert eval_fp32(one_op("max_pool2d", [1, 1, 4, 4], pool_size=[2, 2]), {"x": x})[0].ravel().tolist() == [5, 7, 13, 15]
    assert eval_fp32(one_op("global_avg_pool2d", [1, 1, 4, 4]), {"x": x})[0].ravel().tolist() == [7.5]


def test_missing_input_and_shape_mismatch():
    g = one_op("relu", [1, 3])
    with pytest.raises(EvalError, match="missing input"):
        eval_fp32(g, {})
    with pytest.raises(EvalError, match="shape"):
        eval_fp32(g, {"x": np.zeros((1, 4), np.float32)})


def int_dense(acc):
    b = GraphBuilder()
    x = b.input("x", [1, 256])
    q = b.add("quantize", x, scale=1.0, zero_point=0, out_dtype="int8")
    w = b.constant(np.full((2, 256), 127, np.int8))
    d = b.add("dense", q, w, acc_dtype=acc, in_dtypes=["int8", "int8"])
    return b.build([d]), d


def test_int_dense_saturates():
    g, _ = int_dense("int16")
    out = eval_int(g, {"x": np.full((1, 256), 127.0, np.float32)})[0]
    assert out.dtype == np.int16 and (out == 32767).all()


def test_int_dense_traps():
    g, d = int_dense("int16")
    with pytest.raises(AccumulatorOverflow) as err:
        eval_int(g, {"x": np.full((1, 256), 127.0, np.float32)}, overflow_mode="trap")
    assert err.value.node_id == d and err.value.index == 0


def test_int_add():
    b = GraphBuilder()
    x = b.input("x", [1, 1])
    q = b.add("quantize", x, scale=1.0, zero_point=0, out_dtype="int8")
    c = b.constant(np.array([[4]], np.int8))
    a = b.add("add", q, c, acc_dtype="int32", in_dtypes=["int8", "int8"])
    g = b.build([a])
    assert eval_int(g, {"x": np.array([[3.0]], np.float32)})[0].tolist() == [[7]]


def test_requantize_and_dequantize_nodes():
    b = GraphBuilder()
    x = b.input("x", [1, 4])
    q = b.add("quantize", x, scale=0.5, zero_point=0, out_dtype="int32")
    r = b.add("requantize", q, multiplier=2 ** 30, shift=31, out_dtype="int8")
    d = b.add("dequantize", r, scale=1.0, zero_point=0)
    g = b.build([d])
    out = eval_int(g, {"x": np.array([[1.0, -1.5, 200.0, 0.75]], np.float32)})[0]
    # codes 2,-3,400,2 -> halved with half-away rounding -> 1,-2,127(clamped),1
    assert out.tolist() == [[1.0, -2.0, 127.0, 1.0]]


def test_integer_ops_rejected_in_float_regime():
    g, _ = int_dense("int32")
    with pytest.raises(EvalError):
        eval_fp32(g, {"x": np.zeros((1, 256), np.float32)})


def test_missing_annotation():
    b = GraphBuilder()
    x = b.input("x", [1, 2])
    q = b.add("quantize", x, scale=1.0, zero_point=0, out_dtype="int8")
    r = b.add("relu", q)
    g = b.build([r])
    with pytest.raises(EvalError, match="annotation"):
        eval_int(g, {"x": np.zeros((1, 2), np.float32)})


def test_saturate_equals_trap_when_no_overflow():
    g, _ = int_dense("int32")
    feed = {"x": np.full((1, 256), 127.0, np.float32)}
    assert np.array_equal(eval_int(g, feed, "saturate")[0], eval_int(g, feed, "trap")[0])


def test_top1_agreement_examples():
    b = GraphBuilder()
    x = b.input("x", [1, 2])
    g_ref = b.build([x])
    b = GraphBuilder()
    x = b.input("x", [1, 2])
    neg = b.add("dense", x, b.constant(-np.eye(2, dtype=np.float32)))
    g_neg = b.build([neg])
    rng = np.random.default_rng(0)
    ds = Dataset([{"x": rng.standard_normal((1, 2)).astype(np.float32)} for _ in range(20)])
    assert top1_agreement(g_ref, g_ref, ds) == 1.0
    assert top1_agreement(g_ref, g_neg, ds) == 0.0


def test_agreement_under_noise_below_gap():
    rng = np.random.default_rng(3)
    scores = rng.standard_normal((10, 5))
    s = np.sort(scores, axis=1)
    gap = float(np.min(s[:, -1] - s[:, -2]))
    noise = rng.uniform(-1, 1, scores.shape) * gap * 0.49
    assert agreement(predictions(scores), predictions(scores + noise)) == 1.0


def test_argmax_ties_lowest_index():
    assert predictions(np.array([[1.0, 3.0, 3.0]])).tolist() == [1]


def test_dataset_chunks_and_fingerprint():
    rng = np.random.default_rng(1)
    ds = Dataset([{"x": rng.standard_normal((1, 3)).astype(np.float32)} for _ in range(5)], [0, 1, 2, 0, 1])
    assert [f["x"].shape[0] for f in ds.chunks(2)] == [2, 2, 1]
    assert ds.fingerprint() == Dataset(list(ds.samples), list(ds.labels)).fingerprint()
    assert ds.subset(1, 3).labels == [1, 2]
    with pytest.raises(ValueError):
        Dataset(ds.samples, [0])


def test_evaluate_is_chunk_invariant():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    g = one_op("conv2d", [1, 3, 5, 5], w, padding=[1, 1])
    ds = Dataset([{"x": rng.standard_normal((1, 3, 5, 5)).astype(np.float32)} for _ in range(9)])
    a = evaluate(g, ds, chunk=2)
    b = evaluate(g, ds, chunk=9)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)
    assert np.array_equal(evaluate(g, ds, chunk=4), evaluate(g, ds, chunk=4))
