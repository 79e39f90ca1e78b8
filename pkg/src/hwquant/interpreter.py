"""Reference executor for float32, simulated and realized integer graphs."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph import DType, Graph, GraphError, Node, _pair, traversal_order
from .fixedpoint import fixed_point_multiply
from .simulate import QParams, noop_params, quantize_codes, simulated_quantize

INT_ONLY_OPS = ("quantize", "dequantize", "requantize")
CHUNK = 256


class EvalError(RuntimeError):
    pass


class AccumulatorOverflow(EvalError):
    def __init__(self, node_id: int, index: int, value: int, dtype: DType):
        super().__init__(f"accumulator overflow at node {node_id}, element {index}: "
                         f"{value} outside {dtype}")
        self.node_id = node_id
        self.index = index
        self.value = value
        self.dtype = dtype


@dataclass
class Dataset:
    """Calibration / evaluation samples: one feed dict per sample (batch 1)."""

    samples: list[dict[str, np.ndarray]]
    labels: Optional[list[int]] = None
    _batches: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.samples)

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.samples):
            raise ValueError("labels and samples differ in length")

    def feed(self, start: int = 0, stop: Optional[int] = None) -> dict[str, np.ndarray]:
        key = (start, stop)
        if key not in self._batches:
            chunk = self.samples[start:stop]
            names = chunk[0].keys()
            self._batches[key] = {k: np.concatenate([s[k] for s in chunk], axis=0) for k in names}
        return self._batches[key]

    def chunks(self, size: int = CHUNK):
        for start in range(0, len(self.samples), size):
            yield self.feed(start, min(start + size, len(self.samples)))

    def subset(self, start: int, stop: int) -> "Dataset":
        labels = None if self.labels is None else self.labels[start:stop]
        return Dataset(self.samples[start:stop], labels)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            for k in sorted(s):
                h.update(k.encode())
                h.update(np.ascontiguousarray(s[k], dtype=np.float32).tobytes())
        if self.labels is not None:
            h.update(repr(list(self.labels)).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# kernels


def _windows(x: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]


def _conv2d(x, w, strides, padding, acc_dtype=None):
    sh, sw = _pair(strides, 1)
    ph, pw = _pair(padding, 0)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    o, c, kh, kw = w.shape
    win = _windows(x, kh, kw, sh, sw)  # N, C, OH, OW, kh, kw
    n, _, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)


def _max_pool(x, attrs, pad_value):
    kh, kw = _pair(attrs["pool_size"], 1)
    sh, sw = _pair(attrs.get("strides"), (kh, kw))
    ph, pw = _pair(attrs.get("padding"), 0)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=pad_value)
    return _windows(x, kh, kw, sh, sw).max(axis=(4, 5))


def _float_kernel(n: Node, ins: list[np.ndarray]) -> np.ndarray:
    a = n.attrs
    op = n.op
    if op == "conv2d":
        y = _conv2d(ins[0], ins[1], a.get("strides"), a.get("padding"))
        if a.get("bias") is not None:
            y = y + np.asarray(a["bias"], np.float32)[None, :, None, None]
        return y
    if op == "dense":
        y = ins[0] @ ins[1].T
        if a.get("bias") is not None:
            y = y + np.asarray(a["bias"], np.float32)[None, :]
        return y
    if op == "add":
        return ins[0] + ins[1]
    if op == "relu":
        return np.maximum(ins[0], np.float32(0))
    if op == "clip":
        return np.clip(ins[0], np.float32(a["a_min"]), np.float32(a["a_max"]))
    if op == "max_pool2d":
        return _max_pool(ins[0], a, -np.inf)
    if op == "global_avg_pool2d":
        return ins[0].mean(axis=(2, 3), keepdims=True, dtype=np.float32)
    if op == "flatten":
        return ins[0].reshape(ins[0].shape[0], -1)
    raise EvalError(f"node {n.id}: unsupported op {op!r} in float regime")


def _check_acc(n: Node, acc: np.ndarray, dtype: DType, mode: str) -> np.ndarray:
    lo, hi = dtype.min, dtype.max
    bad = (acc < lo) | (acc > hi)
    if bad.any():
        if mode == "trap":
            idx = int(np.flatnonzero(bad.ravel())[0])
            raise AccumulatorOverflow(n.id, idx, int(acc.ravel()[idx]), dtype)
        acc = np.clip(acc, lo, hi)
    return acc.astype(dtype.np)


def _int_kernel(n: Node, ins: list[np.ndarray], mode: str) -> np.ndarray:
    a = n.attrs
    op = n.op
    acc_dtype = DType.parse(a["acc_dtype"])
    zps = [int(z) for z in a.get("input_zero_points", [0] * len(ins))]
    xs = [x.astype(np.int64) for x in ins]
    if op in ("conv2d", "dense", "add", "global_avg_pool2d"):
        xs = [x - zp if zp else x for x, zp in zip(xs, zps)]
    # relu / clip / max_pool2d / flatten act on codes directly
    if op == "conv2d":
        acc = _conv2d(xs[0], xs[1], a.get("strides"), a.get("padding"))
        if a.get("bias") is not None:
            acc = acc + np.asarray(a["bias"], np.int64)[None, :, None, None]
    elif op == "dense":
        acc = xs[0] @ xs[1].T
        if a.get("bias") is not None:
            acc = acc + np.asarray(a["bias"], np.int64)[None, :]
    elif op == "add":
        acc = xs[0] + xs[1]
    elif op == "relu":
        acc = np.maximum(xs[0], zps[0])
    elif op == "clip":
        acc = np.clip(xs[0], int(a["a_min"]), int(a["a_max"]))
    elif op == "max_pool2d":
        acc = _max_pool(xs[0], a, np.iinfo(np.int64).min)
    elif op == "global_avg_pool2d":
        acc = xs[0].sum(axis=(2, 3), keepdims=True)
    elif op == "flatten":
        acc = xs[0].reshape(xs[0].shape[0], -1)
    else:
        raise EvalError(f"node {n.id}: unsupported op {op!r} in integer regime")
    return _check_acc(n, acc, acc_dtype, mode)


def _quantize_node(n: Node, x: np.ndarray) -> np.ndarray:
    a = n.attrs
    dt = DType.parse(a["out_dtype"])
    qmin = int(a.get("clip_min", dt.min))
    qmax = int(a.get("clip_max", dt.max))
    q = quantize_codes(x, a["scale"], int(a["zero_point"]), qmin, qmax)
    # float32 cannot hold 2**31 - 1; clip again after widening
    return np.clip(q.astype(np.int64), qmin, qmax).astype(dt.np)


def _dequantize_node(n: Node, q: np.ndarray) -> np.ndarray:
    a = n.attrs
    zp = int(a["zero_point"])
    v = q.astype(np.float32)
    if zp:
        v = v - np.float32(zp)
    return v * np.float32(a["scale"])


def _requantize_node(n: Node, q: np.ndarray) -> np.ndarray:
    a = n.attrs
    dt = DType.parse(a["out_dtype"])
    v = q.astype(np.int64) - int(a.get("in_zero_point", 0))
    r = fixed_point_multiply(v, int(a["multiplier"]), int(a["shift"])) + int(a.get("out_zero_point", 0))
    r = np.clip(r, int(a.get("clip_min", dt.min)), int(a.get("clip_max", dt.max)))
    return r.astype(dt.np)


def qparams_from_attrs(attrs: Mapping) -> QParams:
    if attrs.get("passthrough", True):
        return noop_params()
    dtype = DType.parse(attrs["out_dtype"])
    acc = attrs.get("acc_dtype")
    acc_dtype = None if acc is None else DType.parse(acc)
    acc_scale = None if acc is None else float(attrs["acc_scale"])
    if dtype.is_float:
        return QParams(math.inf, 0, 1, dtype, 0, acc_dtype, acc_scale)
    return QParams(float(attrs["threshold"]), int(attrs["bit"]), int(attrs["sign"]), dtype,
                   int(attrs.get("zero_point", 0)), acc_dtype, acc_scale)


# ---------------------------------------------------------------------------
# executor


def _check_feed(g: Graph, feed: Mapping[str, np.ndarray]) -> None:
    for nid in g.inputs:
        n = g.node(nid)
        name = n.attrs["name"]
        if name not in feed:
            raise EvalError(f"missing input {name!r}")
        want = tuple(n.attrs["shape"])
        got = np.shape(feed[name])
        # batch dimension may differ; everything else must match
        if len(got) != len(want) or got[1:] != want[1:]:
            raise EvalError(f"input {name!r}: shape {got} does not match {want}")


def run(g: Graph, feed: Mapping[str, np.ndarray], *, integer: bool = False,
        overflow_mode: str = "saturate", params: Optional[Mapping[int, QParams]] = None,
        order: Optional[Sequence[int]] = None) -> dict[int, np.ndarray]:
    """Evaluate every node; returns node id -> output tensor."""
    if overflow_mode not in ("saturate", "trap"):
        raise ValueError(f"overflow_mode must be 'saturate' or 'trap', got {overflow_mode!r}")
    _check_feed(g, feed)
    values: dict[int, np.ndarray] = {}
    for nid in order if order is not None else traversal_order(g):
        n = g.node(nid)
        ins = [values[p] for p in g.producers(nid)]
        op = n.op
        if op == "input":
            out = np.asarray(feed[n.attrs["name"]], dtype=np.float32)
        elif op == "constant":
            out = np.asarray(n.attrs["value"])
        elif op == "simulated_quantize":
            p = params.get(nid) if params is not None else None
            out = simulated_quantize(ins[0], p if p is not None else qparams_from_attrs(n.attrs))
        elif op in INT_ONLY_OPS:
            if not integer:
                raise EvalError(f"node {nid}: {op} is not supported in the float regime")
            if op == "quantize":
                out = _quantize_node(n, ins[0])
            elif op == "dequantize":
                out = _dequantize_node(n, ins[0])
            else:
                out = _requantize_node(n, ins[0])
        elif "acc_dtype" in n.attrs:
            if not integer:
                raise EvalError(f"node {nid}: integer-annotated {op} in the float regime")
            out = _int_kernel(n, ins, overflow_mode)
        else:
            if any(x.dtype.kind in "iu" for x in ins) and op != "flatten":
                raise EvalError(f"node {nid}: dtype annotation missing for integer {op}")
            out = _float_kernel(n, ins)
        values[nid] = out
    return values


def _outputs(g: Graph, values) -> list[np.ndarray]:
    return [values[nid] for nid, _ in g.outputs]


def eval_fp32(g: Graph, feed: Mapping[str, np.ndarray],
              params: Optional[Mapping[int, QParams]] = None) -> list[np.ndarray]:
    return _outputs(g, run(g, feed, params=params))


def eval_int(g: Graph, feed: Mapping[str, np.ndarray], overflow_mode: str = "saturate") -> list[np.ndarray]:
    return _outputs(g, run(g, feed, integer=True, overflow_mode=overflow_mode))


def is_integer_graph(g: Graph) -> bool:
    return any(n.op in INT_ONLY_OPS for n in g.nodes)


def evaluate(g: Graph, dataset: Dataset, *, overflow_mode: str = "saturate",
             params: Optional[Mapping[int, QParams]] = None, chunk: int = CHUNK) -> np.ndarray:
    """First graph output over the whole dataset, stacked along the batch axis."""
    integer = is_integer_graph(g)
    order = traversal_order(g)
    outs = []
    for feed in dataset.chunks(chunk):
        vals = run(g, feed, integer=integer, overflow_mode=overflow_mode, params=params, order=order)
        outs.append(vals[g.outputs[0][0]])
    return np.concatenate(outs, axis=0)


def predictions(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores)
    if scores.ndim != 2:
        scores = scores.reshape(scores.shape[0], -1)
    # np.argmax returns the lowest index among ties
    return np.argmax(scores, axis=1)


def agreement(pred_ref: np.ndarray, pred_test: np.ndarray) -> float:
    if pred_ref.shape != pred_test.shape:
        raise ValueError(f"prediction shapes differ: {pred_ref.shape} vs {pred_test.shape}")
    return float(np.mean(pred_ref == pred_test))


def top1_agreement(g_ref: Graph, g_test: Graph, dataset: Dataset) -> float:
    a = evaluate(g_ref, dataset)
    b = evaluate(g_test, dataset)
    if a.shape != b.shape:
        raise ValueError(f"output shapes differ: {a.shape} vs {b.shape}")
    return agreement(predictions(a), predictions(b))


def accuracy(g: Graph, dataset: Dataset) -> float:
    if dataset.labels is None:
        raise ValueError("dataset has no labels")
    return float(np.mean(predictions(evaluate(g, dataset)) == np.asarray(dataset.labels)))
