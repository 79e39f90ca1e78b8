"""Deterministic synthetic models, datasets and hardware specs.

Run ``python -m hwquant.fixtures --out fixtures/`` to (re)write the committed
fixture files; regeneration reproduces them byte for byte.
"""
from __future__ import annotations

import argparse
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .graph import Graph, GraphBuilder
from .hwspec import HardwareSpec, parse_spec
from .interpreter import Dataset, evaluate, predictions


class FixtureError(RuntimeError):
    pass


class Fixture(NamedTuple):
    graph: Graph
    calib: Dataset
    eval: Dataset


# ---------------------------------------------------------------------------
# hardware specs

_F32_1 = {"in": ["float32"], "out": "float32"}
_SPECS = {
    "fig3": {
        "add": [{"in": ["float32", "float32"], "out": "float32"},
                {"in": ["int32", "int32"], "out": "int32"}],
        "conv2d": [{"in": ["int16", "int16"], "out": "int32"},
                   {"in": ["int8", "int8"], "out": "int16"}],
        "global_avg_pool2d": [_F32_1],
    },
    "x86_vnni_like": {
        "conv2d": [{"in": ["uint8", "int8"], "out": "int32"}],
        "dense": [{"in": ["uint8", "int8"], "out": "int32"}],
        "add": [{"in": ["int32", "int32"], "out": "int32"}],
    },
    "arm_vmlal_like": {
        "conv2d": [{"in": ["int8", "int8"], "out": "int16"},
                   {"in": ["int16", "int16"], "out": "int32"}],
        # dense offers only the int16-accumulating form so that the widest
        # choice on its inputs is 8 bits
        "dense": [{"in": ["int8", "int8"], "out": "int16"}],
        "add": [{"in": ["float32", "float32"], "out": "float32"},
                {"in": ["int32", "int32"], "out": "int32"}],
    },
    "int8_int32": {
        "conv2d": [{"in": ["int8", "int8"], "out": "int32"}],
        "dense": [{"in": ["int8", "int8"], "out": "int32"}],
        "add": [{"in": ["float32", "float32"], "out": "float32"},
                {"in": ["int32", "int32"], "out": "int32"}],
        "relu": [{"in": ["int8"], "out": "int8"}],
        "clip": [{"in": ["int8"], "out": "int8"}],
        "max_pool2d": [{"in": ["int8"], "out": "int8"}],
        "global_avg_pool2d": [_F32_1],
        "flatten": [_F32_1],
    },
}
SPEC_NAMES = tuple(_SPECS)


def spec_fixture(name: str) -> HardwareSpec:
    if name not in _SPECS:
        raise KeyError(f"unknown spec fixture {name!r}; choose from {', '.join(SPEC_NAMES)}")
    return parse_spec({"ops": _SPECS[name]})


# ---------------------------------------------------------------------------
# graphs


def _he(rng, shape, fan_in) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def fig4_chain(seed: int = 0) -> Fixture:
    """input -> conv2d(w) -> add(c) -> global_avg_pool2d -> output."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    x = b.input("x", [1, 3, 8, 8])
    w = b.constant(_he(rng, (4, 3, 3, 3), 27))
    conv = b.add("conv2d", x, w, padding=[1, 1])
    c = b.constant((rng.standard_normal((1, 4, 1, 1)) * 0.5).astype(np.float32))
    s = b.add("add", conv, c)
    gap = b.add("global_avg_pool2d", s)
    g = b.build([gap])
    data = [{"x": rng.standard_normal((1, 3, 8, 8)).astype(np.float32)} for _ in range(32)]
    return Fixture(g, Dataset(data[:16]), Dataset(data[16:]))


def _cnn_graph(rng, proto_feats=None) -> tuple[Graph, dict]:
    b = GraphBuilder()
    x = b.input("x", [1, 3, 8, 8])
    params = {
        "w1": _he(rng, (8, 3, 3, 3), 27), "b1": (rng.standard_normal(8) * 0.05).astype(np.float32),
        "w2": _he(rng, (16, 8, 3, 3), 72), "b2": (rng.standard_normal(16) * 0.05).astype(np.float32),
        "w3": _he(rng, (16, 16, 3, 3), 144), "b3": (rng.standard_normal(16) * 0.05).astype(np.float32),
    }
    h = b.add("conv2d", x, b.constant(params["w1"]), padding=[1, 1], bias=params["b1"])
    h = b.add("relu", h)
    h = b.add("max_pool2d", h, pool_size=[2, 2])
    h = b.add("conv2d", h, b.constant(params["w2"]), padding=[1, 1], bias=params["b2"])
    h = b.add("clip", h, a_min=0.0, a_max=6.0)
    h = b.add("conv2d", h, b.constant(params["w3"]), padding=[1, 1], bias=params["b3"])
    h = b.add("relu", h)
    h = b.add("global_avg_pool2d", h)
    feat = b.add("flatten", h)
    if proto_feats is None:
        return b.build([feat]), params
    # nearest-centroid classifier over the feature space
    c = proto_feats.astype(np.float64)
    wd = c.astype(np.float32)
    bd = (-0.5 * np.sum(c * c, axis=1)).astype(np.float32)
    out = b.add("dense", feat, b.constant(wd), bias=bd)
    return b.build([out]), params


def _margins(scores: np.ndarray) -> np.ndarray:
    s = np.sort(scores, axis=1)
    return s[:, -1] - s[:, -2]


def make_small_cnn(seed: int = 0, n_calib: int = 64, n_eval: int = 256,
                   classes: int = 10, noise: float = 0.35, min_margin: float = 0.15) -> Fixture:
    """3 conv2d + global_avg_pool2d + dense classifier on 8x8x3 inputs.

    Samples are class prototypes plus Gaussian noise, kept only when the fp32
    model predicts the generating class with a relative top-2 margin of at
    least ``min_margin``.
    """
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((classes, 1, 3, 8, 8)).astype(np.float32)
    feat_g, params = _cnn_graph(np.random.default_rng(seed + 1))

    def feats(xs):
        return evaluate(feat_g, Dataset([{"x": x} for x in xs]))

    # class centroids from a noisy pilot draw
    pilot = [protos[k] + noise * rng.standard_normal(protos[k].shape).astype(np.float32)
             for k in range(classes) for _ in range(16)]
    f = feats(pilot).reshape(classes, 16, -1).mean(axis=1)
    g, _ = _cnn_graph(np.random.default_rng(seed + 1), f)

    need = n_calib + n_eval
    samples, labels = [], []
    for _ in range(200):
        k = rng.integers(classes, size=256)
        xs = [(protos[j] + noise * rng.standard_normal(protos[j].shape)).astype(np.float32) for j in k]
        scores = evaluate(g, Dataset([{"x": x} for x in xs]))
        pred = predictions(scores)
        spread = scores.max(axis=1) - scores.min(axis=1)
        ok = (pred == k) & (_margins(scores) >= min_margin * spread)
        for i in np.flatnonzero(ok):
            samples.append({"x": xs[i]})
            labels.append(int(k[i]))
        if len(samples) >= need:
            break
    if len(samples) < need:
        raise FixtureError(f"only {len(samples)} of {need} samples met the margin")
    samples, labels = samples[:need], labels[:need]
    return Fixture(g, Dataset(samples[:n_calib], labels[:n_calib]),
                   Dataset(samples[n_calib:], labels[n_calib:]))


INT16_MAX = 2 ** 15 - 1


def _probe_acc_max(x: np.ndarray, w: np.ndarray, thr_x: float, bit: int) -> int:
    """Max |sum q_w q_x| of a symmetric int dense at ``bit`` with max thresholds."""
    def codes(v, thr):
        lim = 2 ** (bit - 1)
        q = np.trunc(v / (thr / lim) + np.copysign(0.5, v))
        return np.clip(q, -lim, lim - 1).astype(np.int64)
    acc = codes(x, thr_x) @ codes(w, float(np.abs(w).max())).T
    return int(np.abs(acc).max())


def make_overflow_probe(seed: int = 0, n_calib: int = 64, n_eval: int = 256, width: int = 512,
                        classes: int = 10, target: float = 1.8) -> Fixture:
    """Dense layer whose 8-bit int16 accumulation overflows but 6/7-bit does not.

    Weights are +-a sign patterns. Inputs are t * u + c * v_label + n where
    ``u`` and ``v_k`` are exact dual vectors of the weight rows (every class
    score gets t, the label gets c more, with c small against t so that any
    saturation collapses the scores into ties) and ``n`` is Gaussian noise projected
    off the row space: it leaves fp32 scores untouched but sets the input
    range and so the size of the integer codes. (t, c) are rescaled until the
    8-bit accumulator peaks near ``target`` times the int16 limit; below 2 so
    that halving either operand's code range already fits.
    """
    rng = np.random.default_rng(seed)
    s = rng.choice([-1.0, 1.0], size=(classes, width))
    w = (0.05 * s).astype(np.float32)
    dual = s.T @ np.linalg.inv(s @ s.T)          # s @ dual = I
    u = dual.sum(axis=1)
    n = rng.standard_normal((n_calib + n_eval, width))
    n -= (n @ s.T) @ dual.T                       # remove row-space component
    labels = rng.integers(classes, size=n_calib + n_eval)

    def inputs(k):
        x = k * (10.0 * u[None, :] + 2.0 * dual.T[labels]) + n
        return x.astype(np.float32)

    k = 1.0
    for _ in range(20):
        x = inputs(k)
        thr = float(np.abs(x[:n_calib]).max())
        peak = _probe_acc_max(x[:n_calib], w, thr, 8)
        if abs(peak / INT16_MAX - target) < 0.02:
            break
        k *= target * INT16_MAX / peak
    else:
        raise FixtureError("overflow probe tuning did not converge")

    b = GraphBuilder()
    xi = b.input("x", [1, width])
    out = b.add("dense", xi, b.constant(w))
    g = b.build([out])
    ds = Dataset([{"x": x[i:i + 1]} for i in range(len(x))], [int(l) for l in labels])
    calib, evl = ds.subset(0, n_calib), ds.subset(n_calib, len(x))

    # generation-time verification
    thr = float(np.abs(x[:n_calib]).max())
    if _probe_acc_max(x[:n_calib], w, thr, 8) <= INT16_MAX:
        raise FixtureError("8-bit accumulation does not overflow int16")
    for bit in (6, 7):
        if _probe_acc_max(x, w, thr, bit) > INT16_MAX:
            raise FixtureError(f"{bit}-bit accumulation overflows int16")
    pred = predictions(evaluate(g, ds))
    if not np.array_equal(pred, labels) or not np.isfinite(x).all():
        raise FixtureError("fp32 probe predictions do not match labels")
    return Fixture(g, calib, evl)


def make_tiny_mlp(seed: int = 0, n_calib: int = 64, n_eval: int = 64, features: int = 16,
                  classes: int = 6) -> Fixture:
    """input -> relu -> dense(W, bias): three searchable edges under int8_int32."""
    rng = np.random.default_rng(seed)
    w = _he(rng, (classes, features), features)
    bias = (rng.standard_normal(classes) * 0.1).astype(np.float32)
    b = GraphBuilder()
    x = b.input("x", [1, features])
    h = b.add("relu", x)
    out = b.add("dense", h, b.constant(w), bias=bias)
    g = b.build([out])
    data = [{"x": rng.standard_normal((1, features)).astype(np.float32)}
            for _ in range(n_calib + n_eval)]
    ds = Dataset(data)
    return Fixture(g, ds.subset(0, n_calib), ds.subset(n_calib, len(data)))


def make_conv_chain(layers: int = 59, channels: int = 2, seed: int = 0) -> Graph:
    """Chain of 1x1 convolutions; under int8_int32 each layer adds two searchable edges."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    h = b.input("x", [1, channels, 2, 2])
    for _ in range(layers):
        h = b.add("conv2d", h, b.constant(_he(rng, (channels, channels, 1, 1), channels)))
    return b.build([h])


# ---------------------------------------------------------------------------
# synthetic losses over bit candidates


def separable_loss(targets: Sequence[int], his: Sequence[int], cost: float = 1e-3,
                   penalty: float = 1.0) -> Callable[[tuple], float]:
    """Edge i is exact down to targets[i] bits and catastrophic below.

    A small per-bit cost makes every lossless decrement a strict improvement.
    """
    targets = tuple(targets)

    def loss(c):
        total = 0.0
        for b, t, hi in zip(c, targets, his):
            total += cost * b / hi + (penalty if b < t else 0.0)
        return total

    return loss


def coupled_loss(cost: float = 0.005) -> Callable[[tuple], float]:
    """Three edges whose tolerances interact (products of neighbouring bits)."""
    def loss(c):
        c0, c1, c2 = c
        err = 0.0
        if c0 * c1 < 40:
            err += 0.3
        if c1 + c2 < 12:
            err += 0.2
        if c0 + c2 < 9:
            err += 0.1
        return err + cost * (c0 + c1 + c2)

    return loss


def sparse_loss(good: tuple) -> Callable[[tuple], float]:
    """Zero at exactly one candidate, one everywhere else."""
    good = tuple(good)
    return lambda c: 0.0 if tuple(c) == good else 1.0


# ---------------------------------------------------------------------------
# committed files


def write_all(out: Path) -> list[Path]:
    from .io import save_dataset, save_graph

    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in SPEC_NAMES:
        p = out / f"spec_{name}.json"
        p.write_text(spec_fixture(name).dumps() + "\n")
        written.append(p)
    for name, fx in (("small_cnn", make_small_cnn()), ("overflow_probe", make_overflow_probe()),
                     ("fig4_chain", fig4_chain()), ("tiny_mlp", make_tiny_mlp())):
        written.append(save_graph(fx.graph, out / f"{name}.json"))
        written.append(save_dataset(fx.calib, out / f"{name}_calib.json"))
        written.append(save_dataset(fx.eval, out / f"{name}_eval.json"))
    return written


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="python -m hwquant.fixtures")
    ap.add_argument("--out", type=Path, default=Path("fixtures"))
    args = ap.parse_args(argv)
    for p in write_all(args.out):
        print(p)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
