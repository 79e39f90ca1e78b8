"""Per-edge statistics from fp32 runs and threshold estimators."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .graph import Graph, edge_order, traversal_order
from .interpreter import Dataset, run

EPS = 1e-8
DEFAULT_BINS = 2048
KL_SMOOTH = 1e-9


@dataclass
class EdgeStats:
    min: float
    max: float
    absmax: float
    counts: np.ndarray
    sample_count: int
    source: str = "op"

    @property
    def bins(self) -> int:
        return len(self.counts)

    @property
    def bin_width(self) -> float:
        return self.absmax / self.bins

    def to_json(self) -> dict:
        return {"min": self.min, "max": self.max, "absmax": self.absmax, "bins": self.bins,
                "counts": [int(c) for c in self.counts], "samples": self.sample_count,
                "source": self.source}

    @classmethod
    def from_json(cls, d: Mapping) -> "EdgeStats":
        counts = np.asarray(d["counts"], dtype=np.int64)
        if len(counts) != int(d["bins"]):
            raise ValueError("bins and counts disagree")
        return cls(float(d["min"]), float(d["max"]), float(d["absmax"]), counts,
                   int(d["samples"]), d.get("source", "op"))

    @classmethod
    def from_values(cls, values: np.ndarray, bins: int = DEFAULT_BINS, samples: int = 1) -> "EdgeStats":
        values = np.asarray(values, dtype=np.float64).ravel()
        lo, hi = float(values.min()), float(values.max())
        absmax = max(abs(lo), abs(hi))
        return cls(lo, hi, absmax, histogram(np.abs(values), absmax, bins), samples)


@dataclass
class CalibrationStats:
    per_edge: dict[int, EdgeStats]
    dataset_fingerprint: str = ""
    graph_fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"dataset_fingerprint": self.dataset_fingerprint,
                "graph_fingerprint": self.graph_fingerprint,
                "meta": self.meta,
                "edges": {str(e): self.per_edge[e].to_json() for e in sorted(self.per_edge)}}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, doc: Mapping) -> "CalibrationStats":
        return cls({int(k): EdgeStats.from_json(v) for k, v in doc["edges"].items()},
                   doc.get("dataset_fingerprint", ""), doc.get("graph_fingerprint", ""),
                   dict(doc.get("meta", {})))


def histogram(absvalues: np.ndarray, absmax: float, bins: int) -> np.ndarray:
    """Right-closed bins (k*w, (k+1)*w] over [0, absmax]; zero lands in bin 0."""
    counts = np.zeros(bins, dtype=np.int64)
    if absvalues.size == 0:
        return counts
    if absmax <= 0:
        counts[0] = absvalues.size
        return counts
    w = absmax / bins
    if not w > 0:  # subnormal absmax
        counts[0] = absvalues.size
        return counts
    idx = np.ceil(np.asarray(absvalues, np.float64) / w).astype(np.int64) - 1
    np.clip(idx, 0, bins - 1, out=idx)
    return np.bincount(idx, minlength=bins).astype(np.int64)


def collect_stats(g: Graph, dataset: Dataset, bins: int = DEFAULT_BINS,
                  edges: Optional[Iterable[int]] = None, chunk: int = 256) -> CalibrationStats:
    """Run the fp32 graph over the dataset and summarize the tensors on each edge.

    Two passes: exact extrema first, then binning against the final absmax.
    """
    if len(dataset) == 0:
        raise ValueError("calibration dataset is empty")
    canon = edge_order(g)
    wanted = sorted(set(range(len(canon)) if edges is None else edges))
    src = {e: canon[e].src[0] for e in wanted}
    order = traversal_order(g)

    lo = {e: math.inf for e in wanted}
    hi = {e: -math.inf for e in wanted}
    for feed in dataset.chunks(chunk):
        vals = run(g, feed, order=order)
        for e in wanted:
            v = vals[src[e]]
            lo[e] = min(lo[e], float(v.min()))
            hi[e] = max(hi[e], float(v.max()))

    absmax = {e: max(abs(lo[e]), abs(hi[e])) for e in wanted}
    counts = {e: np.zeros(bins, dtype=np.int64) for e in wanted}
    for feed in dataset.chunks(chunk):
        vals = run(g, feed, order=order)
        for e in wanted:
            counts[e] += histogram(np.abs(vals[src[e]]).ravel(), absmax[e], bins)

    per_edge = {
        e: EdgeStats(lo[e], hi[e], absmax[e], counts[e], len(dataset), g.node(src[e]).op)
        for e in wanted
    }
    return CalibrationStats(per_edge, dataset.fingerprint())


def merge_stats(a: EdgeStats, b: EdgeStats) -> EdgeStats:
    """Combine stats gathered on disjoint data with identical binning."""
    if a.bins != b.bins or a.absmax != b.absmax:
        raise ValueError("merge requires identical histogram ranges")
    return EdgeStats(min(a.min, b.min), max(a.max, b.max), a.absmax, a.counts + b.counts,
                     a.sample_count + b.sample_count, a.source)


# ---------------------------------------------------------------------------
# estimators


def threshold_max(stats: EdgeStats) -> float:
    return stats.absmax if stats.absmax > 0 else EPS


def threshold_quantile(stats: EdgeStats, q: float) -> float:
    if not 0 < q <= 1:
        raise ValueError(f"quantile must lie in (0, 1], got {q}")
    if stats.absmax <= 0:
        return EPS
    if q == 1:
        return stats.absmax
    cum = np.cumsum(stats.counts)
    total = cum[-1]
    if total == 0:
        raise ValueError("histogram is empty")
    k = int(np.argmax(cum / total >= q - 1e-12))
    return _bin_edge(stats, k + 1)


def _bin_edge(stats: EdgeStats, i: int) -> float:
    """Upper edge of the first ``i`` bins; absmax when that underflows."""
    t = stats.absmax * i / stats.bins
    return min(t, stats.absmax) if t > 0 else stats.absmax


def _kl_for_candidate(counts: np.ndarray, i: int, levels: int) -> float:
    clipped = counts[:i].astype(np.float64)
    p = clipped.copy()
    p[i - 1] += counts[i:].sum()              # outliers fold into the last bin of P only
    nonzero = p != 0
    merged = i // levels
    q = np.zeros(i, dtype=np.float64)
    for j in range(levels):
        start = j * merged
        stop = i if j == levels - 1 else start + merged
        mask = nonzero[start:stop]
        n = int(mask.sum())
        if n:
            q[start:stop] = np.where(mask, clipped[start:stop].sum() / n, 0.0)
    p = np.where(p == 0, KL_SMOOTH, p)
    q = np.where(q == 0, KL_SMOOTH, q)
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def kl_divergences(stats: EdgeStats, target_bit: int) -> dict[int, float]:
    """KL(P||Q) per candidate bin count i (threshold = i * bin_width)."""
    levels = 1 << target_bit
    if stats.bins < levels:
        raise ValueError(f"KL sweep at {target_bit} bits needs >= {levels} bins, have {stats.bins}")
    if stats.counts.sum() == 0:
        raise ValueError("histogram is empty")
    return {i: _kl_for_candidate(stats.counts, i, levels) for i in range(levels, stats.bins + 1)}


def threshold_kl(stats: EdgeStats, target_bit: int) -> float:
    divs = kl_divergences(stats, target_bit)
    if stats.absmax <= 0:
        return EPS
    best_i, best = None, math.inf
    for i, d in divs.items():
        if d < best:
            best_i, best = i, d
    return _bin_edge(stats, best_i)


def round_pow2(threshold: float) -> float:
    """Nearest power of two, with the exponent rounded half up."""
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    m, e = math.frexp(threshold)  # threshold = m * 2**e, m in [0.5, 1)
    # log2(m) + 0.5 >= 0  <=>  m >= 2**-0.5
    return math.ldexp(1.0, e if m >= math.sqrt(0.5) else e - 1)


def estimate_threshold(stats: EdgeStats, method: str = "quantile", q: float = 0.99,
                       kl_bits: int = 8, pow2: bool = False) -> float:
    if stats.source == "constant" or method == "max":
        thr = threshold_max(stats)
    elif method == "quantile":
        thr = threshold_quantile(stats, q)
    elif method == "kl":
        thr = threshold_kl(stats, kl_bits)
    else:
        raise ValueError(f"unknown calibration method {method!r}")
    return round_pow2(thr) if pow2 else thr


def thresholds(stats: CalibrationStats, **kwargs) -> dict[int, float]:
    return {e: estimate_threshold(s, **kwargs) for e, s in stats.per_edge.items()}


def lows(stats: CalibrationStats) -> dict[int, float]:
    return {e: s.min for e, s in stats.per_edge.items()}
