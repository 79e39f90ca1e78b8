import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hwquant.calibration import (EPS, CalibrationStats, EdgeStats, collect_stats, estimate_threshold,
                                 histogram, kl_divergences, merge_stats, round_pow2, threshold_kl,
                                 threshold_max, threshold_quantile)
from hwquant.graph import GraphBuilder
from hwquant.interpreter import Dataset


def relu_graph(n):
    b = GraphBuilder()
    x = b.input("x", [1, n])
    return b.build([b.add("relu", x)])


def stats_of(values, bins=2048):
    return EdgeStats.from_values(np.asarray(values, np.float64), bins)


def test_collect_single_sample():
    g = relu_graph(3)
    ds = Dataset([{"x": np.array([[-3.2, 1.1, 2.9]], np.float32)}])
    s = collect_stats(g, ds).per_edge[0]
    assert s.absmax == pytest.approx(3.2) and s.min == pytest.approx(-3.2) and s.max == pytest.approx(2.9)
    assert s.counts.sum() == 3


def test_collect_two_samples():
    g = relu_graph(1)
    ds = Dataset([{"x": np.array([[1.0]], np.float32)}, {"x": np.array([[-5.0]], np.float32)}])
    s = collect_stats(g, ds, bins=16).per_edge[0]
    assert s.absmax == 5.0 and s.sample_count == 2


def test_collect_is_chunk_invariant():
    g = relu_graph(8)
    rng = np.random.default_rng(0)
    ds = Dataset([{"x": rng.standard_normal((1, 8)).astype(np.float32)} for _ in range(10)])
    a, b = collect_stats(g, ds, chunk=3), collect_stats(g, ds, chunk=10)
    assert a.to_json() == b.to_json()


def test_empty_dataset():
    with pytest.raises(ValueError):
        collect_stats(relu_graph(1), Dataset([]))


def test_zero_edge_threshold():
    s = stats_of([0.0, 0.0])
    assert s.absmax == 0
    assert threshold_max(s) == EPS
    assert threshold_quantile(s, 0.5) == EPS


def test_threshold_max_examples():
    assert threshold_max(stats_of([-3.2, 1.0])) == 3.2
    assert threshold_max(stats_of([7.0] * 5)) == 7.0


def test_histogram_right_closed():
    counts = histogram(np.array([0.0, 0.5, 1.0, 1.0001, 4.0]), 4.0, 4)
    assert counts.tolist() == [3, 1, 0, 1]


def test_quantile_uniform_oracle():
    s = stats_of(np.arange(1, 101), bins=100)
    assert threshold_quantile(s, 0.99) == 99.0
    assert threshold_quantile(s, 1.0) == 100.0


def test_quantile_excludes_outlier():
    rng = np.random.default_rng(0)
    vals = np.concatenate([rng.uniform(0, 1, 998), [1.0, 1000.0]])
    s = stats_of(vals, bins=2048)
    thr = threshold_quantile(s, 0.999)
    w = 1000.0 / 2048
    assert thr <= math.ceil(1.0 / w) * w + 1e-12
    with pytest.raises(ValueError):
        threshold_quantile(s, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=200), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_quantile_monotone_and_bounded(vals, q1, q2):
    s = stats_of(vals, bins=64)
    lo, hi = sorted((q1, q2))
    assert threshold_quantile(s, lo) <= threshold_quantile(s, hi)
    if s.absmax > 0:
        assert 0 < threshold_quantile(s, lo) <= s.absmax
        assert threshold_quantile(s, 1.0) == threshold_max(s)


def kl_oracle(counts, target_bit):
    """Plain-Python KL sweep: argmin over candidate bin counts, smallest on ties.

    P is the clipped histogram with outliers added to its last bin; Q spreads
    the clipped (outlier-free) mass of each level over P's nonzero bins.
    """
    levels = 2 ** target_bit
    B = len(counts)
    best_i, best = None, None
    for i in range(levels, B + 1):
        clipped = [float(c) for c in counts[:i]]
        p = list(clipped)
        p[-1] += float(sum(counts[i:]))
        m = i // levels
        q = [0.0] * i
        for j in range(levels):
            lo = j * m
            hi = i if j == levels - 1 else lo + m
            nz = [k for k in range(lo, hi) if p[k] != 0]
            tot = sum(clipped[lo:hi])
            for k in nz:
                q[k] = tot / len(nz)
        p = [v if v != 0 else 1e-9 for v in p]
        q = [v if v != 0 else 1e-9 for v in q]
        sp, sq = sum(p), sum(q)
        d = sum((a / sp) * math.log((a / sp) / (b / sq)) for a, b in zip(p, q))
        if best is None or d < best:
            best_i, best = i, d
    return best_i


def test_kl_matches_bruteforce_on_random_histograms():
    rng = np.random.default_rng(11)
    for trial in range(50):
        B = int(rng.integers(32, 257))
        bit = int(rng.integers(2, 6))
        if B < 2 ** bit:
            continue
        shape = rng.choice(["exp", "normal", "sparse"])
        if shape == "exp":
            vals = rng.exponential(1.0, 3000)
        elif shape == "normal":
            vals = np.abs(rng.standard_normal(3000))
        else:
            vals = rng.choice([0.1, 0.5, 3.0, 7.5], 500)
        s = stats_of(vals, bins=B)
        i = kl_oracle(s.counts.tolist(), bit)
        assert threshold_kl(s, bit) == pytest.approx(s.absmax * i / B, rel=0, abs=0)


def test_kl_uniform_returns_absmax():
    s = EdgeStats(0.0, 1.0, 1.0, np.full(64, 10, np.int64), 1)
    assert threshold_kl(s, 4) == 1.0


def test_kl_all_mass_in_first_bin():
    counts = np.zeros(128, np.int64)
    counts[0] = 100
    s = EdgeStats(0.0, 1.0, 1.0, counts, 1)
    assert threshold_kl(s, 4) == 16 / 128


def test_kl_errors():
    with pytest.raises(ValueError):
        kl_divergences(EdgeStats(0.0, 1.0, 1.0, np.zeros(64, np.int64), 1), 4)
    with pytest.raises(ValueError):
        threshold_kl(stats_of([1.0, 2.0], bins=8), 4)


def test_round_pow2_examples():
    assert round_pow2(3.2) == 4.0
    assert round_pow2(2.0) == 2.0
    assert round_pow2(1.5) == 2.0
    with pytest.raises(ValueError):
        round_pow2(0.0)


@settings(max_examples=2000, deadline=None)
@given(st.floats(1e-30, 1e30))
def test_round_pow2_properties(t):
    out = round_pow2(t)
    m, e = math.frexp(out)
    assert m == 0.5
    assert abs(math.log2(out) - math.log2(t)) <= 0.5 + 1e-12


def test_constant_source_uses_max():
    s = stats_of(np.linspace(-1, 1, 1000))
    s.source = "constant"
    assert estimate_threshold(s, method="quantile", q=0.5) == 1.0


def test_stats_json_roundtrip_and_merge():
    a = stats_of([1.0, -2.0, 0.5], bins=8)
    b = EdgeStats(-1.0, 2.0, 2.0, histogram(np.array([1.0, 2.0]), 2.0, 8), 1)
    m = merge_stats(a, b)
    assert m.counts.sum() == 5 and m.min == -2.0 and m.max == 2.0
    assert merge_stats(b, a).counts.tolist() == m.counts.tolist()
    cs = CalibrationStats({0: a, 3: b}, "abc")
    back = CalibrationStats.from_json(cs.to_json())
    assert back.dumps() == cs.dumps()
    with pytest.raises(ValueError):
        merge_stats(a, stats_of([5.0], bins=8))


def test_subnormal_absmax_keeps_positive_thresholds():
    s = stats_of([5e-324], bins=64)
    assert threshold_quantile(s, 0.5) == s.absmax > 0
    assert threshold_kl(s, 2) == s.absmax
