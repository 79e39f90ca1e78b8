"""
When an int16 accumulator is too narrow
=======================================

A 512-wide dense layer on a backend that only offers int8 x int8 -> int16.
At 8 effective bits the accumulator overflows; the search gives up a bit on
one input instead.
"""

import numpy as np

from hwquant import fixtures as fx
from hwquant.binding import SimulatedGraph, bind
from hwquant.calibration import collect_stats, thresholds
from hwquant.interpreter import AccumulatorOverflow, evaluate, predictions
from hwquant.realize import realize
from hwquant.search import CandidateEvaluator, build_search_space, greedy_search, memoize
from hwquant.topology import generate_topology, insert_simulated_quantize

f = fx.make_overflow_probe()
spec = fx.spec_fixture("arm_vmlal_like")
sim_g = insert_simulated_quantize(f.graph, generate_topology(f.graph, spec))
sim = SimulatedGraph(sim_g)
stats = collect_stats(f.graph, f.calib, edges=sim.edges)
thr = thresholds(stats, method="max")
lows = {e: s.min for e, s in stats.per_edge.items()}
space = build_search_space(sim)
ref = predictions(evaluate(f.graph, f.eval))

def run(bits):
    g = realize(sim_g, bind(sim, space.as_bits(bits), thr, lows).strategy)
    try:
        out = evaluate(g, f.eval, overflow_mode="trap")
    except AccumulatorOverflow as exc:
        return f"trap: {exc}"
    return f"no overflow, agreement {np.mean(predictions(out) == ref):.3f}"

print("all max bits", space.hi, "->", run(space.hi))

# simulation saturates instead of trapping, so the loss sees the damage
loss = memoize(CandidateEvaluator(sim_g, thr, f.calib, lows))
best, trace = greedy_search(space, loss)
for r in trace.records:
    print(f"  {r.candidate} loss {r.loss:.3f} {'accepted' if r.accepted else 'rejected'}")
print("greedy", best, "->", run(best))
