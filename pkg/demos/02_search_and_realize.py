"""
Search, lower, and check a small CNN
====================================

Three convolutions and a dense classifier on an int8 x int8 -> int32 backend.
Greedy bit reduction on the calibration set, then lowering to an integer graph
that is run with overflow trapping switched on.
"""

import numpy as np

from hwquant import fixtures as fx
from hwquant.binding import SimulatedGraph, bind
from hwquant.calibration import collect_stats, thresholds
from hwquant.interpreter import evaluate, predictions
from hwquant.realize import realize, requant_params_of
from hwquant.search import CandidateEvaluator, build_search_space, greedy_search, memoize, space_size
from hwquant.topology import generate_topology, insert_simulated_quantize

f = fx.make_small_cnn()
spec = fx.spec_fixture("int8_int32")
sim_g = insert_simulated_quantize(f.graph, generate_topology(f.graph, spec))
sim = SimulatedGraph(sim_g)

stats = collect_stats(f.graph, f.calib, edges=sim.edges)
thr = thresholds(stats, method="max")
lows = {e: s.min for e, s in stats.per_edge.items()}

space = build_search_space(sim)
print(f"{len(space)} searchable edges, {space_size(space)} candidates")

# loss = 1 - top-1 agreement with the float model on the calibration set
loss = memoize(CandidateEvaluator(sim_g, thr, f.calib, lows))
print("all 4 bits:", loss(space.lo), " all max:", loss(space.hi))

best, trace = greedy_search(space, loss, rounds=2)
print("greedy:", best, "loss", loss(best), "evaluations", trace.evaluations)

strategy = bind(sim, space.as_bits(best), thr, lows).strategy
g_int = realize(sim_g, strategy)
print("realized ops:", sorted({n.op for n in g_int.nodes}))
print("requantize (multiplier, shift):", [tuple(p) for p in requant_params_of(g_int)][:3], "...")

ref = predictions(evaluate(f.graph, f.eval))
got = predictions(evaluate(g_int, f.eval, overflow_mode="trap"))
print(f"eval agreement with float: {np.mean(ref == got):.4f} over {len(ref)} samples")
