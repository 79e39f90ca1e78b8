"""
Where integer arithmetic goes, and what it costs
================================================

A conv2d -> add -> global_avg_pool2d chain against a backend that runs conv2d
and add in integers but pooling only in float.
"""

import numpy as np

from hwquant import fixtures as fx
from hwquant.binding import SimulatedGraph, bind
from hwquant.calibration import collect_stats, thresholds
from hwquant.interpreter import evaluate
from hwquant.topology import generate_topology, insert_simulated_quantize

f = fx.fig4_chain()
spec = fx.spec_fixture("fig3")
print(spec)

# partition: which operators can run in integers
t = generate_topology(f.graph, spec)
ops = lambda ids: sorted(f.graph.node(i).op for i in ids if f.graph.node(i).op not in ("input", "constant"))
print("quantized ops:", ops(t.qv))
print("float ops:    ", ops(t.nqv))

# simulated quantizers on every edge feeding an integer op, plus a boundary before pooling
sim_g = insert_simulated_quantize(f.graph, t)
for n in sim_g.nodes:
    if n.op == "simulated_quantize":
        consumer = sim_g.node(sim_g.consumers(n.id)[0]).op
        print(f"  sq node {n.id:2d} -> {consumer:18s} role={n.attrs['role']:9s} candidates={n.attrs.get('candidates')}")

# unbound quantizers are no-ops
ref = evaluate(f.graph, f.eval)
assert np.array_equal(evaluate(sim_g, f.eval), ref)

# calibrate, then sweep a uniform bit width on the data edges
sim = SimulatedGraph(sim_g)
stats = collect_stats(f.graph, f.calib, edges=sim.edges)
thr = thresholds(stats, method="max")
for bit in (16, 12, 8, 6, 4):
    bits = {e: (bit if max(d.width for d in sim.candidates[e]) <= 16 else 32) for e in sim.edges}
    params = bind(sim, bits, thr).params
    out = evaluate(sim_g, f.eval, params=params)
    print(f"bit {bit:2d}: max |error| {np.abs(out - ref).max():.5f}")
