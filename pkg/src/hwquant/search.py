"""Per-edge effective-bit search: space construction, candidate evaluation, search methods."""
from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .binding import SignatureMismatch, SimulatedGraph, bind
from .graph import Graph
from .hwspec import HardwareSpec, max_bits
from .interpreter import CHUNK, Dataset, agreement, evaluate, predictions
from .simulate import noop_params
from .topology import ConstraintError, Topology

MIN_BIT = 4
EXHAUSTIVE_CAP = 10 ** 5

Candidate = tuple


@dataclass(frozen=True)
class SearchSpace:
    edges: tuple[int, ...]
    ranges: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.edges)

    @property
    def lo(self) -> tuple[int, ...]:
        return tuple(r[0] for r in self.ranges)

    @property
    def hi(self) -> tuple[int, ...]:
        return tuple(r[1] for r in self.ranges)

    def contains(self, c: Sequence[int]) -> bool:
        return len(c) == len(self.ranges) and all(lo <= b <= hi for b, (lo, hi) in zip(c, self.ranges))

    def as_bits(self, c: Sequence[int]) -> dict[int, int]:
        return dict(zip(self.edges, (int(b) for b in c)))

    def to_json(self) -> dict:
        return {str(e): list(r) for e, r in zip(self.edges, self.ranges)}


def build_search_space(t: Union[Topology, SimulatedGraph], spec: Optional[HardwareSpec] = None,
                       min_bit: int = MIN_BIT) -> SearchSpace:
    """One (min_bit, widest candidate width) range per searchable edge, canonical order."""
    if isinstance(t, Topology):
        cands = {t.edge_index[e]: t.edge_dtypes[e] for e in t.searchable_edges()}
    else:
        cands = dict(t.candidates)
    edges, ranges = [], []
    for e in sorted(cands):
        hi = max(max_bits(d) for d in cands[e])
        if min_bit > hi:
            raise ConstraintError(f"edge {e}: min_bit {min_bit} exceeds the widest dtype ({hi} bits)")
        edges.append(e)
        ranges.append((min_bit, hi))
    return SearchSpace(tuple(edges), tuple(ranges))


def space_size(s: SearchSpace) -> int:
    return math.prod(hi - lo + 1 for lo, hi in s.ranges)


# ---------------------------------------------------------------------------
# evaluation


class BatchEvaluationError(RuntimeError):
    def __init__(self, errors: dict[int, BaseException]):
        super().__init__("candidate evaluation failed at indices "
                         + ", ".join(f"{i}: {e!r}" for i, e in sorted(errors.items())))
        self.errors = errors


class CandidateEvaluator:
    """Loss of bit candidates on a simulated graph.

    The graph structure, calibration batches and fp32 reference predictions
    are prepared once; candidate parameters are passed at run time, so one
    evaluator can serve many threads.
    """

    def __init__(self, sim_g: Graph, thresholds: Mapping[int, float], calib: Dataset,
                 lows: Optional[Mapping[int, float]] = None, objective: str = "agreement",
                 chunk: int = CHUNK):
        self.sim = SimulatedGraph(sim_g)
        missing = [e for e in self.sim.edges if e not in thresholds]
        if missing:
            raise ValueError(f"no threshold for edges {missing}")
        bad = [e for e in self.sim.edges if not thresholds[e] > 0]
        if bad:
            raise ValueError(f"non-positive thresholds on edges {bad}")
        self.thresholds = {e: float(thresholds[e]) for e in self.sim.edges}
        self.lows = dict(lows or {})
        self.calib = calib
        self.chunk = chunk
        if objective == "accuracy":
            if calib.labels is None:
                raise ValueError("accuracy objective needs a labeled dataset")
            self.reference = np.asarray(calib.labels)
        elif objective == "agreement":
            self.reference = predictions(self.outputs(None))
        else:
            raise ValueError(f"unknown objective {objective!r}")

    def params(self, candidate: Optional[Sequence[int]]):
        if candidate is None:
            noop = noop_params()
            return {n.id: noop for n in self.sim.graph.nodes if n.op == "simulated_quantize"}
        bits = dict(zip(self.sim.edges, (int(b) for b in candidate)))
        return bind(self.sim, bits, self.thresholds, self.lows).params

    def outputs(self, candidate: Optional[Sequence[int]]) -> np.ndarray:
        return evaluate(self.sim.graph, self.calib, params=self.params(candidate), chunk=self.chunk)

    def loss(self, candidate: Optional[Sequence[int]]) -> float:
        """1 - top-1 agreement with the reference; None means pass-through."""
        try:
            out = self.outputs(candidate)
        except SignatureMismatch:
            return 1.0
        return 1.0 - agreement(self.reference, predictions(out))

    __call__ = loss

    def batch(self, candidates: Sequence[Sequence[int]], workers: int = 1) -> list[float]:
        results: list = [None] * len(candidates)
        errors: dict[int, BaseException] = {}

        def one(i):
            try:
                results[i] = self.loss(candidates[i])
            except Exception as exc:  # reported per index below
                errors[i] = exc

        if workers <= 1 or len(candidates) <= 1:
            for i in range(len(candidates)):
                one(i)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(one, range(len(candidates))))
        if errors:
            raise BatchEvaluationError(errors)
        return results


def evaluate_candidate(sim_g: Graph, c: Optional[Sequence[int]], thresholds: Mapping[int, float],
                       calib: Dataset, **kwargs) -> float:
    return CandidateEvaluator(sim_g, thresholds, calib, **kwargs).loss(c)


def batched_evaluate(sim_g: Graph, candidates: Sequence[Sequence[int]], thresholds: Mapping[int, float],
                     calib: Dataset, workers: int = 1, **kwargs) -> list[float]:
    return CandidateEvaluator(sim_g, thresholds, calib, **kwargs).batch(candidates, workers)


# ---------------------------------------------------------------------------
# traces


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    candidate: tuple[int, ...]
    loss: float
    accepted: bool


@dataclass
class SearchTrace:
    header: dict = field(default_factory=dict)
    records: list[TraceRecord] = field(default_factory=list)

    def add(self, candidate, loss, accepted):
        self.records.append(TraceRecord(len(self.records), tuple(int(b) for b in candidate),
                                        float(loss), bool(accepted)))

    @property
    def evaluations(self) -> int:
        return len(self.records)

    def accepted_losses(self) -> list[float]:
        return [r.loss for r in self.records if r.accepted]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"header": self.header}, sort_keys=True)]
        for r in self.records:
            lines.append(json.dumps({"iteration": r.iteration, "candidate": list(r.candidate),
                                     "loss": r.loss, "accepted": r.accepted}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "SearchTrace":
        lines = [json.loads(l) for l in text.splitlines() if l.strip()]
        tr = cls(lines[0]["header"])
        for d in lines[1:]:
            tr.records.append(TraceRecord(d["iteration"], tuple(d["candidate"]), d["loss"], d["accepted"]))
        return tr


LossFn = Callable[[tuple], float]
# optional bulk evaluator (e.g. CandidateEvaluator.batch bound to a worker count)
BatchFn = Callable[[list], list]


def memoize(fn: LossFn) -> LossFn:
    """Cache a deterministic loss function by candidate."""
    cache: dict[tuple, float] = {}

    def wrapped(c):
        c = tuple(int(b) for b in c)
        if c not in cache:
            cache[c] = fn(c)
        return cache[c]

    wrapped.cache = cache
    return wrapped


# ---------------------------------------------------------------------------
# search methods


def greedy_search(space: SearchSpace, eval: LossFn, rounds: int = 1,
                  tol: float = 0.0) -> tuple[Candidate, SearchTrace]:
    """Edge-by-edge bit reduction starting from the widest candidate.

    A decrement is kept when its loss is below ``best + tol`` (strict
    improvement when tol is 0); on the first rejection the search moves on to
    the next edge. Stops early once a whole round accepts nothing.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    trace = SearchTrace({"method": "greedy", "rounds": rounds, "tol": tol,
                         "accept": "loss < best + tol"})
    lo = space.lo
    cur = list(space.hi)
    best = eval(tuple(cur))
    trace.add(cur, best, True)
    for _ in range(rounds):
        changed = False
        for i in range(len(cur)):
            while cur[i] > lo[i]:
                probe = cur.copy()
                probe[i] -= 1
                loss = eval(tuple(probe))
                ok = loss < best + tol
                trace.add(probe, loss, ok)
                if not ok:
                    break
                cur = probe
                best = min(best, loss)
                changed = True
        if not changed:
            break
    return tuple(cur), trace


def anneal_search(space: SearchSpace, eval: LossFn, steps: int = 1000, T0: float = 0.1,
                  decay: float = 0.995, seed: int = 0) -> tuple[Candidate, SearchTrace]:
    """Metropolis walk with energy exp(-loss/T); one edge moves by +-1 per step."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not T0 > 0 or not 0 < decay <= 1:
        raise ValueError("need T0 > 0 and 0 < decay <= 1")
    rng = np.random.default_rng(seed)
    trace = SearchTrace({"method": "anneal", "steps": steps, "T0": T0, "decay": decay,
                         "seed": seed, "move": "single edge +-1, clamped"})
    lo, hi = space.lo, space.hi
    cur = list(hi)
    cur_loss = eval(tuple(cur))
    best, best_loss = tuple(cur), cur_loss
    trace.add(cur, cur_loss, True)
    T = T0
    n = len(cur)
    for _ in range(steps):
        if n == 0:
            break
        i = int(rng.integers(n))
        step = 1 if rng.random() < 0.5 else -1
        probe = cur.copy()
        probe[i] = min(max(probe[i] + step, lo[i]), hi[i])
        loss = eval(tuple(probe))
        u = rng.random()
        if loss <= cur_loss:
            ok = True
        else:
            with np.errstate(under="ignore"):
                ok = u < math.exp(-(loss - cur_loss) / T) if T > 0 else False
        trace.add(probe, loss, ok)
        if ok:
            cur, cur_loss = probe, loss
            if loss < best_loss:
                best, best_loss = tuple(probe), loss
        T *= decay
    return best, trace


def random_search(space: SearchSpace, eval: LossFn, n: int = 100, seed: int = 0,
                  batch_eval: Optional[BatchFn] = None) -> tuple[Candidate, SearchTrace]:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    trace = SearchTrace({"method": "random", "n": n, "seed": seed})
    lo = np.array(space.lo, dtype=np.int64)
    hi = np.array(space.hi, dtype=np.int64)
    cands = [tuple(int(b) for b in rng.integers(lo, hi + 1)) if len(space) else () for _ in range(n)]
    losses = batch_eval(cands) if batch_eval is not None else [eval(c) for c in cands]
    best, best_loss = None, math.inf
    for c, loss in zip(cands, losses):
        improved = loss < best_loss
        trace.add(c, loss, improved)
        if improved:
            best, best_loss = c, loss
    return best, trace


def exhaustive_search(space: SearchSpace, eval: LossFn, cap: int = EXHAUSTIVE_CAP,
                      batch_eval: Optional[BatchFn] = None) -> tuple[Candidate, SearchTrace]:
    """Lexicographic enumeration; the first candidate reaching the minimum wins."""
    size = space_size(space)
    if size > cap:
        raise ValueError(f"search space has {size} points, above the exhaustive cap {cap}")
    trace = SearchTrace({"method": "exhaustive", "size": size})
    best, best_loss = None, math.inf
    cands = list(itertools.product(*(range(lo, hi + 1) for lo, hi in space.ranges)))
    losses = batch_eval(cands) if batch_eval is not None else [eval(c) for c in cands]
    for c, loss in zip(cands, losses):
        improved = loss < best_loss
        trace.add(c, loss, improved)
        if improved:
            best, best_loss = c, loss
    return best, trace


METHODS = {
    "greedy": greedy_search,
    "anneal": anneal_search,
    "random": random_search,
    "exhaustive": exhaustive_search,
}
