import functools
from pathlib import Path

import pytest

from hwquant import fixtures as fx
from hwquant.binding import SimulatedGraph
from hwquant.calibration import collect_stats, thresholds
from hwquant.topology import generate_topology, insert_simulated_quantize

ROOT = Path(__file__).resolve().parents[1]
FIXTURE_DIR = ROOT / "fixtures"


class Pipeline:
    """Fixture graph taken through topology, insertion and calibration."""

    def __init__(self, fixture, spec_name, method="max", **kw):
        self.fx = fixture
        self.spec = fx.spec_fixture(spec_name)
        self.topology = generate_topology(fixture.graph, self.spec)
        self.sim_g = insert_simulated_quantize(fixture.graph, self.topology)
        self.sim = SimulatedGraph(self.sim_g)
        self.stats = collect_stats(fixture.graph, fixture.calib, edges=self.sim.edges)
        self.thresholds = thresholds(self.stats, method=method, **kw)
        self.lows = {e: s.min for e, s in self.stats.per_edge.items()}


@functools.lru_cache(maxsize=None)
def pipeline(name, spec_name, method="max", pow2=False):
    makers = {"small_cnn": fx.make_small_cnn, "overflow_probe": fx.make_overflow_probe,
              "fig4_chain": fx.fig4_chain, "tiny_mlp": fx.make_tiny_mlp}
    return Pipeline(makers[name](), spec_name, method, pow2=pow2)


@pytest.fixture(scope="session")
def cnn_pipeline():
    return pipeline("small_cnn", "int8_int32")


@pytest.fixture(scope="session")
def probe_pipeline():
    return pipeline("overflow_probe", "arm_vmlal_like")


@pytest.fixture(scope="session")
def mlp_pipeline():
    return pipeline("tiny_mlp", "int8_int32")


# acceptance criteria report: (number, title, passed, seconds)
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, secs in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {title}  ({secs:.2f}s)")
