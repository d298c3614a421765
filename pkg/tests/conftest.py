import numpy as np
import pytest

from turnpike_mhe import (
    CostWeights,
    WindowCache,
    batch_reactor_scenario,
    fie_reference,
    motivating_scenario,
    simulate,
)

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS = {}


class Instance:
    def __init__(self, scenario, weights):
        self.scenario = scenario
        self.sim = simulate(scenario)
        self.data = self.sim.data
        self.model = scenario.model
        self.sets = scenario.sets
        self.weights = weights
        self.cache = WindowCache()
        self._ref = None

    @property
    def args(self):
        return self.model, self.sets, self.weights

    @property
    def reference(self):
        if self._ref is None:
            self._ref = fie_reference(self.data, *self.args, cache=self.cache)
        return self._ref


@pytest.fixture(scope="session")
def motivating():
    return Instance(motivating_scenario(70), CostWeights.identity(1, 1))


@pytest.fixture(scope="session")
def reactor():
    return Instance(batch_reactor_scenario(100, seed=0), CostWeights.identity(2, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
