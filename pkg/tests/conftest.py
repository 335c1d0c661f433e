import time

import pytest
from hypothesis import HealthCheck, settings

from meshfuse.scenario import ScenarioConfig, generate_dataset, run_scenario

settings.register_profile(
    "default", deadline=None, max_examples=100, suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

SEEDS = tuple(range(12))
STRATEGIES = ("dp", "dah")

_criteria = pytest.StashKey[list]()


class ScenarioRuns:
    """Reports of the 12-seed synthetic flights, computed once per session."""

    def __init__(self) -> None:
        self.datasets = {}
        self.gen_seconds = {}
        self.reports = {}
        self.seconds = {}

    def get(self, seed: int, strategy: str):
        key = (seed, strategy)
        if key not in self.reports:
            if seed not in self.datasets:
                t0 = time.perf_counter()
                self.datasets[seed] = generate_dataset(ScenarioConfig(seed=seed))
                self.gen_seconds[seed] = time.perf_counter() - t0
            t0 = time.perf_counter()
            self.reports[key] = run_scenario(ScenarioConfig(seed=seed, strategy=strategy), self.datasets[seed])
            self.seconds[key] = time.perf_counter() - t0
        return self.reports[key]

    def all(self, strategies=STRATEGIES):
        return {(s, st): self.get(s, st) for s in SEEDS for st in strategies}

    def total_seconds(self, strategies=STRATEGIES) -> float:
        self.all(strategies)
        runs = sum(v for (_, st), v in self.seconds.items() if st in strategies)
        return runs + sum(self.gen_seconds.values())


@pytest.fixture(scope="session")
def scenario_runs():
    return ScenarioRuns()


@pytest.fixture
def record_criterion(request):
    """Print and remember one PASS/FAIL line for an acceptance criterion."""
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        request.config.stash.setdefault(_criteria, []).append((number, line))
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_criteria, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
