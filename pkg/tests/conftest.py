"""Shared, expensive fixtures: full pipeline runs cached per (seed, noise)."""
import logging
import time

import pytest

from skillseg.config import PipelineConfig
from skillseg.pipeline import Run, run_stage, stage_order

logging.getLogger("skillseg").setLevel(logging.WARNING)


class RunCache:
    def __init__(self, factory):
        self.factory = factory
        self.runs = {}
        self.timings = {}

    def get(self, seed: int = 0, noise: float = 0.01, tag: str = "") -> Run:
        key = (seed, noise, tag)
        if key not in self.runs:
            cfg = PipelineConfig(seed=seed)
            cfg.data.noise = noise
            out = self.factory.mktemp(f"run-s{seed}-n{noise}{tag}")
            run = Run(cfg, out)
            times = {}
            for stage in stage_order(cfg):
                t = time.perf_counter()
                run_stage(run, stage)
                times[stage] = time.perf_counter() - t
            self.runs[key], self.timings[key] = run, times
        return self.runs[key]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return RunCache(tmp_path_factory)


@pytest.fixture(scope="session")
def default_run(runs):
    return runs.get(0, 0.01)


@pytest.fixture(scope="session")
def noiseless_run(runs):
    return runs.get(0, 0.0)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; returns the verdict."""
    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
