from dataclasses import replace
from datetime import datetime, timedelta

import pytest

from servicetime.config import RunConfig
from servicetime.ingest import ServiceRequest
from servicetime.synth import SimConfig, simulate


def make_request(day: int, service: float | None = 1.0, *, type_="A", region=0, rid=None,
                 description="2 bags", hour=9, start=datetime(2023, 1, 2)):
    created = start + timedelta(days=day, hours=hour)
    completed = None if service is None else created + timedelta(days=service)
    return ServiceRequest(rid or f"r{day}-{type_}-{region}-{hour}-{service}", created, completed, "Dept",
                          type_, -85.3, 35.0, region, description)


@pytest.fixture(scope="session")
def small_sim():
    return simulate(SimConfig(horizon_days=90, seed=3))


@pytest.fixture(scope="session")
def tiny_config():
    cfg = RunConfig()
    cfg.model = replace(cfg.model, window=7, d_model=8, temporal_heads=2, inter_hidden=8, inter_heads=2,
                        mlp_hidden=8)
    cfg.train = replace(cfg.train, epochs=3, patience=2)
    cfg.gpr = replace(cfg.gpr, use_season=False, cap=300)
    return cfg


@pytest.fixture(scope="session")
def tiny_experiment(small_sim):
    from servicetime.evaluation import Experiment

    return Experiment.from_dataset(small_sim.dataset(), 0.8, small_sim.config.n_regions)


@pytest.fixture(scope="session")
def tiny_model(tiny_experiment, tiny_config):
    return tiny_experiment.fit(tiny_config)


# one summary line per acceptance criterion, printed after the run
CRITERIA: dict[int, tuple[str, str, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    CRITERIA[number] = ("PASS" if passed else "FAIL", title, detail)
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, title, detail = CRITERIA[n]
        terminalreporter.write_line(f"[{status}] {n}. {title}: {detail}")
