import numpy as np
import pytest

import medpath as mp
from medpath.simulation import SIMULATION_BASIS

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, ok: bool, detail: str) -> None:
    line = f"[acceptance] {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def scenario1_small():
    """Moderate scenario-1 draw shared by fast integration-style tests."""
    cfg = mp.SimConfig(n=600, p=25, scenario=1, phi=2.0, n_reps=1, seed=2024)
    d, truth = mp.generate(cfg, 0)
    return d, truth


@pytest.fixture(scope="session")
def scenario1_fits(scenario1_small):
    d, truth = scenario1_small
    mfit = mp.fit_mediator_model(d, SIMULATION_BASIS)
    ffit = mp.fit_factor(mfit.residuals, 1)
    from medpath.proxy import build_proxy

    prox = build_proxy(d, mfit.residuals, ffit.loading, ffit.uniqueness)
    return d, truth, mfit, ffit, prox
