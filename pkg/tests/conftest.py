from __future__ import annotations

import pytest

from fusion_iv.data import FusedSample
from fusion_iv.sim.dgp import DgpParams, gen_fused, make_rng, misspecify

from helpers import ACCEPTANCE_LINES


@pytest.fixture(scope="session")
def params() -> DgpParams:
    return DgpParams()


@pytest.fixture(scope="session")
def sim_sample(params) -> FusedSample:
    """A moderate simulated sample with transformed covariates attached."""
    rng = make_rng(2024)
    return misspecify(gen_fused(params, 20_000, rng).sample, rng)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
