"""Simulation: data-generating process, Monte Carlo driver and exact oracle."""

from __future__ import annotations

from .dgp import DgpParams, SimulatedData, gen_fused, make_rng, misspecify, sample_truncnorm
from .montecarlo import MonteCarloReport, ScenarioConfig, metrics, render_table, run_scenario
from .oracle import DiscreteDgp, discrete_oracle, example_dgps

__all__ = [
    "DgpParams",
    "DiscreteDgp",
    "MonteCarloReport",
    "ScenarioConfig",
    "SimulatedData",
    "discrete_oracle",
    "example_dgps",
    "gen_fused",
    "make_rng",
    "metrics",
    "misspecify",
    "render_table",
    "run_scenario",
    "sample_truncnorm",
]
