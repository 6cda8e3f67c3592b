"""Average treatment effects from fused two-sample instrumental-variable data."""

from __future__ import annotations

from .data import FusedSample, Formula, build_design, parse_formula, read_fused_csv, write_fused_csv
from .errors import FusionIVError
from .estimators import EstimateResult, EstimatorKind, estimate, make_recipe, stacked_system
from .inference import bootstrap, sandwich, wald_ci
from .nuisance import ModelSpec, NuisanceSet, fit_nuisances

__all__ = [
    "EstimateResult",
    "EstimatorKind",
    "Formula",
    "FusedSample",
    "FusionIVError",
    "ModelSpec",
    "NuisanceSet",
    "bootstrap",
    "build_design",
    "estimate",
    "fit_nuisances",
    "make_recipe",
    "parse_formula",
    "read_fused_csv",
    "sandwich",
    "stacked_system",
    "wald_ci",
    "write_fused_csv",
]
