"""Sandwich and bootstrap standard errors, Wald intervals."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .data import FusedSample
from .errors import FusionIVError, SingularBreadError, TooManyFailuresError
from .estimators import StackedSystem
from .nuisance import numerical_jacobian

log = logging.getLogger(__name__)

STACK_TOL = 1e-8
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True, eq=False)
class SandwichResult:
    bread: np.ndarray
    meat: np.ndarray
    covariance: np.ndarray
    se: float
    names: list[str]
    moment_norm: float

    def se_of(self, name: str) -> float:
        j = self.names.index(name)
        return float(np.sqrt(max(self.covariance[j, j], 0.0)))


def sandwich(system: StackedSystem, sample: FusedSample | None = None) -> SandwichResult:
    """``A^-1 B A^-T / n`` with a central-difference bread.

    ``sample`` is accepted for signature symmetry; the system already closes
    over its data.
    """
    theta = np.asarray(system.theta, dtype=float)
    m = system.fn(theta)
    n, k = m.shape
    if k != len(theta):
        raise ValueError(f"estimating functions have width {k}, parameters {len(theta)}")
    norm = float(np.max(np.abs(m.mean(axis=0))))
    if norm > STACK_TOL:
        log.warning("stacked equations not solved at theta (max |mean| = %.3g)", norm)
    A = numerical_jacobian(lambda t: system.fn(t).mean(axis=0), theta)
    B = m.T @ m / n
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e14:
        raise SingularBreadError("bread matrix is singular")
    A_inv = np.linalg.inv(A)
    cov = A_inv @ B @ A_inv.T / n
    cov = 0.5 * (cov + cov.T)
    se = float(np.sqrt(max(cov[system.target, system.target], 0.0)))
    return SandwichResult(A, B, cov, se, list(system.names), norm)


def wald_ci(delta_hat: float, se: float, level: float = 0.95) -> tuple[float, float]:
    if se < 0 or not 0.0 < level < 1.0:
        raise ValueError("need se >= 0 and 0 < level < 1")
    half = float(ndtri(0.5 * (1.0 + level))) * se
    return delta_hat - half, delta_hat + half


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    B: int
    estimates: np.ndarray
    se_boot: float
    ci: tuple[float, float, float]
    failures: int

    @property
    def reliable(self) -> bool:
        return self.failures / self.B <= MAX_FAILURE_RATE


def _resample_indices(sample: FusedSample, seed: int, b: int, stratified: bool) -> np.ndarray:
    from .sim.dgp import make_rng

    rng = make_rng(seed, b)
    if not stratified:
        return rng.integers(0, sample.n, sample.n)
    prim = np.flatnonzero(sample.r == 1)
    aux = np.flatnonzero(sample.r == 0)
    return np.concatenate([rng.choice(prim, len(prim)), rng.choice(aux, len(aux))])


def _one_replicate(args) -> float:
    recipe, sample, seed, b, stratified = args
    try:
        return float(recipe(sample.take(_resample_indices(sample, seed, b, stratified))))
    except (FusionIVError, np.linalg.LinAlgError, FloatingPointError):
        return float("nan")


def bootstrap(
    sample: FusedSample,
    recipe: Callable[[FusedSample], float],
    B: int = 500,
    seed: int = 0,
    *,
    level: float = 0.95,
    stratified: bool = False,
    workers: int | None = None,
) -> BootstrapResult:
    """Nonparametric bootstrap over fused rows.

    Replicate ``b`` draws its indices from substream ``(seed, b)``, so the
    result does not depend on ``workers``.  A replicate whose refit raises a
    package error counts as a failure.
    """
    if B < 50:
        raise ValueError("B must be at least 50")
    workers = workers or int(os.environ.get("FUSION_IV_THREADS", "1"))
    jobs = [(recipe, sample, seed, b, stratified) for b in range(B)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            est = np.array(list(ex.map(_one_replicate, jobs, chunksize=max(1, B // (4 * workers)))))
    else:
        est = np.array([_one_replicate(j) for j in jobs])
    ok = est[np.isfinite(est)]
    failures = B - len(ok)
    if failures / B > MAX_FAILURE_RATE:
        raise TooManyFailuresError(f"{failures} of {B} bootstrap replicates failed")
    se = float(np.std(ok, ddof=1)) if len(ok) > 1 else 0.0
    alpha = 1.0 - level
    lo, hi = np.quantile(ok, [alpha / 2, 1 - alpha / 2])
    return BootstrapResult(B, est, se, (float(lo), float(hi), level), failures)
