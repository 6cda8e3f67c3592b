from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit

from fusion_iv.data import FusedSample, parse_formula
from fusion_iv.errors import DegenerateSampleError, SingularBreadError, TooManyFailuresError
from fusion_iv.estimators import REQUIRED_NUISANCES, EstimatorKind, StackedSystem, estimate, stacked_system
from fusion_iv.inference import bootstrap, sandwich, wald_ci
from fusion_iv.nuisance import ModelSpec, fit_logistic, fit_nuisances


def _sample(n=500, seed=0):
    rng = np.random.default_rng(seed)
    r = (rng.random(n) < 0.5).astype(int)
    r[:2] = (1, 0)
    return FusedSample(
        r=r,
        y=np.where(r == 1, rng.normal(1.0, 2.0, n), np.nan),
        d=np.where(r == 0, rng.integers(0, 2, n), np.nan),
        z=rng.integers(0, 2, n),
        x=rng.normal(size=(n, 2)),
    )


# picklable recipes for the process pool


def primary_mean(s: FusedSample) -> float:
    return float(np.mean(s.y[s.r == 1]))


def constant(s: FusedSample) -> float:
    return 1.25


def fails_often(s: FusedSample) -> float:
    if s.r.sum() % 2:
        raise DegenerateSampleError("odd")
    return 0.0


# -- sandwich ------------------------------------------------------------------


def test_mean_sandwich_is_sd_over_root_n():
    y = np.random.default_rng(1).normal(size=400)
    sys_ = StackedSystem(np.array([y.mean()]), lambda t: (y - t[0])[:, None], ["mu"], 0)
    res = sandwich(sys_)
    assert res.se == pytest.approx(np.std(y) / np.sqrt(len(y)), rel=1e-9)
    assert res.moment_norm <= 1e-12


def test_ratio_of_means_matches_delta_method():
    rng = np.random.default_rng(2)
    a = rng.normal(2.0, 1.0, 800)
    b = rng.normal(4.0, 1.5, 800)
    ma, mb = a.mean(), b.mean()

    def fn(t):
        return np.column_stack([a - t[0], b - t[1], t[2] * t[1] - t[0] + 0 * a])

    res = sandwich(StackedSystem(np.array([ma, mb, ma / mb]), fn, ["a", "b", "ratio"], 2))
    S = np.cov(np.vstack([a, b]), ddof=0)
    grad = np.array([1 / mb, -ma / mb**2])
    oracle = np.sqrt(grad @ S @ grad / len(a))
    assert res.se == pytest.approx(oracle, rel=1e-6)
    np.testing.assert_allclose(res.covariance, res.covariance.T, atol=0)
    assert res.se_of("ratio") == pytest.approx(res.se)


def test_logistic_sandwich_close_to_inverse_information():
    rng = np.random.default_rng(3)
    n = 5000
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = (rng.random(n) < expit(X @ [0.3, -0.8])).astype(float)
    beta = fit_logistic(X, y).beta

    def fn(t):
        return X * (y - expit(X @ t))[:, None]

    res = sandwich(StackedSystem(beta, fn, ["b0", "b1"], 1))
    p = expit(X @ beta)
    info_inv = np.linalg.inv((X * (p * (1 - p))[:, None]).T @ X)
    assert res.se == pytest.approx(np.sqrt(info_inv[1, 1]), rel=0.10)


def test_singular_bread():
    y = np.arange(10.0)
    sys_ = StackedSystem(np.array([4.5, 4.5]), lambda t: np.column_stack([y - t[0], y - t[0]]), ["a", "b"], 0)
    with pytest.raises(SingularBreadError):
        sandwich(sys_)


def test_width_mismatch():
    y = np.arange(10.0)
    with pytest.raises(ValueError):
        sandwich(StackedSystem(np.array([4.5, 1.0]), lambda t: (y - t[0])[:, None], ["a", "b"], 0))


@pytest.mark.parametrize("kind", ["d1", "d2", "d3", "mul", "mle", "dr2", "tsiv", "ts2sls", "dr"])
def test_stacked_systems_are_solved(sim_sample, kind):
    spec = ModelSpec.from_strings(
        {
            "pi": "1+z+x1+x2+x3+x1^2+x2^2+x3^2",
            "lambda": "1+x1+x2+x3",
            "tau": "1+z+x1+x2+x3",
            "theta": "1+z+x1+x2+x3+z*x1+z*x2+z*x3",
            "h": "1+x1+x2+x3",
            "omega": "1+x1+x2+x3",
        },
        tau_linear=parse_formula("1+z+x1+x2+x3"),
    )
    nz = fit_nuisances(sim_sample, spec, REQUIRED_NUISANCES[EstimatorKind(kind)])
    res = estimate(kind, sim_sample, nz, spec)
    sw = sandwich(stacked_system(kind, sim_sample, nz, res, spec))
    assert sw.moment_norm <= 1e-8
    assert 0 < sw.se < 5
    np.testing.assert_array_equal(sw.covariance, sw.covariance.T)


# -- Wald ------------------------------------------------------------------------


def test_wald_standard_normal():
    lo, hi = wald_ci(0.0, 1.0, 0.95)
    assert hi == pytest.approx(1.959963984540054, abs=1e-12)
    assert lo == -hi


def test_wald_zero_se_and_level():
    assert wald_ci(2.75, 0.0) == (2.75, 2.75)
    lo, hi = wald_ci(1.0, 0.5, 0.90)
    assert hi - 1.0 == pytest.approx(0.5 * 1.6448536269514722, abs=1e-12)


@pytest.mark.parametrize("se, level", [(-1.0, 0.95), (1.0, 1.0), (1.0, 0.0)])
def test_wald_rejects(se, level):
    with pytest.raises(ValueError):
        wald_ci(0.0, se, level)


# -- bootstrap -------------------------------------------------------------------


def test_bootstrap_constant_statistic():
    res = bootstrap(_sample(100), constant, B=50, seed=1)
    assert res.se_boot == 0.0
    assert res.ci[:2] == (1.25, 1.25)
    assert res.failures == 0 and res.reliable


def test_bootstrap_mean_se():
    s = _sample(500, 4)
    res = bootstrap(s, primary_mean, B=500, seed=7)
    yp = s.y[s.r == 1]
    assert res.se_boot == pytest.approx(np.std(yp, ddof=1) / np.sqrt(len(yp)), rel=0.15)


def test_bootstrap_stratified_keeps_group_sizes():
    s = _sample(200, 5)
    res = bootstrap(s, lambda t: float(t.r.sum()), B=50, seed=0, stratified=True)
    assert np.all(res.estimates == s.r.sum())


def test_bootstrap_independent_of_workers():
    s = _sample(300, 6)
    one = bootstrap(s, primary_mean, B=60, seed=11, workers=1)
    two = bootstrap(s, primary_mean, B=60, seed=11, workers=2)
    np.testing.assert_array_equal(one.estimates, two.estimates)


def test_bootstrap_failure_threshold():
    with pytest.raises(TooManyFailuresError):
        bootstrap(_sample(100), fails_often, B=60, seed=0)


def test_bootstrap_minimum_replicates():
    with pytest.raises(ValueError):
        bootstrap(_sample(100), constant, B=10)
