from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusion_iv.errors import AssumptionViolatedError
from fusion_iv.sim.oracle import DiscreteDgp, discrete_oracle, example_dgps

ORTHOGONAL = ("g1_free_of_u", "h1_free_of_u", "sharp_null")


@pytest.fixture(scope="module")
def dgps():
    return example_dgps()


@pytest.mark.parametrize("name", ORTHOGONAL)
def test_identification_holds_under_orthogonality(dgps, name):
    o = discrete_oracle(dgps[name])
    assert o.functional == pytest.approx(o.delta, abs=1e-12)
    assert o.mle_functional == pytest.approx(o.delta, abs=1e-12)
    assert abs(o.mu_eff_mean) <= 1e-12
    assert o.outcome_decomposition_error <= 1e-12
    assert np.max(np.abs(o.cov_g1_h1)) <= 1e-12


@pytest.mark.parametrize("name", sorted(example_dgps()))
def test_discrepancy_equals_covariance_term(dgps, name):
    o = discrete_oracle(dgps[name])
    assert o.discrepancy_direct == pytest.approx(o.discrepancy_cov, abs=1e-12)
    assert o.mle_functional == pytest.approx(o.functional, abs=1e-12)


@pytest.mark.parametrize("name", sorted(example_dgps()))
def test_instrument_moment_identities(dgps, name):
    o = discrete_oracle(dgps[name])
    for key, val in o.moment_zero.items():
        assert abs(val) <= 1e-12, key
    for key, (lhs, rhs) in o.moment_tau.items():
        assert lhs == pytest.approx(rhs, abs=1e-12), key


def test_sharp_null_has_zero_effect(dgps):
    assert discrete_oracle(dgps["sharp_null"]).delta == 0.0


def test_correlated_effects_break_identification(dgps):
    o = discrete_oracle(dgps["correlated"])
    assert abs(o.discrepancy_direct) > 0.1
    assert o.mu_eff_mean == pytest.approx(o.discrepancy_direct, abs=1e-12)
    assert o.outcome_decomposition_error > 0.1


def test_second_moment_positive(dgps):
    for d in dgps.values():
        assert discrete_oracle(d).mu_eff_second_moment > 0


@st.composite
def random_dgp(draw, orthogonal=True):
    nx = draw(st.integers(2, 3))
    nu = draw(st.integers(2, 3))
    unit = st.floats(0.05, 1.0)
    p_xu = np.array([[draw(unit) for _ in range(nu)] for _ in range(nx)])
    p_x0 = np.array([draw(unit) for _ in range(nx)])
    lam1 = [draw(st.floats(0.1, 0.9)) for _ in range(nx)]
    lam0 = [draw(st.floats(0.1, 0.9)) for _ in range(nx)]
    g0 = np.array([[draw(st.floats(0.05, 0.45)) for _ in range(nu)] for _ in range(nx)])
    if orthogonal:
        g1 = np.repeat([[draw(st.floats(0.1, 0.5))] for _ in range(nx)], nu, axis=1)
    else:
        g1 = np.array([[draw(st.floats(0.1, 0.5)) for _ in range(nu)] for _ in range(nx)])
    h0 = np.array([[draw(st.floats(-3, 3)) for _ in range(nu)] for _ in range(nx)])
    h1 = np.array([[draw(st.floats(-3, 3)) for _ in range(nu)] for _ in range(nx)])
    return DiscreteDgp(
        x_values=np.arange(nx, dtype=float),
        u_values=np.arange(nu, dtype=float),
        p_xu=p_xu / p_xu.sum(),
        lam1=lam1,
        p_x0=p_x0 / p_x0.sum(),
        lam0=lam0,
        g0=g0,
        g1=g1,
        h0=h0,
        h1=h1,
        q=draw(st.floats(0.2, 0.8)),
        y_var=draw(st.floats(0.0, 2.0)),
    )


@settings(max_examples=60, deadline=None)
@given(random_dgp())
def test_random_orthogonal_dgps_identify_the_effect(dgp):
    o = discrete_oracle(dgp)
    assert o.functional == pytest.approx(o.delta, abs=1e-9)
    assert o.mle_functional == pytest.approx(o.delta, abs=1e-9)
    assert abs(o.mu_eff_mean) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(random_dgp(orthogonal=False))
def test_random_dgps_discrepancy_identity(dgp):
    o = discrete_oracle(dgp)
    assert o.discrepancy_direct == pytest.approx(o.discrepancy_cov, abs=1e-9)


def _base(**over):
    doc = dict(
        x_values=[0.0, 1.0],
        u_values=[0.0, 1.0],
        p_xu=[[0.25, 0.25], [0.25, 0.25]],
        lam1=[0.5, 0.5],
        p_x0=[0.5, 0.5],
        lam0=[0.5, 0.5],
        g0=[[0.2, 0.2], [0.2, 0.2]],
        g1=[[0.3, 0.3], [0.3, 0.3]],
        h0=[[0.0, 1.0], [0.0, 1.0]],
        h1=[[1.0, 1.0], [1.0, 1.0]],
        q=0.5,
    )
    doc.update(over)
    return doc


def test_base_is_valid():
    assert discrete_oracle(DiscreteDgp(**_base())).delta == pytest.approx(1.0)


@pytest.mark.parametrize(
    "over",
    [
        dict(q=1.0),
        dict(p_xu=[[0.5, 0.5], [0.5, 0.5]]),
        dict(p_xu=[[0.5, 0.5], [0.0, 0.0]]),
        dict(lam1=[0.0, 0.5]),
        dict(lam0=[0.5, 1.0]),
        dict(g1=[[0.9, 0.3], [0.3, 0.3]]),
        dict(g1=[[0.0, 0.0], [0.3, 0.3]]),
        dict(p_x0=[1.0, 0.0]),
        dict(y_var=-1.0),
        dict(h1=[[1.0, 1.0]]),
    ],
)
def test_assumption_violations(over):
    with pytest.raises(AssumptionViolatedError):
        DiscreteDgp(**_base(**over))
