"""Exact finite-support oracle for the identification identities.

Every quantity is a finite sum over the support of (R, Z, X, U, D); the
outcome enters only through conditional means (and one conditional second
moment for ``E[mu_eff^2]``), so no sampling is involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import AssumptionViolatedError

PROB_TOL = 1e-12


def _arr(a, shape=None) -> np.ndarray:
    out = np.array(a, dtype=float)
    if shape is not None and out.shape != shape:
        raise AssumptionViolatedError(f"expected shape {shape}, got {out.shape}")
    return out


@dataclass(frozen=True, eq=False)
class DiscreteDgp:
    """Finite-support structural model.

    Tables indexed ``[i, j]`` refer to ``(x_values[i], u_values[j])``.
    ``lam1`` and ``lam0`` are pr(Z=1 | X) in the primary and auxiliary
    populations; Z is drawn independently of U given X in the primary one.
    The auxiliary treatment law is pr(D=1 | Z, X, R=0) = tau(Z, X).
    """

    x_values: np.ndarray
    u_values: np.ndarray
    p_xu: np.ndarray
    lam1: np.ndarray
    p_x0: np.ndarray
    lam0: np.ndarray
    g0: np.ndarray
    g1: np.ndarray
    h0: np.ndarray
    h1: np.ndarray
    q: float
    y_var: float = 1.0

    def __post_init__(self) -> None:
        nx, nu = len(self.x_values), len(self.u_values)
        for name in ("p_xu", "g0", "g1", "h0", "h1"):
            object.__setattr__(self, name, _arr(getattr(self, name), (nx, nu)))
        for name in ("lam1", "p_x0", "lam0"):
            object.__setattr__(self, name, _arr(getattr(self, name), (nx,)))
        object.__setattr__(self, "x_values", _arr(self.x_values))
        object.__setattr__(self, "u_values", _arr(self.u_values))
        if not 0.0 < self.q < 1.0:
            raise AssumptionViolatedError("q must lie in (0, 1)")
        for name in ("p_xu", "p_x0"):
            p = getattr(self, name)
            if np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
                raise AssumptionViolatedError(f"{name} is not a probability law")
        if np.any(self.p_xu.sum(axis=1) <= 0):
            raise AssumptionViolatedError("every x needs primary mass")
        for name in ("lam1", "lam0"):
            lam = getattr(self, name)
            if np.any(lam <= 0) or np.any(lam >= 1):
                raise AssumptionViolatedError(f"{name} must lie strictly inside (0, 1)")
        for z in (0, 1):
            pd = self.g0 + self.g1 * z
            if np.any(pd < 0) or np.any(pd > 1):
                raise AssumptionViolatedError("treatment mean leaves [0, 1]")
        if np.any(np.abs(self.tau(1) - self.tau(0)) < PROB_TOL):
            raise AssumptionViolatedError("instrument is irrelevant at some x")
        if np.any(self.p_x0 <= 0):
            raise AssumptionViolatedError("auxiliary support must cover the primary support")
        if self.y_var < 0:
            raise AssumptionViolatedError("y_var must be non-negative")

    @classmethod
    def from_functions(
        cls,
        x_values: Sequence[float],
        u_values: Sequence[float],
        p_xu,
        lam1: Callable[[float], float],
        p_x0,
        lam0: Callable[[float], float],
        g0: Callable[[float, float], float],
        g1: Callable[[float, float], float],
        h0: Callable[[float, float], float],
        h1: Callable[[float, float], float],
        q: float,
        y_var: float = 1.0,
    ) -> DiscreteDgp:
        xs, us = list(x_values), list(u_values)

        def table(f):
            return [[f(x, u) for u in us] for x in xs]

        return cls(
            np.array(xs), np.array(us), p_xu, [lam1(x) for x in xs], p_x0, [lam0(x) for x in xs],
            table(g0), table(g1), table(h0), table(h1), q, y_var,
        )

    # conditional laws in the primary population
    @property
    def p_x1(self) -> np.ndarray:
        return self.p_xu.sum(axis=1)

    @property
    def p_u_given_x(self) -> np.ndarray:
        return self.p_xu / self.p_x1[:, None]

    def lam(self, z: int) -> np.ndarray:
        return self.lam1 if z == 1 else 1.0 - self.lam1

    def tau(self, z: int) -> np.ndarray:
        return (self.p_u_given_x * (self.g0 + self.g1 * z)).sum(axis=1)

    def gap(self) -> np.ndarray:
        return self.tau(1) - self.tau(0)

    def cond_mean(self, f: np.ndarray) -> np.ndarray:
        return (self.p_u_given_x * f).sum(axis=1)

    def cond_cov(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        return self.cond_mean(f * g) - self.cond_mean(f) * self.cond_mean(g)

    def pi(self, z: int) -> np.ndarray:
        """pr(R=1 | Z=z, X=x) by Bayes' rule."""
        lam0 = self.lam0 if z == 1 else 1.0 - self.lam0
        a = self.q * self.p_x1 * self.lam(z)
        b = (1.0 - self.q) * self.p_x0 * lam0
        return a / (a + b)

    def effect_curve(self) -> np.ndarray:
        return self.cond_mean(self.h1)

    def omega(self) -> np.ndarray:
        return self.cond_cov(self.g0, self.h1) + self.cond_mean(self.h0)

    def y_mean(self, z: int) -> np.ndarray:
        """E(Y | Z=z, X=x, R=1) by summing over U and D."""
        pd = self.g0 + self.g1 * z
        return self.cond_mean(self.h0 + self.h1 * pd)

    def y_second_moment(self, z: int) -> np.ndarray:
        pd = self.g0 + self.g1 * z
        return self.cond_mean(pd * (self.h0 + self.h1) ** 2 + (1.0 - pd) * self.h0**2) + self.y_var


@dataclass
class OracleValues:
    delta: float
    functional: float
    mle_functional: float
    discrepancy_direct: float
    discrepancy_cov: float
    mu_eff_mean: float
    mu_eff_second_moment: float
    moment_zero: dict[str, float] = field(default_factory=dict)
    moment_tau: dict[str, tuple[float, float]] = field(default_factory=dict)
    outcome_decomposition_error: float = 0.0
    cov_g1_h1: np.ndarray | None = None


DEFAULT_M: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "1": lambda x: np.ones_like(x),
    "x": lambda x: x,
    "x^2": lambda x: x**2,
}


def discrete_oracle(dgp: DiscreteDgp, m_functions: dict[str, Callable] | None = None) -> OracleValues:
    """Exact population values of the identification identities."""
    m_functions = m_functions or DEFAULT_M
    x = dgp.x_values
    px = dgp.p_x1
    gap = dgp.gap()
    sign = {0: -1.0, 1: 1.0}
    q = dgp.q

    delta = float((dgp.p_xu * dgp.h1).sum())

    # E{(-1)^(1-Z) Y / (lambda(Z|X) gap(X)) | R=1}
    functional = 0.0
    for z in (0, 1):
        functional += float((px * dgp.lam(z) * sign[z] * dgp.y_mean(z) / (dgp.lam(z) * gap)).sum())

    # plug-in form: merged (Z, X) law weighted by pi, divided by q
    mle = 0.0
    for z in (0, 1):
        lam0 = dgp.lam0 if z == 1 else 1.0 - dgp.lam0
        p_zx = q * px * dgp.lam(z) + (1.0 - q) * dgp.p_x0 * lam0
        mle += float((p_zx * sign[z] * dgp.pi(z) * dgp.y_mean(z) / (dgp.lam(z) * gap)).sum()) / q

    cov11 = dgp.cond_cov(dgp.g1, dgp.h1)
    disc_cov = 0.0
    for z in (0, 1):
        disc_cov += float((px * dgp.lam(z) * sign[z] * z * cov11 / (dgp.lam(z) * gap)).sum())

    moment_zero, moment_tau = {}, {}
    for name, m in m_functions.items():
        mx = np.asarray(m(x), dtype=float)
        zero = tau_term = 0.0
        for z in (0, 1):
            w = px * dgp.lam(z) * sign[z] * mx / (dgp.lam(z) * gap)
            zero += float(w.sum())
            tau_term += float((w * dgp.tau(z)).sum())
        moment_zero[name] = zero
        moment_tau[name] = (tau_term, float((px * mx).sum()))

    H, om = dgp.effect_curve(), dgp.omega()
    decomp = max(float(np.max(np.abs(dgp.y_mean(z) - H * dgp.tau(z) - om))) for z in (0, 1))

    # efficient influence function, enumerated over the observed-data law
    mean = second = 0.0
    for z in (0, 1):
        lz, tz = dgp.lam(z), dgp.tau(z)
        denom = lz * gap
        # R = 1: mu = a * Y + b
        a = sign[z] / (q * denom)
        b = -sign[z] * (H * tz + om) / (q * denom) + (H - delta) / q
        w1 = q * px * lz
        my, my2 = dgp.y_mean(z), dgp.y_second_moment(z)
        mean += float((w1 * (a * my + b)).sum())
        second += float((w1 * (a * a * my2 + 2 * a * b * my + b * b)).sum())
        # R = 0: D ~ Bernoulli(tau)
        lam0 = dgp.lam0 if z == 1 else 1.0 - dgp.lam0
        w0 = (1.0 - q) * dgp.p_x0 * lam0
        pz = dgp.pi(z)
        odds = pz / (1.0 - pz)
        for d, pd in ((1.0, tz), (0.0, 1.0 - tz)):
            mu = -sign[z] * odds * H * (d - tz) / (q * denom)
            mean += float((w0 * pd * mu).sum())
            second += float((w0 * pd * mu * mu).sum())

    return OracleValues(
        delta=delta,
        functional=functional,
        mle_functional=mle,
        discrepancy_direct=functional - delta,
        discrepancy_cov=disc_cov,
        mu_eff_mean=mean,
        mu_eff_second_moment=second,
        moment_zero=moment_zero,
        moment_tau=moment_tau,
        outcome_decomposition_error=decomp,
        cov_g1_h1=cov11,
    )


def example_dgps() -> dict[str, DiscreteDgp]:
    """Hand-built instances: orthogonal, sharp null, and correlated effects."""
    xs = [0.0, 1.0, 2.0]
    us = [-1.0, 0.0, 1.0]
    p_xu = np.array([[0.05, 0.10, 0.05], [0.10, 0.15, 0.10], [0.15, 0.20, 0.10]])
    p_x0 = [0.2, 0.5, 0.3]

    def lam1(x):
        return 0.3 + 0.15 * x

    def lam0(x):
        return 0.55 - 0.1 * x

    base = dict(x_values=xs, u_values=us, p_xu=p_xu, lam1=lam1, p_x0=p_x0, lam0=lam0, q=0.6, y_var=0.5)
    out = {
        # g1 free of U: orthogonality holds while h1 varies with U
        "g1_free_of_u": DiscreteDgp.from_functions(
            **base,
            g0=lambda x, u: 0.2 + 0.05 * x + 0.1 * u,
            g1=lambda x, u: 0.3 + 0.05 * x,
            h0=lambda x, u: 1.0 + x + 2.0 * u,
            h1=lambda x, u: 2.0 + 0.5 * x + 1.5 * u,
        ),
        # h1 free of U, g1 varies with U
        "h1_free_of_u": DiscreteDgp.from_functions(
            **base,
            g0=lambda x, u: 0.25 + 0.1 * u,
            g1=lambda x, u: 0.35 + 0.1 * u + 0.05 * x,
            h0=lambda x, u: -0.5 + 0.3 * x * x + u,
            h1=lambda x, u: 1.0 - 0.4 * x,
        ),
        "sharp_null": DiscreteDgp.from_functions(
            **base,
            g0=lambda x, u: 0.3 + 0.1 * u,
            g1=lambda x, u: 0.25 + 0.1 * u,
            h0=lambda x, u: 2.0 * u + x,
            h1=lambda x, u: 0.0,
        ),
        # both effects vary with U in the same direction
        "correlated": DiscreteDgp.from_functions(
            **base,
            g0=lambda x, u: 0.2 + 0.05 * u,
            g1=lambda x, u: 0.35 + 0.15 * u,
            h0=lambda x, u: 1.0 + u,
            h1=lambda x, u: 1.0 + 0.5 * x + 2.0 * u,
        ),
    }
    return out
