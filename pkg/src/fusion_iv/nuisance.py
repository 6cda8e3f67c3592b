"""Working-model fits consumed by the estimators.

Logistic models for the sampling score pi(z, x), the instrument density
lambda(z | x) and the treatment propensity tau(z, x) are fitted by IRLS.
The outcome mean and the linear-probability first stage are least-squares
fits.  The effect curve H(x; gamma) and the remainder omega(x; eta) are
fitted jointly from one of three estimating-equation systems (``M2``, ``M3``
and the doubly robust ``DR`` system).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal

import numpy as np
from scipy.special import expit

from .data import COVARIATE_SOURCES, CovariateSource, DesignMatrix, Formula, FusedSample, parse_formula
from .errors import (
    ConfigError,
    MissingNuisanceError,
    NotConvergedError,
    SeparationError,
    SingularDesignError,
    SingularInformationError,
    SingularSystemError,
)

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
SCORE_TOL = 1e-8
MAX_IRLS_ITER = 100
SEPARATION_BOUND = 1e3
MOMENT_TOL = 1e-10
MAX_NEWTON_ITER = 200

Link = Literal["logit", "identity"]
HLink = Literal["identity", "tanh"]
Solver = Literal["M2", "M3", "DR"]


def clamp_prob(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


# ---------------------------------------------------------------------------
# GLM fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GlmFit:
    formula: Formula
    link: Link
    beta: np.ndarray
    source: CovariateSource = "observed"
    converged: bool = True
    iterations: int = 0
    score_norm: float = 0.0

    def design(self, sample: FusedSample, z: float | None = None) -> np.ndarray:
        return sample.design(self.formula, self.source, z)

    def linear_predictor(self, sample: FusedSample, z: float | None = None, beta: np.ndarray | None = None) -> np.ndarray:
        return self.design(sample, z) @ (self.beta if beta is None else beta)

    def mean(self, sample: FusedSample, z: float | None = None, beta: np.ndarray | None = None) -> np.ndarray:
        """Fitted mean; logistic predictions are clamped into [1e-12, 1-1e-12]."""
        eta = self.linear_predictor(sample, z, beta)
        if self.link == "logit":
            return clamp_prob(expit(eta))
        return eta

    def clamp_count(self, sample: FusedSample, z: float | None = None) -> int:
        if self.link != "logit":
            return 0
        p = expit(self.linear_predictor(sample, z))
        return int(np.sum((p < PROB_CLAMP) | (p > 1.0 - PROB_CLAMP)))


def _as_values(design: DesignMatrix | np.ndarray) -> np.ndarray:
    return design.values if isinstance(design, DesignMatrix) else np.asarray(design, dtype=float)


def _loglik(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _finish(X: np.ndarray, y: np.ndarray, beta: np.ndarray, it: int, norm: float) -> tuple[np.ndarray, int, float]:
    """Reject complete separation and take one polishing Newton step."""
    eta = X @ beta
    if np.all(np.where(y == 1.0, eta > 0, eta < 0)):
        # a hyperplane classifying every row means the MLE does not exist
        raise SeparationError("response is linearly separable on the fitting subset")
    p = expit(eta)
    w = p * (1.0 - p)
    try:
        cand = beta + np.linalg.solve((X * w[:, None]).T @ X, X.T @ (y - p))
    except np.linalg.LinAlgError:
        return beta, it, norm
    n_c = float(np.max(np.abs(X.T @ (y - expit(X @ cand))))) / len(y)
    if np.all(np.isfinite(cand)) and n_c <= norm:
        return cand, it + 1, n_c
    return beta, it, norm


def irls(X: np.ndarray, y: np.ndarray, tol: float = SCORE_TOL, max_iter: int = MAX_IRLS_ITER) -> tuple[np.ndarray, int, float]:
    """Newton-Raphson for the logistic likelihood with step halving.

    Returns ``(beta, iterations, score max-norm)``; the score is the
    per-row mean ``X'(y - expit(X beta)) / m``.
    """
    m, k = X.shape
    if np.all(y == y[0]):
        raise SeparationError("response is constant on the fitting subset")
    if np.linalg.matrix_rank(X) < k:
        raise SingularInformationError("design is rank deficient on the fitting subset")
    beta = np.zeros(k)
    ll = _loglik(X, y, beta)
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        score = X.T @ (y - p)
        norm = float(np.max(np.abs(score))) / m
        if norm <= tol:
            return _finish(X, y, beta, it - 1, norm)
        info = (X * (p * (1.0 - p))[:, None]).T @ X
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SingularInformationError("information matrix is singular") from None
        if not np.all(np.isfinite(step)):
            raise SingularInformationError("information matrix is singular")
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            ll_c = _loglik(X, y, cand)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, ll = cand, ll_c
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise SeparationError(f"coefficients diverged (|beta| > {SEPARATION_BOUND:g})")
    p = expit(X @ beta)
    norm = float(np.max(np.abs(X.T @ (y - p)))) / m
    if norm <= tol:
        return _finish(X, y, beta, max_iter, norm)
    raise NotConvergedError(f"IRLS did not converge in {max_iter} iterations (score {norm:.3g})")


def fit_logistic(
    design: DesignMatrix | np.ndarray,
    response: np.ndarray,
    subset: np.ndarray | None = None,
    *,
    formula: Formula | None = None,
    source: CovariateSource = "observed",
) -> GlmFit:
    X = _as_values(design)
    y = np.asarray(response, dtype=float)
    mask = np.ones(len(y), bool) if subset is None else np.asarray(subset, bool)
    if not mask.any():
        raise SingularInformationError("empty fitting subset")
    beta, it, norm = irls(X[mask], y[mask])
    if formula is None:
        formula = _placeholder_formula(X.shape[1])
    return GlmFit(formula, "logit", beta, source, True, it, norm)


def fit_linear(
    design: DesignMatrix | np.ndarray,
    response: np.ndarray,
    subset: np.ndarray | None = None,
    *,
    formula: Formula | None = None,
    source: CovariateSource = "observed",
) -> GlmFit:
    X = _as_values(design)
    y = np.asarray(response, dtype=float)
    mask = np.ones(len(y), bool) if subset is None else np.asarray(subset, bool)
    Xs, ys = X[mask], y[mask]
    if Xs.shape[0] == 0 or np.linalg.matrix_rank(Xs) < Xs.shape[1]:
        raise SingularDesignError("least-squares design is rank deficient")
    beta = np.linalg.lstsq(Xs, ys, rcond=None)[0]
    norm = float(np.max(np.abs(Xs.T @ (ys - Xs @ beta)))) / len(ys)
    if formula is None:
        formula = _placeholder_formula(X.shape[1])
    return GlmFit(formula, "identity", beta, source, True, 1, norm)


def _placeholder_formula(k: int) -> Formula:
    # Stand-in when a raw matrix is fitted: columns labelled x1..xk.
    return Formula(tuple(((j, 1),) for j in range(1, k + 1)))


def fit_lambda(sample: FusedSample, formula: Formula, source: CovariateSource = "observed") -> GlmFit:
    """pr(Z=1 | X, R=1) from primary rows; ``lambda(0|x) = 1 - lambda(1|x)``."""
    if formula.has_z:
        raise ConfigError("lambda formula cannot contain z")
    return fit_logistic(sample.design(formula, source), sample.z, sample.r == 1, formula=formula, source=source)


def fit_tau(sample: FusedSample, formula: Formula, source: CovariateSource = "observed") -> GlmFit:
    """pr(D=1 | Z, X) from auxiliary rows."""
    return fit_logistic(sample.design(formula, source), sample.d0, sample.r == 0, formula=formula, source=source)


def fit_tau_linear(sample: FusedSample, formula: Formula, source: CovariateSource = "observed") -> GlmFit:
    """Linear-probability first stage of D on the auxiliary rows."""
    return fit_linear(sample.design(formula, source), sample.d0, sample.r == 0, formula=formula, source=source)


def fit_pi(sample: FusedSample, formula: Formula, source: CovariateSource = "observed") -> GlmFit:
    """pr(R=1 | Z, X) on all rows."""
    return fit_logistic(sample.design(formula, source), sample.r, None, formula=formula, source=source)


def fit_theta(sample: FusedSample, formula: Formula, source: CovariateSource = "observed") -> GlmFit:
    """Outcome mean E(Y | Z, X, R=1) by least squares on primary rows."""
    return fit_linear(sample.design(formula, source), sample.y0, sample.r == 1, formula=formula, source=source)


def lambda_of_z(lam: GlmFit, sample: FusedSample, beta: np.ndarray | None = None) -> np.ndarray:
    """lambda(Z_i | X_i) at each row's observed instrument."""
    p1 = lam.mean(sample, beta=beta)
    return np.where(sample.z == 1, p1, 1.0 - p1)


# ---------------------------------------------------------------------------
# effect curve (gamma, eta)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexFunctions:
    """Analyst-chosen index functions; ``None`` means the model gradient.

    ``v`` receives the covariates of the H model source and ``w`` those of
    the omega model source, each an ``(n, p)`` array, and returns an
    ``(n, dim)`` array.
    """

    v: Callable[[np.ndarray], np.ndarray] | None = None
    w: Callable[[np.ndarray], np.ndarray] | None = None


DEFAULT_INDEX = IndexFunctions()


@dataclass(frozen=True, eq=False)
class EffectCurveFit:
    h_formula: Formula
    omega_formula: Formula
    link: HLink
    gamma: np.ndarray
    eta: np.ndarray
    solver: Solver
    h_source: CovariateSource = "observed"
    omega_source: CovariateSource = "observed"
    index: IndexFunctions = DEFAULT_INDEX
    converged: bool = True
    iterations: int = 0
    moment_norm: float = 0.0

    def __post_init__(self) -> None:
        if self.h_formula.has_z or self.omega_formula.has_z:
            raise ConfigError("H and omega formulas cannot contain z")

    @property
    def n_params(self) -> int:
        return len(self.h_formula) + len(self.omega_formula)

    def h_design(self, sample: FusedSample) -> np.ndarray:
        return sample.design(self.h_formula, self.h_source)

    def omega_design(self, sample: FusedSample) -> np.ndarray:
        return sample.design(self.omega_formula, self.omega_source)

    def h(self, sample: FusedSample, gamma: np.ndarray | None = None) -> np.ndarray:
        lin = self.h_design(sample) @ (self.gamma if gamma is None else gamma)
        return np.tanh(lin) if self.link == "tanh" else lin

    def omega(self, sample: FusedSample, eta: np.ndarray | None = None) -> np.ndarray:
        return self.omega_design(sample) @ (self.eta if eta is None else eta)

    def moments(self, sample: FusedSample, a1: np.ndarray, gamma: np.ndarray | None = None, eta: np.ndarray | None = None) -> np.ndarray:
        """Per-row ``G(X, Z) * e`` with ``e = R*Y - H*a1 - R*omega``."""
        gamma = self.gamma if gamma is None else gamma
        eta = self.eta if eta is None else eta
        return _effect_row_moments(sample, self, gamma, eta, a1)


def _index_matrices(sample: FusedSample, fit: EffectCurveFit, gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    B = fit.h_design(sample)
    C = fit.omega_design(sample)
    if fit.index.v is not None:
        v = np.asarray(fit.index.v(sample.covariates(fit.h_source)[1]), dtype=float)
    elif fit.link == "tanh":
        v = B * (1.0 - np.tanh(B @ gamma) ** 2)[:, None]
    else:
        v = B
    w = C if fit.index.w is None else np.asarray(fit.index.w(sample.covariates(fit.omega_source)[1]), dtype=float)
    if v.shape != (sample.n, B.shape[1]) or w.shape != (sample.n, C.shape[1]):
        raise ConfigError("index functions must match dim(gamma) and dim(eta)")
    return v * sample.z[:, None], w


def _effect_row_moments(sample: FusedSample, fit: EffectCurveFit, gamma: np.ndarray, eta: np.ndarray, a1: np.ndarray) -> np.ndarray:
    vz, w = _index_matrices(sample, fit, gamma)
    e = sample.y0 - fit.h(sample, gamma) * a1 - sample.r * fit.omega(sample, eta)
    return np.hstack([vz, w]) * e[:, None]


def effect_weights(solver: Solver, sample: FusedSample, tau_row: np.ndarray | None, odds: np.ndarray | None) -> np.ndarray:
    """Coefficient ``a1`` multiplying H in the residual of each system.

    M2: ``R*tau + (1-R)*(D - tau)``; DR: ``R*tau + (1-R)*odds*(D - tau)``;
    M3: ``(1-R)*odds*D``, where ``odds = pi / (1 - pi)``.
    """
    r = sample.r
    if solver == "M2":
        return r * tau_row + (1 - r) * (sample.d0 - tau_row)
    if solver == "DR":
        return r * tau_row + (1 - r) * odds * (sample.d0 - tau_row)
    if solver == "M3":
        return (1 - r) * odds * sample.d0
    raise ValueError(f"unknown solver {solver!r}")


def pi_odds(pi: GlmFit, sample: FusedSample, beta: np.ndarray | None = None) -> np.ndarray:
    p = pi.mean(sample, beta=beta)
    return p / (1.0 - p)


def _solve_effect(
    sample: FusedSample,
    template: EffectCurveFit,
    a1: np.ndarray,
) -> EffectCurveFit:
    B = template.h_design(sample)
    C = template.omega_design(sample)
    kg, ke = B.shape[1], C.shape[1]
    n = sample.n
    if template.link == "identity":
        vz, w = _index_matrices(sample, template, np.zeros(kg))
        G = np.hstack([vz, w])
        M = np.hstack([B * a1[:, None], C * sample.r[:, None]])
        lhs = G.T @ M / n
        rhs = G.T @ sample.y0 / n
        if not np.all(np.isfinite(lhs)) or np.linalg.cond(lhs) > 1e13:
            raise SingularSystemError(f"{template.solver} system is singular")
        sol = np.linalg.solve(lhs, rhs)
        # One refinement pass pushes the moment residual to rounding level.
        sol = sol + np.linalg.solve(lhs, rhs - lhs @ sol)
        gamma, eta = sol[:kg], sol[kg:]
        norm = float(np.max(np.abs(_effect_row_moments(sample, template, gamma, eta, a1).mean(axis=0))))
        return _with_solution(template, gamma, eta, True, 1, norm)

    # tanh link: damped Newton with a central-difference Jacobian
    def mean_moments(theta: np.ndarray) -> np.ndarray:
        return _effect_row_moments(sample, template, theta[:kg], theta[kg:], a1).mean(axis=0)

    prim = sample.r == 1
    eta0 = np.linalg.lstsq(C[prim], sample.y0[prim], rcond=None)[0]
    theta = np.concatenate([np.zeros(kg), eta0])
    g = mean_moments(theta)
    norm = float(np.max(np.abs(g)))
    for it in range(1, MAX_NEWTON_ITER + 1):
        if norm <= MOMENT_TOL:
            return _with_solution(template, theta[:kg], theta[kg:], True, it - 1, norm)
        J = numerical_jacobian(mean_moments, theta)
        try:
            step = np.linalg.solve(J, -g)
        except np.linalg.LinAlgError:
            raise SingularSystemError(f"{template.solver} Jacobian is singular") from None
        t = 1.0
        for _ in range(50):
            cand = theta + t * step
            g_c = mean_moments(cand)
            if np.all(np.isfinite(g_c)) and np.linalg.norm(g_c) < np.linalg.norm(g) * (1 - 1e-4 * t) or t < 1e-10:
                break
            t *= 0.5
        theta, g = cand, g_c
        norm = float(np.max(np.abs(g)))
    if norm <= MOMENT_TOL:
        return _with_solution(template, theta[:kg], theta[kg:], True, MAX_NEWTON_ITER, norm)
    raise NotConvergedError(f"{template.solver} Newton did not converge (moment norm {norm:.3g})")


def _with_solution(template: EffectCurveFit, gamma, eta, converged, iterations, norm) -> EffectCurveFit:
    return EffectCurveFit(
        template.h_formula,
        template.omega_formula,
        template.link,
        np.asarray(gamma, float),
        np.asarray(eta, float),
        template.solver,
        template.h_source,
        template.omega_source,
        template.index,
        converged,
        iterations,
        norm,
    )


def numerical_jacobian(fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences with step ``rel_step * max(1, |theta_j|)``."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(len(theta)):
        h = rel_step * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h
        tm[j] -= h
        cols.append((fn(tp) - fn(tm)) / (2.0 * h))
    return np.column_stack(cols)


def _template(h_formula, omega_formula, link, solver, h_source, omega_source, index) -> EffectCurveFit:
    return EffectCurveFit(
        h_formula,
        omega_formula,
        link,
        np.zeros(len(h_formula)),
        np.zeros(len(omega_formula)),
        solver,
        h_source,
        omega_source,
        index or DEFAULT_INDEX,
    )


def fit_effect_m2(
    sample: FusedSample,
    h_formula: Formula,
    omega_formula: Formula,
    tau: GlmFit,
    index: IndexFunctions | None = None,
    *,
    link: HLink = "identity",
    h_source: CovariateSource = "observed",
    omega_source: CovariateSource = "observed",
) -> EffectCurveFit:
    tmpl = _template(h_formula, omega_formula, link, "M2", h_source, omega_source, index)
    return _solve_effect(sample, tmpl, effect_weights("M2", sample, tau.mean(sample), None))


def fit_effect_m3(
    sample: FusedSample,
    h_formula: Formula,
    omega_formula: Formula,
    pi: GlmFit,
    index: IndexFunctions | None = None,
    *,
    link: HLink = "identity",
    h_source: CovariateSource = "observed",
    omega_source: CovariateSource = "observed",
) -> EffectCurveFit:
    tmpl = _template(h_formula, omega_formula, link, "M3", h_source, omega_source, index)
    return _solve_effect(sample, tmpl, effect_weights("M3", sample, None, pi_odds(pi, sample)))


def fit_effect_dr(
    sample: FusedSample,
    h_formula: Formula,
    omega_formula: Formula,
    tau: GlmFit,
    pi: GlmFit,
    index: IndexFunctions | None = None,
    *,
    link: HLink = "identity",
    h_source: CovariateSource = "observed",
    omega_source: CovariateSource = "observed",
) -> EffectCurveFit:
    tmpl = _template(h_formula, omega_formula, link, "DR", h_source, omega_source, index)
    return _solve_effect(sample, tmpl, effect_weights("DR", sample, tau.mean(sample), pi_odds(pi, sample)))


def predict(fit: GlmFit | EffectCurveFit, component: str, sample: FusedSample) -> np.ndarray:
    """Row-wise prediction of one nuisance component.

    ``component`` is one of ``pi``, ``lambda1``, ``tau``, ``theta_mean``,
    ``H`` or ``omega``.
    """
    if component in ("H", "omega"):
        if not isinstance(fit, EffectCurveFit):
            raise TypeError(f"{component} needs an EffectCurveFit")
        return fit.h(sample) if component == "H" else fit.omega(sample)
    if component not in ("pi", "lambda1", "tau", "theta_mean"):
        raise ValueError(f"unknown component {component!r}")
    if not isinstance(fit, GlmFit):
        raise TypeError(f"{component} needs a GlmFit")
    return fit.mean(sample)


# ---------------------------------------------------------------------------
# model specification and the full nuisance inventory
# ---------------------------------------------------------------------------

COMPONENTS = ("pi", "lambda", "tau", "theta", "h", "omega")


@dataclass(frozen=True)
class ModelSpec:
    """Formulas, covariate sources and H link for every working model."""

    formulas: dict[str, Formula]
    sources: dict[str, CovariateSource] = field(default_factory=dict)
    h_link: HLink = "identity"
    tau_linear: Formula | None = None
    index: IndexFunctions = DEFAULT_INDEX

    def __post_init__(self) -> None:
        for key in self.formulas:
            if key not in COMPONENTS:
                raise ConfigError(f"unknown model component {key!r}")
        for key, src in self.sources.items():
            if key not in COMPONENTS or src not in COVARIATE_SOURCES:
                raise ConfigError(f"bad source {key}={src!r}")
        if self.h_link not in ("identity", "tanh"):
            raise ConfigError(f"bad H link {self.h_link!r}")

    @classmethod
    def from_strings(cls, formulas: dict[str, str], sources: dict[str, str] | None = None, **kw) -> ModelSpec:
        return cls({k: parse_formula(v) for k, v in formulas.items() if v}, dict(sources or {}), **kw)

    def formula(self, component: str) -> Formula:
        f = self.formulas.get(component)
        if f is None:
            raise MissingNuisanceError(f"no formula for {component!r}")
        return f

    def source(self, component: str) -> CovariateSource:
        return self.sources.get(component, "observed")

    def first_stage(self) -> Formula:
        """Formula of the linear first stage; defaults to the tau formula."""
        return self.tau_linear if self.tau_linear is not None else self.formula("tau")


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    q_hat: float
    pi: GlmFit | None = None
    lam: GlmFit | None = None
    tau: GlmFit | None = None
    tau_linear: GlmFit | None = None
    theta: GlmFit | None = None
    effect_m2: EffectCurveFit | None = None
    effect_m3: EffectCurveFit | None = None
    effect_dr: EffectCurveFit | None = None

    def require(self, *names: str):
        out = []
        for name in names:
            val = getattr(self, name)
            if val is None:
                raise MissingNuisanceError(f"nuisance {name!r} not fitted")
            out.append(val)
        return out[0] if len(out) == 1 else out


def fit_nuisances(sample: FusedSample, spec: ModelSpec, needed: Iterable[str]) -> NuisanceSet:
    """Fit exactly the nuisance components named in ``needed``."""
    needed = set(needed)
    fits: dict[str, object] = {}

    def get(name: str):
        if name in fits:
            return fits[name]
        if name == "pi":
            val = fit_pi(sample, spec.formula("pi"), spec.source("pi"))
        elif name == "lam":
            val = fit_lambda(sample, spec.formula("lambda"), spec.source("lambda"))
        elif name == "tau":
            val = fit_tau(sample, spec.formula("tau"), spec.source("tau"))
        elif name == "tau_linear":
            val = fit_tau_linear(sample, spec.first_stage(), spec.source("tau"))
        elif name == "theta":
            val = fit_theta(sample, spec.formula("theta"), spec.source("theta"))
        elif name in ("effect_m2", "effect_m3", "effect_dr"):
            common = dict(
                link=spec.h_link,
                h_source=spec.source("h"),
                omega_source=spec.source("omega"),
            )
            hf, of = spec.formula("h"), spec.formula("omega")
            if name == "effect_m2":
                val = fit_effect_m2(sample, hf, of, get("tau"), spec.index, **common)
            elif name == "effect_m3":
                val = fit_effect_m3(sample, hf, of, get("pi"), spec.index, **common)
            else:
                val = fit_effect_dr(sample, hf, of, get("tau"), get("pi"), spec.index, **common)
        else:
            raise ValueError(f"unknown nuisance {name!r}")
        fits[name] = val
        return val

    for name in sorted(needed):
        get(name)
    return NuisanceSet(q_hat=sample.q_hat, **fits)
