"""Average-treatment-effect estimators for fused (Y,Z,X) + (D,Z,X) samples.

Every estimating equation here is affine in the effect given the nuisance
fits, so each estimator is computed in closed form.  :func:`stacked_system`
exposes the same equations, stacked with the nuisance scores, for sandwich
variance estimation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .data import FusedSample
from .errors import MissingNuisanceError, SingularSystemError, WeakInstrumentError
from .nuisance import (
    EffectCurveFit,
    GlmFit,
    ModelSpec,
    NuisanceSet,
    clamp_prob,
    effect_weights,
    fit_nuisances,
    lambda_of_z,
    pi_odds,
)

WEAK_TOL = 1e-6


class EstimatorKind(str, enum.Enum):
    MLE = "mle"
    D1 = "d1"
    D2 = "d2"
    D3 = "d3"
    MUL = "mul"
    TSIV = "tsiv"
    TS2SLS = "ts2sls"
    DR = "dr"
    DR2 = "dr2"
    DR3 = "dr3"

    def __str__(self) -> str:
        return self.value


# nuisance fits each estimator consumes (NuisanceSet attribute names)
REQUIRED_NUISANCES: dict[EstimatorKind, tuple[str, ...]] = {
    EstimatorKind.MLE: ("pi", "lam", "tau", "theta"),
    EstimatorKind.D1: ("lam", "tau"),
    EstimatorKind.D2: ("tau", "effect_m2"),
    EstimatorKind.D3: ("pi", "effect_m3"),
    EstimatorKind.MUL: ("lam", "tau", "pi", "effect_dr"),
    EstimatorKind.TSIV: (),
    EstimatorKind.TS2SLS: ("tau_linear",),
    EstimatorKind.DR: ("tau", "pi"),
    EstimatorKind.DR2: ("tau", "pi", "effect_dr"),
    EstimatorKind.DR3: ("tau", "pi", "effect_dr"),
}

# model formulas each estimator needs from a ModelSpec
REQUIRED_FORMULAS: dict[EstimatorKind, tuple[str, ...]] = {
    EstimatorKind.MLE: ("pi", "lambda", "tau", "theta"),
    EstimatorKind.D1: ("lambda", "tau"),
    EstimatorKind.D2: ("tau", "h", "omega"),
    EstimatorKind.D3: ("pi", "h", "omega"),
    EstimatorKind.MUL: ("lambda", "tau", "pi", "h", "omega"),
    EstimatorKind.TSIV: ("omega",),
    EstimatorKind.TS2SLS: ("tau", "omega"),
    EstimatorKind.DR: ("tau", "pi", "omega"),
    EstimatorKind.DR2: ("tau", "pi", "h", "omega"),
    EstimatorKind.DR3: ("tau", "pi", "h", "omega"),
}


@dataclass(eq=False)
class EstimateResult:
    kind: EstimatorKind
    delta_hat: float
    se_sandwich: float | None = None
    se_boot: float | None = None
    ci: tuple[float, float, float] | None = None
    diagnostics: dict[str, float] = field(default_factory=dict)
    nuisances: NuisanceSet | None = field(default=None, repr=False)
    extra: dict[str, object] = field(default_factory=dict, repr=False)


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------


def _sign(sample: FusedSample) -> np.ndarray:
    return np.where(sample.z == 1, 1.0, -1.0)


def _tau_gap(tau: GlmFit, sample: FusedSample, beta=None) -> np.ndarray:
    return tau.mean(sample, z=1.0, beta=beta) - tau.mean(sample, z=0.0, beta=beta)


def _check_weak(gap: np.ndarray, mask: np.ndarray | None, tol: float) -> float:
    vals = np.abs(gap if mask is None else gap[mask])
    margin = float(vals.min())
    if margin < tol:
        raise WeakInstrumentError(f"min |tau(1,x) - tau(0,x)| = {margin:.3g} < {tol:g}")
    return margin


def _diag(margin: float | None = None, pi: GlmFit | None = None, sample: FusedSample | None = None, iterations: int = 0) -> dict:
    out: dict[str, float] = {"solver_iterations": iterations}
    out["min_tau_gap"] = float("nan") if margin is None else margin
    out["pi_clamp_count"] = 0 if pi is None or sample is None else pi.clamp_count(sample)
    return out


def mu_eff_terms(
    sign: np.ndarray,
    r: np.ndarray,
    y0: np.ndarray,
    d0: np.ndarray,
    lam_z: np.ndarray,
    tau_row: np.ndarray,
    tau_gap: np.ndarray,
    odds: np.ndarray,
    h: np.ndarray,
    omega: np.ndarray,
    q: float,
    delta: float,
) -> np.ndarray:
    """Efficient influence function evaluated row-wise from plugged-in pieces."""
    primary = (r / q) * (y0 - h * tau_row - omega)
    auxiliary = ((1 - r) / q) * odds * h * (d0 - tau_row)
    return sign * (primary - auxiliary) / (lam_z * tau_gap) + (r / q) * (h - delta)


def efficient_influence(
    sample: FusedSample,
    nuisances: NuisanceSet,
    delta: float,
    q: float | None = None,
    *,
    weak_tol: float = WEAK_TOL,
) -> np.ndarray:
    """Per-row efficient influence function with the doubly robust effect fit."""
    lam, tau, pi, eff = nuisances.require("lam", "tau", "pi", "effect_dr")
    q = sample.q_hat if q is None else q
    gap = _tau_gap(tau, sample)
    _check_weak(gap, None, weak_tol)
    return mu_eff_terms(
        _sign(sample),
        sample.r,
        sample.y0,
        sample.d0,
        lambda_of_z(lam, sample),
        tau.mean(sample),
        gap,
        pi_odds(pi, sample),
        eff.h(sample),
        eff.omega(sample),
        q,
        delta,
    )


# ---------------------------------------------------------------------------
# closed-form estimators
# ---------------------------------------------------------------------------


def estimate_d1(sample: FusedSample, lam: GlmFit, tau: GlmFit, *, weak_tol: float = WEAK_TOL) -> EstimateResult:
    """Inverse-weighting estimator that needs no outcome model."""
    gap = _tau_gap(tau, sample)
    margin = _check_weak(gap, sample.r == 1, weak_tol)
    terms = (sample.r / sample.q_hat) * _sign(sample) * sample.y0 / (lambda_of_z(lam, sample) * gap)
    return EstimateResult(EstimatorKind.D1, float(terms.mean()), diagnostics=_diag(margin))


def d1_weight_mean(sample: FusedSample, lam: GlmFit, tau: GlmFit) -> float:
    """Empirical mean of the D1 weight ``(R/q) (-1)^(1-Z) / (lambda (tau1 - tau0))``."""
    w = (sample.r / sample.q_hat) * _sign(sample) / (lambda_of_z(lam, sample) * _tau_gap(tau, sample))
    return float(w.mean())


def _primary_mean_h(sample: FusedSample, eff: EffectCurveFit) -> float:
    return float(np.sum(sample.r * eff.h(sample)) / np.sum(sample.r))


def estimate_d2(sample: FusedSample, effect_m2: EffectCurveFit) -> EstimateResult:
    return EstimateResult(
        EstimatorKind.D2, _primary_mean_h(sample, effect_m2), diagnostics=_diag(iterations=effect_m2.iterations)
    )


def estimate_d3(sample: FusedSample, effect_m3: EffectCurveFit) -> EstimateResult:
    return EstimateResult(
        EstimatorKind.D3, _primary_mean_h(sample, effect_m3), diagnostics=_diag(iterations=effect_m3.iterations)
    )


def estimate_dr2(sample: FusedSample, effect_dr: EffectCurveFit) -> EstimateResult:
    return EstimateResult(
        EstimatorKind.DR2, _primary_mean_h(sample, effect_dr), diagnostics=_diag(iterations=effect_dr.iterations)
    )


def estimate_dr3(sample: FusedSample, effect_dr: EffectCurveFit) -> EstimateResult:
    """Mean of H over the D-sample rows (target population holds the D arm)."""
    aux = 1 - sample.r
    val = float(np.sum(aux * effect_dr.h(sample)) / np.sum(aux))
    return EstimateResult(EstimatorKind.DR3, val, diagnostics=_diag(iterations=effect_dr.iterations))


def estimate_mle(
    sample: FusedSample, pi: GlmFit, lam: GlmFit, tau: GlmFit, theta: GlmFit, *, weak_tol: float = WEAK_TOL
) -> EstimateResult:
    """Plug-in estimator averaging over the merged empirical (Z, X) law."""
    gap = _tau_gap(tau, sample)
    margin = _check_weak(gap, None, weak_tol)
    terms = _sign(sample) * pi.mean(sample) * theta.mean(sample) / (lambda_of_z(lam, sample) * gap)
    return EstimateResult(EstimatorKind.MLE, float(terms.mean() / sample.q_hat), diagnostics=_diag(margin, pi, sample))


def estimate_mul(
    sample: FusedSample,
    lam: GlmFit,
    tau: GlmFit,
    pi: GlmFit,
    effect_dr: EffectCurveFit,
    *,
    weak_tol: float = WEAK_TOL,
) -> EstimateResult:
    """Multiply robust estimator: root of the empirical efficient influence function."""
    nuis = NuisanceSet(q_hat=sample.q_hat, lam=lam, tau=tau, pi=pi, effect_dr=effect_dr)
    margin = _check_weak(_tau_gap(tau, sample), sample.r == 1, weak_tol)
    # R/q averages to one when q = mean(R), so the root is the mean at zero.
    delta = float(efficient_influence(sample, nuis, 0.0, weak_tol=weak_tol).mean())
    resid = float(efficient_influence(sample, nuis, delta, weak_tol=weak_tol).mean())
    diag = _diag(margin, pi, sample, effect_dr.iterations)
    diag["residual_mean"] = resid
    return EstimateResult(EstimatorKind.MUL, delta, diagnostics=diag)


def _constant_effect_solve(sample: FusedSample, a1: np.ndarray, C: np.ndarray, W: np.ndarray) -> tuple[float, np.ndarray, float]:
    """Solve ``E{G (R Y - Delta a1 - R C eta)} = 0`` with ``G = (Z, W)``."""
    n = sample.n
    G = np.hstack([sample.z[:, None].astype(float), W])
    M = np.hstack([a1[:, None], C * sample.r[:, None]])
    lhs = G.T @ M / n
    rhs = G.T @ sample.y0 / n
    if not np.all(np.isfinite(lhs)) or np.linalg.cond(lhs) > 1e13:
        raise SingularSystemError("(Delta, eta) system is singular")
    sol = np.linalg.solve(lhs, rhs)
    sol = sol + np.linalg.solve(lhs, rhs - lhs @ sol)
    resid = (sample.y0 - sol[0] * a1 - sample.r * (C @ sol[1:]))
    norm = float(np.max(np.abs(G.T @ resid / n)))
    return float(sol[0]), sol[1:], norm


def _omega_index(sample: FusedSample, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    C = sample.design(spec.formula("omega"), spec.source("omega"))
    if spec.index.w is not None:
        W = np.asarray(spec.index.w(sample.covariates(spec.source("omega"))[1]), dtype=float)
    else:
        W = C
    return C, W


def _tsiv_a1(sample: FusedSample, q: float) -> np.ndarray:
    return (1 - sample.r) * (q / (1 - q)) * sample.d0


def _ts2sls_a1(sample: FusedSample, tau_lin_row: np.ndarray, q: float) -> np.ndarray:
    return sample.r * tau_lin_row + (1 - sample.r) * (q / (1 - q)) * (sample.d0 - tau_lin_row)


def estimate_tsiv(sample: FusedSample, spec: ModelSpec) -> EstimateResult:
    """Two-sample IV: constant effect, sampling score fixed at q."""
    C, W = _omega_index(sample, spec)
    delta, eta, norm = _constant_effect_solve(sample, _tsiv_a1(sample, sample.q_hat), C, W)
    diag = _diag()
    diag["moment_norm"] = norm
    return EstimateResult(EstimatorKind.TSIV, delta, diagnostics=diag, extra={"eta": eta})


def estimate_ts2sls(sample: FusedSample, tau_linear: GlmFit, spec: ModelSpec) -> EstimateResult:
    """Two-sample 2SLS with a least-squares first stage on the D-sample."""
    C, W = _omega_index(sample, spec)
    tau_row = tau_linear.mean(sample)
    gap = _tau_gap(tau_linear, sample)
    margin = float(np.abs(gap[sample.r == 1]).min())
    delta, eta, norm = _constant_effect_solve(sample, _ts2sls_a1(sample, tau_row, sample.q_hat), C, W)
    diag = _diag(margin)
    diag["moment_norm"] = norm
    return EstimateResult(EstimatorKind.TS2SLS, delta, diagnostics=diag, extra={"eta": eta, "xi": tau_linear.beta})


def estimate_dr(sample: FusedSample, tau: GlmFit, pi: GlmFit, spec: ModelSpec, *, weak_tol: float = WEAK_TOL) -> EstimateResult:
    """Doubly robust constant-effect estimator with pi/(1-pi) weights."""
    C, W = _omega_index(sample, spec)
    tau_row = tau.mean(sample)
    margin = float(np.abs(_tau_gap(tau, sample)[sample.r == 1]).min())
    a1 = effect_weights("DR", sample, tau_row, pi_odds(pi, sample))
    delta, eta, norm = _constant_effect_solve(sample, a1, C, W)
    diag = _diag(margin, pi, sample)
    diag["moment_norm"] = norm
    return EstimateResult(EstimatorKind.DR, delta, diagnostics=diag, extra={"eta": eta})


def estimate(
    kind: EstimatorKind | str,
    sample: FusedSample,
    nuisances: NuisanceSet,
    spec: ModelSpec | None = None,
    *,
    weak_tol: float = WEAK_TOL,
) -> EstimateResult:
    """Dispatch to the estimator for ``kind``."""
    kind = EstimatorKind(kind)
    nz = nuisances
    if kind is EstimatorKind.D1:
        res = estimate_d1(sample, *nz.require("lam", "tau"), weak_tol=weak_tol)
    elif kind is EstimatorKind.D2:
        res = estimate_d2(sample, nz.require("effect_m2"))
    elif kind is EstimatorKind.D3:
        res = estimate_d3(sample, nz.require("effect_m3"))
    elif kind is EstimatorKind.DR2:
        res = estimate_dr2(sample, nz.require("effect_dr"))
    elif kind is EstimatorKind.DR3:
        res = estimate_dr3(sample, nz.require("effect_dr"))
    elif kind is EstimatorKind.MLE:
        res = estimate_mle(sample, *nz.require("pi", "lam", "tau", "theta"), weak_tol=weak_tol)
    elif kind is EstimatorKind.MUL:
        res = estimate_mul(sample, *nz.require("lam", "tau", "pi", "effect_dr"), weak_tol=weak_tol)
    else:
        if spec is None:
            raise MissingNuisanceError(f"{kind} needs a ModelSpec for the omega model")
        if kind is EstimatorKind.TSIV:
            res = estimate_tsiv(sample, spec)
        elif kind is EstimatorKind.TS2SLS:
            res = estimate_ts2sls(sample, nz.require("tau_linear"), spec)
        else:
            res = estimate_dr(sample, *nz.require("tau", "pi"), spec, weak_tol=weak_tol)
    res.nuisances = nuisances
    return res


@dataclass(frozen=True)
class Recipe:
    """Picklable estimator recipe: refit every nuisance, return the estimate."""

    kind: EstimatorKind
    spec: ModelSpec
    weak_tol: float = WEAK_TOL

    def __call__(self, sample: FusedSample) -> float:
        nuis = fit_nuisances(sample, self.spec, REQUIRED_NUISANCES[self.kind])
        return estimate(self.kind, sample, nuis, self.spec, weak_tol=self.weak_tol).delta_hat


def make_recipe(kind: EstimatorKind | str, spec: ModelSpec, *, weak_tol: float = WEAK_TOL) -> Recipe:
    return Recipe(EstimatorKind(kind), spec, weak_tol)


# ---------------------------------------------------------------------------
# stacked estimating functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StackedSystem:
    """Parameter vector and per-row estimating functions of matching width.

    ``fn(theta)`` returns an ``(n, k)`` array whose column means vanish at
    the fitted ``theta``.  ``target`` indexes the effect coordinate.
    """

    theta: np.ndarray
    fn: Callable[[np.ndarray], np.ndarray]
    names: list[str]
    target: int


class _Layout:
    def __init__(self) -> None:
        self.blocks: list[tuple[str, np.ndarray]] = []
        self.names: list[str] = []

    def add(self, key: str, values, labels: list[str] | None = None) -> None:
        values = np.atleast_1d(np.asarray(values, dtype=float))
        self.blocks.append((key, values))
        if labels is None:
            labels = [key] if len(values) == 1 else [f"{key}[{j}]" for j in range(len(values))]
        self.names.extend(f"{key}:{lab}" if len(values) > 1 else key for lab in labels)

    def theta(self) -> np.ndarray:
        return np.concatenate([v for _, v in self.blocks])

    def split(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for key, v in self.blocks:
            out[key] = theta[pos : pos + len(v)]
            pos += len(v)
        return out

    def index(self, key: str) -> int:
        pos = 0
        for k, v in self.blocks:
            if k == key:
                return pos
            pos += len(v)
        raise KeyError(key)


def _glm_rows(fit: GlmFit, sample: FusedSample, response: np.ndarray, mask: np.ndarray | None, beta: np.ndarray) -> np.ndarray:
    X = fit.design(sample)
    eta = X @ beta
    mean = expit(eta) if fit.link == "logit" else eta
    resid = response - mean
    if mask is not None:
        resid = resid * mask
    return X * resid[:, None]


def _glm_blocks(nuis: NuisanceSet, sample: FusedSample) -> dict[str, tuple[GlmFit, np.ndarray, np.ndarray | None]]:
    prim = (sample.r == 1).astype(float)
    aux = 1.0 - prim
    table = {
        "pi": (nuis.pi, sample.r.astype(float), None),
        "lam": (nuis.lam, sample.z.astype(float), prim),
        "tau": (nuis.tau, sample.d0, aux),
        "tau_linear": (nuis.tau_linear, sample.d0, aux),
        "theta": (nuis.theta, sample.y0, prim),
    }
    return {k: v for k, v in table.items() if v[0] is not None}


def stacked_system(
    kind: EstimatorKind | str,
    sample: FusedSample,
    nuisances: NuisanceSet,
    result: EstimateResult,
    spec: ModelSpec | None = None,
) -> StackedSystem:
    """Stack ``R - q``, every nuisance score and the effect equation.

    ``result`` supplies the fitted effect (and ``eta`` for constant-effect
    estimators).
    """
    kind = EstimatorKind(kind)
    nz = nuisances
    q_hat = sample.q_hat
    glms = _glm_blocks(nz, sample)
    used = [k for k in REQUIRED_NUISANCES[kind] if k in glms]
    for k in REQUIRED_NUISANCES[kind]:
        if getattr(nz, k) is None:
            raise MissingNuisanceError(f"nuisance {k!r} not fitted")

    lay = _Layout()
    lay.add("q", q_hat)
    for k in used:
        fit = glms[k][0]
        lay.add(k, fit.beta, fit.formula.labels)

    effect_key = {
        EstimatorKind.D2: "effect_m2",
        EstimatorKind.D3: "effect_m3",
        EstimatorKind.MUL: "effect_dr",
        EstimatorKind.DR2: "effect_dr",
        EstimatorKind.DR3: "effect_dr",
    }.get(kind)
    eff: EffectCurveFit | None = getattr(nz, effect_key) if effect_key else None
    if eff is not None:
        lay.add("gamma", eff.gamma, eff.h_formula.labels)
        lay.add("eta", eff.eta, eff.omega_formula.labels)

    constant = kind in (EstimatorKind.TSIV, EstimatorKind.TS2SLS, EstimatorKind.DR)
    if constant:
        if spec is None:
            raise MissingNuisanceError(f"{kind} needs a ModelSpec")
        C, W = _omega_index(sample, spec)
        lay.add("delta", result.delta_hat)
        lay.add("eta", np.asarray(result.extra["eta"]), spec.formula("omega").labels)
    else:
        lay.add("delta", result.delta_hat)

    r = sample.r.astype(float)
    sign = _sign(sample)

    def fn(theta: np.ndarray) -> np.ndarray:
        par = lay.split(theta)
        q = par["q"][0]
        delta = par["delta"][0]
        cols = [(r - q)[:, None]]
        for k in used:
            fit, resp, mask = glms[k]
            cols.append(_glm_rows(fit, sample, resp, mask, par[k]))

        def tau_row(key="tau"):
            return glms[key][0].mean(sample, beta=par[key])

        def tau_gap(key="tau"):
            return _tau_gap(glms[key][0], sample, beta=par[key])

        if eff is not None:
            gamma, eta = par["gamma"], par["eta"]
            if eff.solver == "M2":
                a1 = effect_weights("M2", sample, tau_row(), None)
            elif eff.solver == "M3":
                a1 = effect_weights("M3", sample, None, pi_odds(nz.pi, sample, par["pi"]))
            else:
                a1 = effect_weights("DR", sample, tau_row(), pi_odds(nz.pi, sample, par["pi"]))
            cols.append(eff.moments(sample, a1, gamma, eta))
            h = eff.h(sample, gamma)

        if kind is EstimatorKind.D1:
            lam_z = lambda_of_z(nz.lam, sample, par["lam"])
            cols.append(((r / q) * sign * sample.y0 / (lam_z * tau_gap()) - delta)[:, None])
        elif kind in (EstimatorKind.D2, EstimatorKind.D3, EstimatorKind.DR2):
            cols.append(((r / q) * (h - delta))[:, None])
        elif kind is EstimatorKind.DR3:
            cols.append((((1 - r) / (1 - q)) * (h - delta))[:, None])
        elif kind is EstimatorKind.MUL:
            mu = mu_eff_terms(
                sign,
                r,
                sample.y0,
                sample.d0,
                lambda_of_z(nz.lam, sample, par["lam"]),
                tau_row(),
                tau_gap(),
                pi_odds(nz.pi, sample, par["pi"]),
                h,
                eff.omega(sample, par["eta"]),
                q,
                delta,
            )
            cols.append(mu[:, None])
        elif kind is EstimatorKind.MLE:
            lam_z = lambda_of_z(nz.lam, sample, par["lam"])
            pi_row = clamp_prob(expit(nz.pi.linear_predictor(sample, beta=par["pi"])))
            m_y = nz.theta.linear_predictor(sample, beta=par["theta"])
            cols.append((sign * pi_row * m_y / (q * lam_z * tau_gap()) - delta)[:, None])
        else:
            if kind is EstimatorKind.TSIV:
                a1 = _tsiv_a1(sample, q)
            elif kind is EstimatorKind.TS2SLS:
                a1 = _ts2sls_a1(sample, tau_row("tau_linear"), q)
            else:
                a1 = effect_weights("DR", sample, tau_row(), pi_odds(nz.pi, sample, par["pi"]))
            e = sample.y0 - delta * a1 - r * (C @ par["eta"])
            G = np.hstack([sample.z[:, None].astype(float), W])
            cols.append(G * e[:, None])
        return np.hstack(cols)

    return StackedSystem(lay.theta(), fn, lay.names, lay.index("delta"))
