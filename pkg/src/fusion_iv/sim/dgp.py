"""Data-generating process of the simulation study."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr, ndtri

from ..data import FusedSample

U_CLAMP = 1e-12


def make_rng(seed: int, stream: int | None = None) -> np.random.Generator:
    """Counter-based Philox generator; ``stream`` selects an independent substream."""
    entropy = [int(seed)] if stream is None else [int(seed), int(stream)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def sample_truncnorm(mu, sigma, lo, hi, rng: np.random.Generator, size=None) -> np.ndarray:
    """Inverse-CDF draws from N(mu, sigma^2) truncated to [lo, hi]."""
    mu, sigma, lo, hi = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mu, sigma, lo, hi)))
    if np.any(sigma <= 0) or np.any(lo >= hi):
        raise ValueError("need sigma > 0 and lo < hi")
    shape = mu.shape if size is None else size
    u = np.clip(rng.random(shape), U_CLAMP, 1.0 - U_CLAMP)
    a = ndtr((lo - mu) / sigma)
    b = ndtr((hi - mu) / sigma)
    out = mu + sigma * ndtri(a + u * (b - a))
    # Far-tail intervals can lose all CDF resolution; fall back to the bound.
    out = np.where(np.isfinite(out), out, np.where(a >= 0.5, lo, hi))
    return np.clip(out, lo, hi)


@dataclass(frozen=True)
class DgpParams:
    vartheta: tuple[float, ...] = (0.5, -0.5, 0.0)
    psi: tuple[float, ...] = (-1.0, 0.5, 0.5, 0.5)
    xi: tuple[float, ...] = (-1.3, 1.2, 0.5, -0.25, -0.25)
    gamma: tuple[float, ...] = (2.0, 0.5, 0.5, 0.5)
    outcome_slope: float = 1.25
    u_coef: float = 6.0
    noise_sd: float = 1.0
    confounder_load: float = 0.2
    q0: float = 0.7
    # Y observed on the uniform-X population's complement (outcome-invariance variant).
    reversed_fusion: bool = False

    def __post_init__(self) -> None:
        p = len(self.vartheta)
        if len(self.psi) != p + 1 or len(self.xi) != p + 2 or len(self.gamma) != p + 1:
            raise ValueError("parameter dimensions must be p / p+1 / p+2 / p+1")
        if not 0.0 < self.q0 < 1.0:
            raise ValueError("q0 must lie in (0, 1)")

    @property
    def p(self) -> int:
        return len(self.vartheta)

    @property
    def truth(self) -> float:
        """Average effect over the uniform-covariate population: gamma'(1, 0.5, ..., 0.5)."""
        g = np.asarray(self.gamma)
        return float(g[0] + 0.5 * g[1:].sum())

    @property
    def eta_true(self) -> np.ndarray:
        """Coefficients of omega(x) = E(h0 | x) on (1, x)."""
        return np.concatenate([[0.0], self.outcome_slope + self.u_coef * np.asarray(self.vartheta)])


@dataclass(frozen=True, eq=False)
class SimulatedData:
    """A fused sample plus latent columns kept only for diagnostics."""

    sample: FusedSample
    u: np.ndarray
    d_latent: np.ndarray
    y_latent: np.ndarray
    clamped: np.ndarray = field(repr=False)

    @property
    def clamp_rate(self) -> float:
        """Fraction of structural-model rows whose D probability left [0, 1]."""
        has_u = ~np.isnan(self.u)
        return float(self.clamped[has_u].mean()) if has_u.any() else 0.0


def _design_1zx(z, x):
    return np.column_stack([np.ones(len(x)), z, x])


def _draw_structural(params: DgpParams, x: np.ndarray, rng: np.random.Generator):
    """(U, Z, D, Y, clamped) under the full structural model given X."""
    m = len(x)
    vt = np.asarray(params.vartheta)
    mu_u = x @ vt
    u = sample_truncnorm(mu_u, 1.0, mu_u - 1.0, mu_u + 1.0, rng, size=(m,))
    z = (rng.random(m) < expit(np.column_stack([np.ones(m), x]) @ np.asarray(params.psi))).astype(float)
    p_d = expit(_design_1zx(z, x) @ np.asarray(params.xi)) + params.confounder_load * (u - mu_u)
    clamped = (p_d < 0.0) | (p_d > 1.0)
    d = (rng.random(m) < np.clip(p_d, 0.0, 1.0)).astype(float)
    h1 = np.column_stack([np.ones(m), x]) @ np.asarray(params.gamma)
    y = rng.normal(h1 * d + params.outcome_slope * x.sum(axis=1) + params.u_coef * u, params.noise_sd)
    return u, z, d, y, clamped


def _draw_auxiliary(params: DgpParams, x: np.ndarray, rng: np.random.Generator):
    m = len(x)
    z = (rng.random(m) < expit(np.column_stack([np.ones(m), x]) @ np.asarray(params.psi))).astype(float)
    d = (rng.random(m) < expit(_design_1zx(z, x) @ np.asarray(params.xi))).astype(float)
    return z, d


def gen_fused(params: DgpParams, n: int, rng: np.random.Generator) -> SimulatedData:
    """Draw ``n_p ~ Binomial(n, q0)`` Y-rows and ``n - n_p`` D-rows and merge them.

    Default layout: Y-rows come from the uniform-covariate population under
    the full structural model; D-rows from the truncated-normal covariate
    population with a plain logistic treatment law.  With
    ``reversed_fusion`` the D-rows are the uniform-covariate target
    population and the Y-rows come from the truncated-normal population under
    the same structural model, so the outcome mean is shared across sources.
    """
    if n < 10:
        raise ValueError("n must be at least 10")
    p = params.p
    n_p = int(rng.binomial(n, params.q0))
    if n_p == 0 or n_p == n:
        raise ValueError("degenerate binomial draw")
    n_a = n - n_p
    x_unif = rng.random((n_p if not params.reversed_fusion else n_a, p))
    x_tn = sample_truncnorm(0.5, 1.0, 0.0, 1.0, rng, size=((n_a if not params.reversed_fusion else n_p), p))
    nan_a = np.full(n_a, np.nan)
    if not params.reversed_fusion:
        u, z_p, d_p, y_p, cl = _draw_structural(params, x_unif, rng)
        z_a, d_a = _draw_auxiliary(params, x_tn, rng)
        x_p, x_a = x_unif, x_tn
        u_all = np.concatenate([u, nan_a])
        d_lat = np.concatenate([d_p, nan_a])
        clamped = np.concatenate([cl, np.zeros(n_a, bool)])
    else:
        u, z_p, d_lat_p, y_p, cl_p = _draw_structural(params, x_tn, rng)
        u_a, z_a, d_a, _, cl_a = _draw_structural(params, x_unif, rng)
        x_p, x_a = x_tn, x_unif
        u_all = np.concatenate([u, u_a])
        d_lat = np.concatenate([d_lat_p, np.full(n_a, np.nan)])
        clamped = np.concatenate([cl_p, cl_a])
    sample = FusedSample(
        r=np.concatenate([np.ones(n_p, np.int8), np.zeros(n_a, np.int8)]),
        y=np.concatenate([y_p, nan_a]),
        d=np.concatenate([np.full(n_p, np.nan), d_a]),
        z=np.concatenate([z_p, z_a]),
        x=np.vstack([x_p, x_a]),
    )
    return SimulatedData(sample, u_all, d_lat, np.concatenate([y_p, nan_a]), clamped)


def misspecify(sample: FusedSample, rng: np.random.Generator) -> FusedSample:
    """Attach transformed covariates ``(z*, x1*, x2*, x3*)`` to every row.

    ``z* ~ Bernoulli(Phi(-2 + 3z))``, ``x1* = exp(-x1/2) + e1``,
    ``x2* = x2 / (1 + exp(z)) + e2``, ``x3* = (x1 x3)^3 + e3`` with
    standard normal errors.
    """
    if sample.p != 3:
        raise ValueError("the covariate transforms are defined for p = 3")
    n = sample.n
    z = sample.z.astype(float)
    x = sample.x
    z_star = (rng.random(n) < ndtr(-2.0 + 3.0 * z)).astype(float)
    eps = rng.standard_normal((n, 3))
    x_star = np.column_stack(
        [
            np.exp(-0.5 * x[:, 0]),
            x[:, 1] / (1.0 + np.exp(z)),
            (x[:, 0] * x[:, 2]) ** 3,
        ]
    ) + eps
    return sample.with_transformed(z_star, x_star)
