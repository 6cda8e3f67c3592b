from __future__ import annotations

import numpy as np

from fusion_iv.data import FusedSample, parse_formula
from fusion_iv.nuisance import GlmFit


def fixed_logit(formula: str, beta) -> GlmFit:
    """A logistic fit with hand-chosen coefficients."""
    return GlmFit(parse_formula(formula), "logit", np.asarray(beta, dtype=float))


def triple_design(n_points: int, seed: int, p: int = 2):
    """Exact-moment layout used by the (gamma, eta) recovery tests.

    Each covariate point carries one primary row and three auxiliary rows.
    D-values (1,1,0) at z=1 and (1,0,0) at z=0 make tau(z) = 2/3 and 1/3
    exactly, and pi = 1/4 everywhere.
    """
    rng = np.random.default_rng(seed)
    x = rng.random((n_points, p))
    z = rng.integers(0, 2, n_points).astype(float)
    z[:2] = (0.0, 1.0)
    tau = np.where(z == 1, 2 / 3, 1 / 3)
    return x, z, tau


def triple_sample(x, z, y) -> FusedSample:
    n = len(z)
    d_aux = np.where(z[:, None] == 1, [1.0, 1.0, 0.0], [1.0, 0.0, 0.0])
    return FusedSample(
        r=np.concatenate([np.ones(n), np.zeros(3 * n)]),
        y=np.concatenate([y, np.full(3 * n, np.nan)]),
        d=np.concatenate([np.full(n, np.nan), d_aux.ravel()]),
        z=np.concatenate([z, np.repeat(z, 3)]),
        x=np.vstack([x, np.repeat(x, 3, axis=0)]),
    )


TAU_TRIPLE = ("1+z", [np.log(0.5), 2 * np.log(2.0)])
PI_TRIPLE = ("1", [np.log(1 / 3)])


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []
