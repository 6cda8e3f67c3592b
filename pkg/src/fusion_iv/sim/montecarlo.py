"""Monte Carlo driver: scenarios, replicate loop, summary metrics and tables."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from ..errors import ConfigError, FusionIVError, TooManyFailuresError
from ..estimators import REQUIRED_NUISANCES, EstimatorKind, estimate, stacked_system
from ..inference import sandwich, wald_ci
from ..nuisance import ModelSpec, fit_nuisances
from .dgp import DgpParams, gen_fused, make_rng, misspecify

log = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.10
MODELS = ("lambda", "tau", "pi", "h", "omega")

DEFAULT_FORMULAS = {
    "pi": "1+z+x1+x2+x3+x1^2+x2^2+x3^2",
    "lambda": "1+x1+x2+x3",
    "tau": "1+z+x1+x2+x3",
    "theta": "1+z+x1+x2+x3+z*x1+z*x2+z*x3",
    "h": "1+x1+x2+x3",
    "omega": "1+x1+x2+x3",
}

# models that read the transformed covariates in each scenario
_TRANSFORMED = {
    "M0": (),
    "M1": ("pi", "h", "omega"),
    "M2": ("lambda", "pi"),
    "M3": ("lambda", "tau"),
    "M4": MODELS,
}


@dataclass(frozen=True)
class ScenarioConfig:
    id: str
    sources: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.id not in _TRANSFORMED:
            raise ConfigError(f"unknown scenario {self.id!r}")
        expected = {m: ("transformed" if m in _TRANSFORMED[self.id] else "observed") for m in MODELS}
        if self.sources and dict(self.sources) != expected:
            raise ConfigError(f"sources do not match scenario {self.id}")
        object.__setattr__(self, "sources", expected)

    @classmethod
    def from_id(cls, scenario_id: str) -> ScenarioConfig:
        return cls(scenario_id)

    def model_spec(self, formulas: dict[str, str] | None = None, h_link: str = "identity") -> ModelSpec:
        """Working models for this scenario; theta shares the omega source."""
        sources = dict(self.sources)
        sources["theta"] = sources["omega"]
        return ModelSpec.from_strings(formulas or DEFAULT_FORMULAS, sources, h_link=h_link)


SCENARIO_IDS = tuple(_TRANSFORMED)


class Metrics(NamedTuple):
    abs_bias: float
    sd: float
    mse: float
    rmse: float
    bias: float


def metrics(estimates: Sequence[float], truth: float) -> Metrics:
    """Bias, sample SD, and MSE with the population-normalized variance."""
    est = np.asarray(estimates, dtype=float)
    if est.size < 2:
        raise ValueError("need at least two estimates")
    bias = float(est.mean() - truth)
    sd = float(est.std(ddof=1))
    mse = bias**2 + float(est.var(ddof=0))
    return Metrics(abs(bias), sd, mse, math.sqrt(mse), bias)


@dataclass
class EstimatorSummary:
    kind: str
    bias: float
    abs_bias: float
    sd: float
    mse: float
    rmse: float
    mean_se: float | None
    coverage: float | None
    successes: int
    failures: int


@dataclass
class MonteCarloReport:
    scenario: str
    n: int
    reps: int
    seed: int
    truth: float
    summaries: dict[str, EstimatorSummary]
    estimates: dict[str, list[float]]
    ses: dict[str, list[float]] | None = None
    clamp_rate: float = 0.0
    reversed_fusion: bool = False

    def to_dict(self) -> dict:
        out = asdict(self)
        out["summaries"] = {k: asdict(v) for k, v in self.summaries.items()}
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> MonteCarloReport:
        doc = dict(doc)
        doc["summaries"] = {k: EstimatorSummary(**v) for k, v in doc["summaries"].items()}
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True)

    def array(self, kind: str) -> np.ndarray:
        return np.asarray(self.estimates[kind], dtype=float)


def _finite(obj):
    """Replace NaN/inf by None so the JSON stays standard."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


@dataclass(frozen=True)
class _Job:
    scenario: ScenarioConfig
    params: DgpParams
    n: int
    kinds: tuple[EstimatorKind, ...]
    seed: int
    with_se: bool
    level: float
    spec: ModelSpec


def _one_rep(job: _Job, k: int) -> tuple[dict[str, float], dict[str, float], float]:
    rng = make_rng(job.seed, k)
    sim = gen_fused(job.params, job.n, rng)
    sample = misspecify(sim.sample, rng)
    est: dict[str, float] = {}
    ses: dict[str, float] = {}
    needed: set[str] = set()
    for kind in job.kinds:
        needed.update(REQUIRED_NUISANCES[kind])
    try:
        nuis = fit_nuisances(sample, job.spec, needed)
    except (FusionIVError, np.linalg.LinAlgError) as exc:
        log.debug("replicate %d: nuisance fit failed: %s", k, exc)
        nuis = None
    for kind in job.kinds:
        key = kind.value
        est[key] = ses[key] = math.nan
        if nuis is None:
            continue
        try:
            res = estimate(kind, sample, nuis, job.spec)
        except (FusionIVError, np.linalg.LinAlgError) as exc:
            log.debug("replicate %d, %s failed: %s", k, key, exc)
            continue
        est[key] = res.delta_hat
        if job.with_se:
            try:
                ses[key] = sandwich(stacked_system(kind, sample, nuis, res, job.spec)).se
            except (FusionIVError, np.linalg.LinAlgError) as exc:
                log.debug("replicate %d, %s sandwich failed: %s", k, key, exc)
    return est, ses, sim.clamp_rate


def _run_chunk(args) -> list:
    job, ks = args
    return [_one_rep(job, k) for k in ks]


def resolve_workers(parallelism: int | None) -> int:
    if parallelism is None:
        parallelism = int(os.environ.get("FUSION_IV_THREADS", "1"))
    return max(1, int(parallelism))


def run_scenario(
    scenario: ScenarioConfig | str,
    params: DgpParams | None = None,
    n: int = 10_000,
    reps: int = 1000,
    kinds: Iterable[EstimatorKind | str] = ("d1", "d2", "d3", "mul"),
    seed: int = 0,
    parallelism: int | None = None,
    *,
    sandwich_se: bool = False,
    level: float = 0.95,
    formulas: dict[str, str] | None = None,
    h_link: str = "identity",
) -> MonteCarloReport:
    """Simulate ``reps`` fused samples and summarize each estimator.

    Replicate ``k`` uses substream ``(seed, k)``; the report is the same for
    any worker count.  Replicates that fail for an estimator are counted and
    excluded; more than 10% failures aborts.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if isinstance(scenario, str):
        scenario = ScenarioConfig.from_id(scenario)
    params = params or DgpParams()
    kinds = tuple(EstimatorKind(k) for k in kinds)
    job = _Job(scenario, params, n, kinds, seed, sandwich_se, level, scenario.model_spec(formulas, h_link))

    workers = min(resolve_workers(parallelism), reps)
    if workers > 1:
        size = max(1, math.ceil(reps / (4 * workers)))
        chunks = [(job, range(i, min(i + size, reps))) for i in range(0, reps, size)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = [r for part in ex.map(_run_chunk, chunks) for r in part]
    else:
        rows = [_one_rep(job, k) for k in range(reps)]

    truth = params.truth
    estimates = {k.value: [r[0][k.value] for r in rows] for k in kinds}
    ses = {k.value: [r[1][k.value] for r in rows] for k in kinds} if sandwich_se else None
    summaries: dict[str, EstimatorSummary] = {}
    for kind in kinds:
        key = kind.value
        est = np.asarray(estimates[key])
        ok = np.isfinite(est)
        failures = int((~ok).sum())
        if failures > MAX_FAILURE_RATE * reps:
            raise TooManyFailuresError(f"{key}: {failures} of {reps} replicates failed")
        if ok.sum() >= 2:
            m = metrics(est[ok], truth)
        else:
            b = float(est[ok][0] - truth) if ok.any() else math.nan
            m = Metrics(abs(b), math.nan, b * b, abs(b), b)
        mean_se = coverage = None
        if ses is not None:
            se = np.asarray(ses[key])
            good = ok & np.isfinite(se)
            if good.any():
                mean_se = float(se[good].mean())
                lo, hi = _wald_arrays(est[good], se[good], level)
                coverage = float(np.mean((lo <= truth) & (truth <= hi)))
        summaries[key] = EstimatorSummary(
            key, m.bias, m.abs_bias, m.sd, m.mse, m.rmse, mean_se, coverage, int(ok.sum()), failures
        )
    clamp = float(np.mean([r[2] for r in rows]))
    return MonteCarloReport(
        scenario.id, n, reps, seed, truth, summaries, estimates, ses, clamp, params.reversed_fusion
    )


def _wald_arrays(est: np.ndarray, se: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    half = wald_ci(0.0, 1.0, level)[1] * se
    return est - half, est + half


def render_table(reports: Sequence[MonteCarloReport], digits: int = 2) -> str:
    """Fixed-width two-panel table: |bias| (SD) on top, MSE below."""
    if not reports:
        return ""
    kinds = list(reports[0].summaries)
    cw = 14
    head = "Model".ljust(8) + "".join(k.center(cw) for k in kinds)
    rule = "-" * len(head)
    lines = [rule, head, rule, "|Bias| (SD)"]
    fmt = f"{{:.{digits}f}}"

    def cell(v):
        return "NA" if v is None or not math.isfinite(v) else fmt.format(v)

    for rep in reports:
        row = rep.scenario.ljust(8)
        for k in kinds:
            s = rep.summaries[k]
            row += f"{cell(s.abs_bias)} ({cell(s.sd)})".center(cw)
        lines.append(row)
    lines.append("MSE")
    for rep in reports:
        lines.append(rep.scenario.ljust(8) + "".join(cell(rep.summaries[k].mse).center(cw) for k in kinds))
    lines.append(rule)
    return "\n".join(lines) + "\n"
