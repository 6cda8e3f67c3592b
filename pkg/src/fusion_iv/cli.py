"""Command-line front end: ``estimate`` on a fused CSV, ``simulate`` scenarios.

Exit codes: 0 success, 2 invalid input or configuration, 3 estimation
failure.  Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .data import FusedSample, parse_formula, read_fused_csv
from .errors import ConfigError, FusionIVError
from .estimators import (
    REQUIRED_FORMULAS,
    REQUIRED_NUISANCES,
    EstimateResult,
    EstimatorKind,
    estimate,
    make_recipe,
    stacked_system,
)
from .inference import bootstrap, sandwich, wald_ci
from .nuisance import COMPONENTS, ModelSpec, fit_nuisances
from .sim.dgp import DgpParams
from .sim.montecarlo import SCENARIO_IDS, render_table, resolve_workers, run_scenario

EXIT_OK, EXIT_INVALID, EXIT_ESTIMATION = 0, 2, 3
FORMATS = ("json", "tsv", "text")


def _require(doc: dict, key: str, kind: type | tuple[type, ...]):
    if key not in doc:
        raise ConfigError(f"missing required key {key!r}")
    val = doc[key]
    # JSON booleans are ints in Python; never accept them for numeric keys
    if not isinstance(val, kind) or (isinstance(val, bool) and kind is int):
        raise ConfigError(f"key {key!r} has the wrong type")
    return val


def _check_keys(doc: dict, allowed: set[str]) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    extra = set(doc) - allowed
    if extra:
        raise ConfigError(f"unknown configuration keys: {sorted(extra)}")


def _kinds(values) -> list[str]:
    if not isinstance(values, list) or not values:
        raise ConfigError("'estimators' must be a non-empty list")
    try:
        return [EstimatorKind(str(v).lower()).value for v in values]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class EstimateConfig:
    formulas: dict[str, str]
    estimators: list[str]
    seed: int
    h_link: str = "identity"
    bootstrap: int = 0
    level: float = 0.95
    format: str = "json"
    first_stage: str | None = None

    KEYS = {"formulas", "estimators", "seed", "h_link", "bootstrap", "level", "format", "first_stage"}

    @classmethod
    def from_dict(cls, doc: dict) -> EstimateConfig:
        _check_keys(doc, cls.KEYS)
        raw = _require(doc, "formulas", dict)
        formulas = {}
        for key, text in raw.items():
            comp = "h" if key == "H" else key
            if comp not in COMPONENTS:
                raise ConfigError(f"unknown model {key!r}")
            if not isinstance(text, str):
                raise ConfigError(f"formula for {key!r} must be a string")
            parse_formula(text)
            formulas[comp] = text
        cfg = cls(
            formulas=formulas,
            estimators=_kinds(_require(doc, "estimators", list)),
            seed=_require(doc, "seed", int),
            h_link=doc.get("h_link", "identity"),
            bootstrap=doc.get("bootstrap", 0),
            level=doc.get("level", 0.95),
            format=doc.get("format", "json"),
            first_stage=doc.get("first_stage"),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.h_link not in ("identity", "tanh"):
            raise ConfigError("h_link must be 'identity' or 'tanh'")
        if not isinstance(self.bootstrap, int) or isinstance(self.bootstrap, bool) or not (self.bootstrap == 0 or self.bootstrap >= 50):
            raise ConfigError("bootstrap must be 0 or an integer >= 50")
        if not isinstance(self.level, (int, float)) or not 0.0 < self.level < 1.0:
            raise ConfigError("level must lie in (0, 1)")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")
        if self.first_stage is not None:
            parse_formula(self.first_stage)
        for kind in self.estimators:
            missing = [c for c in REQUIRED_FORMULAS[EstimatorKind(kind)] if c not in self.formulas]
            if missing:
                raise ConfigError(f"estimator {kind} needs formulas for {missing}")

    def to_dict(self) -> dict:
        out = {
            "formulas": dict(self.formulas),
            "estimators": list(self.estimators),
            "seed": self.seed,
            "h_link": self.h_link,
            "bootstrap": self.bootstrap,
            "level": self.level,
            "format": self.format,
        }
        if self.first_stage is not None:
            out["first_stage"] = self.first_stage
        return out

    def model_spec(self) -> ModelSpec:
        first = parse_formula(self.first_stage) if self.first_stage else None
        return ModelSpec.from_strings(self.formulas, h_link=self.h_link, tau_linear=first)


@dataclass
class SimulateConfig:
    scenarios: list[str]
    n: int
    reps: int
    estimators: list[str]
    seed: int
    parallelism: int | None = None
    format: str = "json"
    out: str | None = None
    sandwich: bool = False
    level: float = 0.95
    reversed_fusion: bool = False
    formulas: dict[str, str] = field(default_factory=dict)

    KEYS = {
        "scenarios", "n", "reps", "estimators", "seed", "parallelism", "format",
        "out", "sandwich", "level", "reversed_fusion", "formulas",
    }

    @classmethod
    def from_dict(cls, doc: dict) -> SimulateConfig:
        _check_keys(doc, cls.KEYS)
        scen = doc.get("scenarios")
        if isinstance(scen, str):
            scen = list(SCENARIO_IDS) if scen == "all" else [scen]
        if not isinstance(scen, list) or not scen or any(s not in SCENARIO_IDS for s in scen):
            raise ConfigError(f"scenarios must be a list drawn from {SCENARIO_IDS} or 'all'")
        cfg = cls(
            scenarios=list(scen),
            n=_require(doc, "n", int),
            reps=_require(doc, "reps", int),
            estimators=_kinds(_require(doc, "estimators", list)),
            seed=_require(doc, "seed", int),
            parallelism=doc.get("parallelism"),
            format=doc.get("format", "json"),
            out=doc.get("out"),
            sandwich=doc.get("sandwich", False),
            level=doc.get("level", 0.95),
            reversed_fusion=doc.get("reversed_fusion", False),
            formulas=dict(doc.get("formulas", {})),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.n < 10 or self.reps < 1:
            raise ConfigError("need n >= 10 and reps >= 1")
        if self.parallelism is not None and (not isinstance(self.parallelism, int) or self.parallelism < 1):
            raise ConfigError("parallelism must be a positive integer")
        if self.format not in ("json", "text"):
            raise ConfigError("simulate format must be 'json' or 'text'")
        if not isinstance(self.sandwich, bool) or not isinstance(self.reversed_fusion, bool):
            raise ConfigError("sandwich and reversed_fusion must be booleans")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("level must lie in (0, 1)")
        for key, text in self.formulas.items():
            if key not in COMPONENTS:
                raise ConfigError(f"unknown model {key!r}")
            parse_formula(text)

    def to_dict(self) -> dict:
        out = {
            "scenarios": list(self.scenarios),
            "n": self.n,
            "reps": self.reps,
            "estimators": list(self.estimators),
            "seed": self.seed,
            "format": self.format,
            "sandwich": self.sandwich,
            "level": self.level,
            "reversed_fusion": self.reversed_fusion,
        }
        if self.parallelism is not None:
            out["parallelism"] = self.parallelism
        if self.out is not None:
            out["out"] = self.out
        if self.formulas:
            out["formulas"] = dict(self.formulas)
        return out


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


@dataclass
class EstimateRow:
    estimator: str
    estimate: float
    se_sandwich: float | None
    se_boot: float | None
    ci_lower: float
    ci_upper: float
    level: float
    diagnostics: dict[str, float]


def run_estimate(sample: FusedSample, cfg: EstimateConfig, workers: int | None = None) -> list[EstimateRow]:
    """Fit the requested estimators and attach standard errors and Wald CIs."""
    spec = cfg.model_spec()
    needed: set[str] = set()
    for kind in cfg.estimators:
        needed.update(REQUIRED_NUISANCES[EstimatorKind(kind)])
    nuis = fit_nuisances(sample, spec, needed)
    rows = []
    for kind in cfg.estimators:
        res: EstimateResult = estimate(kind, sample, nuis, spec)
        se = sandwich(stacked_system(kind, sample, nuis, res, spec)).se
        se_boot = None
        if cfg.bootstrap:
            bs = bootstrap(sample, make_recipe(kind, spec), cfg.bootstrap, cfg.seed, level=cfg.level, workers=workers)
            se_boot = bs.se_boot
        lo, hi = wald_ci(res.delta_hat, se, cfg.level)
        diag = {k: float(v) for k, v in res.diagnostics.items()}
        rows.append(EstimateRow(kind, res.delta_hat, se, se_boot, lo, hi, cfg.level, diag))
    return rows


def _num(v, digits=4) -> str:
    return "NA" if v is None or not math.isfinite(v) else f"{v:.{digits}f}"


def render_estimate(rows: list[EstimateRow], sample: FusedSample, fmt: str) -> str:
    if fmt == "json":
        doc = {
            "n": sample.n,
            "n_primary": sample.n_p,
            "n_auxiliary": sample.n_a,
            "q_hat": sample.q_hat,
            "rows": [r.__dict__ for r in rows],
        }
        return json.dumps(doc, indent=2) + "\n"
    if fmt == "tsv":
        head = ["estimator", "estimate", "se_sandwich", "se_boot", "ci_lower", "ci_upper", "level",
                "min_tau_gap", "pi_clamp_count"]
        lines = ["\t".join(head)]
        for r in rows:
            vals = [r.estimator, repr(r.estimate), repr(r.se_sandwich), repr(r.se_boot) if r.se_boot is not None else "NA",
                    repr(r.ci_lower), repr(r.ci_upper), repr(r.level),
                    repr(r.diagnostics.get("min_tau_gap", math.nan)), repr(r.diagnostics.get("pi_clamp_count", 0.0))]
            lines.append("\t".join(vals))
        return "\n".join(lines) + "\n"
    pct = f"{100 * rows[0].level:g}%" if rows else "95%"
    head = f"{'Estimator':<10}{'Estimate':>10}{'SE':>10}{'Boot SE':>10}   {pct} Wald CI"
    lines = [f"n = {sample.n} (primary {sample.n_p}, auxiliary {sample.n_a})", head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.estimator:<10}{_num(r.estimate):>10}{_num(r.se_sandwich):>10}{_num(r.se_boot):>10}"
            f"   ({_num(r.ci_lower)}, {_num(r.ci_upper)})"
        )
    lines.append("-" * len(head))
    for r in rows:
        d = r.diagnostics
        lines.append(
            f"{r.estimator}: min |tau(1,x)-tau(0,x)| = {_num(d.get('min_tau_gap'))}, "
            f"pi clamps = {int(d.get('pi_clamp_count', 0))}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


def atomic_write(path: str, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_json(path: str) -> Any:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text)


def cmd_estimate(args) -> int:
    cfg = EstimateConfig.from_dict(_load_json(args.config))
    if args.format:
        cfg.format = args.format
    sample = read_fused_csv(args.data)
    rows = run_estimate(sample, cfg)
    _emit(render_estimate(rows, sample, cfg.format), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = SimulateConfig.from_dict(_load_json(args.config))
    workers = resolve_workers(args.threads if args.threads is not None else cfg.parallelism)
    params = DgpParams(reversed_fusion=cfg.reversed_fusion)
    formulas = None
    if cfg.formulas:
        from .sim.montecarlo import DEFAULT_FORMULAS

        formulas = {**DEFAULT_FORMULAS, **cfg.formulas}
    reports = [
        run_scenario(s, params, cfg.n, cfg.reps, cfg.estimators, cfg.seed, workers,
                     sandwich_se=cfg.sandwich, level=cfg.level, formulas=formulas)
        for s in cfg.scenarios
    ]
    if cfg.format == "json":
        docs = [json.loads(r.to_json()) for r in reports]
        text = json.dumps({"config": cfg.to_dict(), "reports": docs}, indent=2, sort_keys=True) + "\n"
    else:
        text = render_table(reports)
    _emit(text, args.out or cfg.out)
    return EXIT_OK


def _error(exc: BaseException, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    sys.stderr.write(json.dumps(doc) + "\n")
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusion-iv", description="Treatment effects from fused two-sample IV data.")
    sub = parser.add_subparsers(dest="command", required=True)
    est = sub.add_parser("estimate", help="run the estimator battery on a fused CSV")
    est.add_argument("--data", required=True)
    est.add_argument("--config", required=True)
    est.add_argument("--out")
    est.add_argument("--format", choices=FORMATS)
    est.set_defaults(func=cmd_estimate)
    sim = sub.add_parser("simulate", help="run Monte Carlo scenarios")
    sim.add_argument("--config", required=True)
    sim.add_argument("--threads", type=int)
    sim.add_argument("--out")
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        # package ValueErrors cover schema, formula and config problems
        return _error(exc, EXIT_INVALID)
    except (FusionIVError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        return _error(exc, EXIT_ESTIMATION)


if __name__ == "__main__":
    sys.exit(main())
