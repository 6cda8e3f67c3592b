"""Fused two-sample data, CSV I/O and the design-matrix formula grammar.

A fused sample stacks primary rows (``r=1``; outcome ``y`` observed) and
auxiliary rows (``r=0``; treatment ``d`` observed).  Both carry the binary
instrument ``z`` and covariates ``x1..xp``.
"""

from __future__ import annotations

import csv
import math
import os
import re
import tempfile
from dataclasses import dataclass, field, replace
from typing import Iterator, Literal

import numpy as np

from .errors import (
    ConsistencyError,
    DegenerateSampleError,
    DuplicateTermError,
    FormulaSyntaxError,
    IndexOutOfRangeError,
    MissingTransformedError,
    ParseError,
    SchemaError,
)

CovariateSource = Literal["observed", "transformed"]
COVARIATE_SOURCES = ("observed", "transformed")

# A factor is (variable, power); variable 0 is z, j >= 1 is x_j.
Factor = tuple[int, int]
Term = tuple[Factor, ...]


# ---------------------------------------------------------------------------
# formulas
# ---------------------------------------------------------------------------


def term_label(term: Term) -> str:
    if not term:
        return "1"
    parts = []
    for var, power in term:
        name = "z" if var == 0 else f"x{var}"
        parts.append(name if power == 1 else f"{name}^{power}")
    return "*".join(parts)


def _term_key(term: Term) -> tuple:
    return (sum(p for _, p in term), term)


@dataclass(frozen=True)
class Formula:
    """Linear predictor specification: a sorted tuple of distinct terms."""

    terms: tuple[Term, ...]

    def __post_init__(self) -> None:
        if not self.terms:
            raise FormulaSyntaxError("formula needs at least one term")
        if len(set(self.terms)) != len(self.terms):
            raise DuplicateTermError("duplicate terms in formula")
        object.__setattr__(self, "terms", tuple(sorted(self.terms, key=_term_key)))

    def __len__(self) -> int:
        return len(self.terms)

    def __str__(self) -> str:
        return " + ".join(self.labels)

    @property
    def labels(self) -> list[str]:
        return [term_label(t) for t in self.terms]

    @property
    def has_z(self) -> bool:
        return any(var == 0 for t in self.terms for var, _ in t)

    @property
    def max_index(self) -> int:
        return max((var for t in self.terms for var, _ in t), default=0)

    @property
    def is_intercept_only(self) -> bool:
        return self.terms == ((),)


_TOKEN = re.compile(r"^(z|x([1-9][0-9]*))(?:\^([0-9]+))?$")


def parse_formula(text: str) -> Formula:
    """Parse ``"1 + z + x1 + x1^2 + x1*x3"`` into a canonical :class:`Formula`."""
    if not isinstance(text, str) or not text.strip():
        raise FormulaSyntaxError("empty formula")
    terms: list[Term] = []
    for raw_term in text.split("+"):
        raw_term = raw_term.strip()
        if not raw_term:
            raise FormulaSyntaxError(f"empty term in {text!r}")
        if raw_term == "1":
            terms.append(())
            continue
        powers: dict[int, int] = {}
        for raw_factor in raw_term.split("*"):
            tok = re.sub(r"\s+", "", raw_factor)
            m = _TOKEN.match(tok)
            if m is None:
                raise FormulaSyntaxError(f"bad token {raw_factor.strip()!r} in {text!r}")
            var = 0 if m.group(1) == "z" else int(m.group(2))
            power = int(m.group(3)) if m.group(3) is not None else 1
            if power < 1:
                raise FormulaSyntaxError(f"power must be >= 1 in {raw_factor.strip()!r}")
            powers[var] = powers.get(var, 0) + power
        term = tuple(sorted(powers.items()))
        if term in terms:
            raise DuplicateTermError(f"duplicate term {term_label(term)!r}")
        terms.append(term)
    if len(set(terms)) != len(terms):
        raise DuplicateTermError(f"duplicate terms in {text!r}")
    return Formula(tuple(terms))


def design_values(formula: Formula, z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate every term of ``formula`` row-wise; ``z`` may be a scalar."""
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    if formula.max_index > p:
        raise IndexOutOfRangeError(f"formula references x{formula.max_index} but p={p}")
    z = np.broadcast_to(np.asarray(z, dtype=float), (n,))
    out = np.ones((n, len(formula)))
    for k, term in enumerate(formula.terms):
        for var, power in term:
            col = z if var == 0 else x[:, var - 1]
            out[:, k] *= col if power == 1 else col**power
    return out


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    labels: list[str]


# ---------------------------------------------------------------------------
# fused sample
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FusedRow:
    r: int
    y: float | None
    d: int | None
    z: int
    x: tuple[float, ...]


def _readonly(a: np.ndarray | None) -> np.ndarray | None:
    if a is not None:
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FusedSample:
    """Column-oriented fused sample.

    ``y`` is NaN on auxiliary rows and ``d`` is NaN on primary rows.  The
    optional ``z_star``/``x_star`` columns hold transformed covariates used to
    misspecify working models in simulations.
    """

    r: np.ndarray
    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray
    z_star: np.ndarray | None = None
    x_star: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        r = np.asarray(self.r, dtype=np.int8).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        d = np.asarray(self.d, dtype=float).ravel()
        z = np.asarray(self.z, dtype=np.int8).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if len(x) == len(r) else x.reshape(len(r), -1)
        n = len(r)
        if n < 2:
            raise DegenerateSampleError(f"need at least 2 rows, got {n}")
        if not (len(y) == len(d) == len(z) == x.shape[0] == n):
            raise ConsistencyError("column lengths differ")
        if not np.isin(r, (0, 1)).all() or not np.isin(z, (0, 1)).all():
            raise ConsistencyError("r and z must be 0/1")
        prim = r == 1
        if np.isnan(y[prim]).any() or not np.isnan(y[~prim]).all():
            raise ConsistencyError("y must be present exactly on r=1 rows")
        if np.isnan(d[~prim]).any() or not np.isnan(d[prim]).all():
            raise ConsistencyError("d must be present exactly on r=0 rows")
        if not np.isin(d[~prim], (0.0, 1.0)).all():
            raise ConsistencyError("d must be 0/1")
        if not np.isfinite(y[prim]).all() or not np.isfinite(x).all():
            raise ConsistencyError("non-finite y or x")
        n_p = int(prim.sum())
        if n_p == 0 or n_p == n:
            raise DegenerateSampleError("both primary and auxiliary rows are required")
        zs = self.z_star
        xs = self.x_star
        if (zs is None) != (xs is None):
            raise MissingTransformedError("z_star and x_star must be given together")
        if zs is not None:
            zs = np.asarray(zs, dtype=float).ravel()
            xs = np.asarray(xs, dtype=float)
            if len(zs) != n or xs.shape[0] != n:
                raise ConsistencyError("transformed columns misaligned")
        for name, val in (("r", r), ("y", y), ("d", d), ("z", z), ("x", x), ("z_star", zs), ("x_star", xs)):
            object.__setattr__(self, name, _readonly(np.array(val) if val is not None else None))

    # -- sizes -------------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.r)

    @property
    def n_p(self) -> int:
        return int(self.r.sum())

    @property
    def n_a(self) -> int:
        return self.n - self.n_p

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q_hat(self) -> float:
        return float(np.mean(self.r))

    @property
    def has_transformed(self) -> bool:
        return self.z_star is not None

    # -- derived columns ---------------------------------------------------
    @property
    def y0(self) -> np.ndarray:
        """``R*Y`` with zeros on auxiliary rows."""
        return np.where(self.r == 1, np.nan_to_num(self.y), 0.0)

    @property
    def d0(self) -> np.ndarray:
        """``(1-R)*D`` with zeros on primary rows."""
        return np.where(self.r == 0, np.nan_to_num(self.d), 0.0)

    def covariates(self, source: CovariateSource = "observed") -> tuple[np.ndarray, np.ndarray]:
        if source == "observed":
            return self.z.astype(float), self.x
        if source == "transformed":
            if not self.has_transformed:
                raise MissingTransformedError("sample carries no transformed covariates")
            return self.z_star, self.x_star
        raise ValueError(f"unknown covariate source {source!r}")

    def design(self, formula: Formula, source: CovariateSource = "observed", z: float | None = None) -> np.ndarray:
        """Design values, cached per (formula, source, z override)."""
        key = (formula, source, z)
        out = self._cache.get(key)
        if out is None:
            zz, xx = self.covariates(source)
            out = design_values(formula, zz if z is None else z, xx)
            out.setflags(write=False)
            self._cache[key] = out
        return out

    # -- transformations -----------------------------------------------------
    def take(self, idx: np.ndarray) -> FusedSample:
        idx = np.asarray(idx)
        return FusedSample(
            r=self.r[idx],
            y=self.y[idx],
            d=self.d[idx],
            z=self.z[idx],
            x=self.x[idx],
            z_star=None if self.z_star is None else self.z_star[idx],
            x_star=None if self.x_star is None else self.x_star[idx],
        )

    def with_transformed(self, z_star: np.ndarray, x_star: np.ndarray) -> FusedSample:
        return replace(self, z_star=z_star, x_star=x_star, _cache={})

    def without_transformed(self) -> FusedSample:
        return replace(self, z_star=None, x_star=None, _cache={})

    def rows(self) -> Iterator[FusedRow]:
        for i in range(self.n):
            prim = self.r[i] == 1
            yield FusedRow(
                r=int(self.r[i]),
                y=float(self.y[i]) if prim else None,
                d=None if prim else int(self.d[i]),
                z=int(self.z[i]),
                x=tuple(float(v) for v in self.x[i]),
            )

    @classmethod
    def from_rows(cls, rows: list[FusedRow]) -> FusedSample:
        if len(rows) < 2:
            raise DegenerateSampleError(f"need at least 2 rows, got {len(rows)}")
        dims = {len(row.x) for row in rows}
        if len(dims) != 1:
            raise ConsistencyError("rows have differing covariate dimension")
        return cls(
            r=[row.r for row in rows],
            y=[np.nan if row.y is None else row.y for row in rows],
            d=[np.nan if row.d is None else row.d for row in rows],
            z=[row.z for row in rows],
            x=np.array([row.x for row in rows], dtype=float).reshape(len(rows), dims.pop()),
        )

    def equals(self, other: FusedSample) -> bool:
        """Equality of the observed columns (transformed columns ignored)."""
        if self.n != other.n or self.p != other.p:
            return False
        return (
            np.array_equal(self.r, other.r)
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.y, other.y, equal_nan=True)
            and np.array_equal(self.d, other.d, equal_nan=True)
            and np.array_equal(self.x, other.x)
        )


def build_design(
    formula: Formula, sample: FusedSample, covariate_source: CovariateSource = "observed"
) -> DesignMatrix:
    return DesignMatrix(values=sample.design(formula, covariate_source), labels=formula.labels)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _parse_real(text: str, line: int, col: str) -> float:
    try:
        val = float(text)
    except ValueError:
        raise ParseError(f"line {line}: column {col}: cannot parse {text!r}") from None
    if not math.isfinite(val):
        raise ParseError(f"line {line}: column {col}: non-finite value {text!r}")
    return val


def _parse_indicator(text: str, line: int, col: str) -> int:
    val = _parse_real(text, line, col)
    if val not in (0.0, 1.0):
        raise ParseError(f"line {line}: column {col}: expected 0 or 1, got {text!r}")
    return int(val)


def read_fused_csv(path: str | os.PathLike) -> FusedSample:
    """Read and validate a fused CSV with header ``r,y,d,z,x1,...,xp``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty file") from None
        p = len(header) - 4
        expected = ["r", "y", "d", "z"] + [f"x{j}" for j in range(1, p + 1)]
        if p < 0 or header != expected:
            raise SchemaError(f"header must be r,y,d,z,x1..xp; got {','.join(header)}")
        r, y, d, z, x = [], [], [], [], []
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"line {line}: expected {len(header)} fields, got {len(rec)}")
            rec = [c.strip() for c in rec]
            ri = _parse_indicator(rec[0], line, "r")
            if ri == 1:
                if not rec[1] or rec[2]:
                    raise ConsistencyError(f"line {line}: r=1 requires y present and d empty")
                y.append(_parse_real(rec[1], line, "y"))
                d.append(np.nan)
            else:
                if rec[1] or not rec[2]:
                    raise ConsistencyError(f"line {line}: r=0 requires y empty and d present")
                y.append(np.nan)
                d.append(_parse_indicator(rec[2], line, "d"))
            r.append(ri)
            z.append(_parse_indicator(rec[3], line, "z"))
            x.append([_parse_real(v, line, f"x{j}") for j, v in enumerate(rec[4:], start=1)])
    if len(r) < 2:
        raise DegenerateSampleError(f"need at least 2 rows, got {len(r)}")
    return FusedSample(r=r, y=y, d=d, z=z, x=np.array(x, dtype=float).reshape(len(r), p))


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_fused_csv(sample: FusedSample, path: str | os.PathLike) -> None:
    """Write the observed columns; reals carry 17 significant digits."""
    if not isinstance(sample, FusedSample):
        raise DegenerateSampleError("not a FusedSample")
    if sample.n < 2:
        raise DegenerateSampleError("need at least 2 rows")
    path = os.fspath(path)
    header = ["r", "y", "d", "z"] + [f"x{j}" for j in range(1, sample.p + 1)]
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".fused-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(sample.n):
                prim = sample.r[i] == 1
                w.writerow(
                    [
                        int(sample.r[i]),
                        _fmt(sample.y[i]) if prim else "",
                        "" if prim else int(sample.d[i]),
                        int(sample.z[i]),
                        *(_fmt(v) for v in sample.x[i]),
                    ]
                )
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
