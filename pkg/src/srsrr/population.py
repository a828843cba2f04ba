"""Finite populations: loading, validation and stratum moments.

A population holds unit-level covariate blocks W (sampling stage), X
(assignment stage), E and C (analysis stage) plus, in oracle mode, both
potential outcomes.  Arrays are stored read-only so a Population can be
shared freely between worker threads.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "BLOCKS",
    "PopulationError",
    "CovariateSchema",
    "Population",
    "StratumMoments",
    "group_moments",
    "load_schema",
    "load_population",
    "save_population",
    "stratum_moments",
]

BLOCKS = ("w", "x", "e", "c")
MIN_STRATUM = 4


class PopulationError(ValueError):
    """Invalid population data or schema."""


@dataclass(frozen=True)
class CovariateSchema:
    """Column roles for a population table.

    Each covariate block maps to an ordered list of column names; an empty
    list means the block is absent.  ``mode`` is ``"oracle"`` (columns y1,
    y0) or ``"analysis"`` (columns z, t, y).
    """

    w: tuple[str, ...] = ()
    x: tuple[str, ...] = ()
    e: tuple[str, ...] = ()
    c: tuple[str, ...] = ()
    mode: str = "oracle"
    unit_id: str = "unit_id"
    stratum: str = "stratum"

    def __post_init__(self):
        for b in BLOCKS:
            object.__setattr__(self, b, tuple(getattr(self, b)))
        if self.mode not in ("oracle", "analysis", "covariates"):
            raise PopulationError(f"unknown schema mode {self.mode!r}")

    @classmethod
    def from_dims(cls, J1=0, J2=0, J3=0, J4=0, mode="oracle") -> "CovariateSchema":
        cols = {b: tuple(f"{b}_{j + 1}" for j in range(J)) for b, J in zip(BLOCKS, (J1, J2, J3, J4))}
        return cls(mode=mode, **cols)

    def dims(self) -> dict[str, int]:
        return {b: len(getattr(self, b)) for b in BLOCKS}

    @property
    def outcome_columns(self) -> tuple[str, ...]:
        if self.mode == "oracle":
            return ("y1", "y0")
        if self.mode == "analysis":
            return ("z", "t", "y")
        return ()

    def columns(self) -> list[str]:
        out = [self.unit_id, self.stratum]
        for b in BLOCKS:
            out.extend(getattr(self, b))
        out.extend(self.outcome_columns)
        return out

    def to_dict(self) -> dict:
        d = {b: list(getattr(self, b)) for b in BLOCKS}
        d.update(schema_version=1, mode=self.mode, unit_id=self.unit_id, stratum=self.stratum)
        return d


def load_schema(path) -> CovariateSchema:
    """Read a sidecar JSON schema file."""
    with open(path) as fh:
        raw = json.load(fh)
    allowed = {"schema_version", "mode", "unit_id", "stratum", *BLOCKS}
    extra = set(raw) - allowed
    if extra:
        raise PopulationError(f"unknown schema keys: {sorted(extra)}")
    if raw.get("schema_version", 1) != 1:
        raise PopulationError(f"unsupported schema_version {raw['schema_version']}")
    kw = {k: v for k, v in raw.items() if k != "schema_version"}
    return CovariateSchema(**kw)


def _frozen(a):
    if a is None:
        return None
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


def _block(a, n):
    if a is None:
        return np.zeros((n, 0))
    a = np.asarray(a, dtype=float)
    return a.reshape(n, -1) if a.ndim == 1 else a


def _contained(inner: np.ndarray, outer: np.ndarray) -> bool:
    """Every column of ``inner`` equals some column of ``outer``."""
    for j in range(inner.shape[1]):
        if not any(np.array_equal(inner[:, j], outer[:, m]) for m in range(outer.shape[1])):
            return False
    return True


class Population:
    """Immutable finite population partitioned into strata.

    ``strata`` holds stratum codes 0..K-1 in order of first appearance;
    ``labels`` keeps the original stratum names.
    """

    def __init__(
        self,
        strata,
        w=None,
        x=None,
        e=None,
        c=None,
        y1=None,
        y0=None,
        *,
        unit_ids=None,
        labels=None,
        z=None,
        t=None,
        y=None,
        check_nesting: bool = True,
    ):
        raw = np.asarray(strata)
        if labels is None:
            uniq, first = np.unique(raw, return_index=True)
            order = np.argsort(first)
            labels = [str(u) for u in uniq[order]]
            remap = {u: i for i, u in enumerate(uniq[order])}
            codes = np.array([remap[s] for s in raw], dtype=np.int64)
        else:
            codes = raw.astype(np.int64)
        self.N = int(codes.size)
        self.labels = list(labels)
        self.K = len(self.labels)
        codes.setflags(write=False)
        self.strata = codes
        self.unit_ids = (
            np.array([str(i + 1) for i in range(self.N)]) if unit_ids is None else np.asarray(unit_ids).astype(str)
        )
        if self.unit_ids.size != self.N:
            raise PopulationError("unit_ids length does not match population size")

        self.sizes = np.bincount(codes, minlength=self.K)
        if self.N == 0 or self.sizes.min() < MIN_STRATUM:
            k = int(np.argmin(self.sizes)) if self.K else 0
            raise PopulationError(
                f"stratum too small: {self.labels[k] if self.K else '?'} has "
                f"{self.sizes[k] if self.K else 0} units (need >= {MIN_STRATUM})"
            )
        self.weights = self.sizes / self.N
        self.members = [np.flatnonzero(codes == k) for k in range(self.K)]

        n = self.N
        self.w, self.x, self.e, self.c = (_frozen(_block(v, n)) for v in (w, x, e, c))
        for name in BLOCKS:
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise PopulationError(f"non-finite value in covariate block {name}")
        self.y1 = _frozen(y1)
        self.y0 = _frozen(y0)
        self.z = None if z is None else np.asarray(z, dtype=np.int8)
        self.t = None if t is None else np.asarray(t, dtype=np.int8)
        self.y = _frozen(y)
        if (self.y1 is None) != (self.y0 is None):
            raise PopulationError("oracle mode needs both y1 and y0")
        if self.z is not None:
            self._check_analysis()

        if check_nesting:
            if self.J2 and self.J1 and not _contained(self.w, self.x):
                raise PopulationError("nesting violation: W columns are not contained in X")
            if self.J3 and not _contained(self.w, self.e):
                raise PopulationError("nesting violation: W columns are not contained in E")
            if self.J4 and not _contained(self.x, self.c):
                raise PopulationError("nesting violation: X columns are not contained in C")

        self.constant_columns = self._flag_constant()
        if self.constant_columns:
            warnings.warn(
                f"constant covariate columns: {self.constant_columns}",
                stacklevel=2,
            )

    def _check_analysis(self):
        if self.t is None or self.y is None:
            raise PopulationError("analysis mode needs z, t and y")
        sampled = self.z == 1
        if np.any(~np.isfinite(self.y[sampled])):
            raise PopulationError("y must be observed for every sampled unit")
        if np.any(self.t[~sampled] != 0):
            raise PopulationError("unsampled units cannot be treated")

    def _flag_constant(self) -> list[str]:
        flagged = []
        for name in BLOCKS:
            arr = getattr(self, name)
            for j in range(arr.shape[1]):
                if np.ptp(arr[:, j]) == 0:
                    flagged.append(f"{name}_{j + 1}")
        return flagged

    J1 = property(lambda self: self.w.shape[1])
    J2 = property(lambda self: self.x.shape[1])
    J3 = property(lambda self: self.e.shape[1])
    J4 = property(lambda self: self.c.shape[1])

    @property
    def has_oracle(self) -> bool:
        return self.y1 is not None

    @property
    def tau(self) -> float:
        """Population average treatment effect (oracle mode)."""
        if not self.has_oracle:
            raise PopulationError("tau needs both potential outcomes")
        return float(np.mean(self.y1 - self.y0))

    def block(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def with_outcomes(self, y1, y0) -> "Population":
        return Population(
            self.strata, self.w, self.x, self.e, self.c, y1, y0,
            unit_ids=self.unit_ids, labels=self.labels, check_nesting=False,
        )

    def __repr__(self):
        return f"Population(N={self.N}, K={self.K}, J=({self.J1},{self.J2},{self.J3},{self.J4}))"


def _parse_float(value: str, col: str, row: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise PopulationError(f"non-numeric value {value!r} in column {col!r}, row {row}") from None


def load_population(source, schema: CovariateSchema, check_nesting: bool = True) -> Population:
    """Read a comma-separated population file bound to ``schema``."""
    path = Path(source)
    if not path.exists():
        raise PopulationError(f"population file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PopulationError("population file is empty") from None
        rows = [r for r in reader if r]
    header = [h.strip() for h in header]
    pos = {h: i for i, h in enumerate(header)}
    missing = [col for col in schema.columns() if col not in pos]
    if missing:
        raise PopulationError(f"missing column(s): {missing}")

    def numeric(cols):
        out = np.empty((len(rows), len(cols)))
        for j, col in enumerate(cols):
            i = pos[col]
            for r, row in enumerate(rows):
                out[r, j] = _parse_float(row[i], col, r + 2)
        return out

    blocks = {b: numeric(getattr(schema, b)) for b in BLOCKS}
    kw = {}
    if schema.mode == "oracle":
        y = numeric(("y1", "y0"))
        kw.update(y1=y[:, 0], y0=y[:, 1])
    elif schema.mode == "analysis":
        zt = numeric(("z", "t"))
        ycol = pos["y"]
        yv = np.array([float(r[ycol]) if r[ycol].strip() not in ("", "NA", "nan") else np.nan for r in rows])
        kw.update(z=zt[:, 0].astype(int), t=zt[:, 1].astype(int), y=yv)
    strata = [r[pos[schema.stratum]] for r in rows]
    ids = [r[pos[schema.unit_id]] for r in rows]
    return Population(strata, unit_ids=ids, check_nesting=check_nesting, **blocks, **kw)


def save_population(pop: Population, path, schema: CovariateSchema | None = None) -> CovariateSchema:
    """Write ``pop`` as CSV using default column names; returns the schema."""
    if schema is None:
        mode = "oracle" if pop.has_oracle else ("analysis" if pop.z is not None else "covariates")
        schema = CovariateSchema.from_dims(pop.J1, pop.J2, pop.J3, pop.J4, mode=mode)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(schema.columns())
        for i in range(pop.N):
            row = [pop.unit_ids[i], pop.labels[pop.strata[i]]]
            for b in BLOCKS:
                row.extend(repr(float(v)) for v in pop.block(b)[i])
            if schema.mode == "oracle":
                row += [repr(float(pop.y1[i])), repr(float(pop.y0[i]))]
            elif schema.mode == "analysis":
                yi = "" if pop.z[i] == 0 else repr(float(pop.y[i]))
                row += [int(pop.z[i]), int(pop.t[i]), yi]
            wr.writerow(row)
    return schema


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------


def group_moments(codes: np.ndarray, K: int, data: np.ndarray):
    """Per-group means and covariance matrices (divisor n_g - 1).

    ``data`` is (n, p); returns counts (K,), means (K, p), cov (K, p, p).
    Groups with fewer than two members get NaN covariances.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    counts = np.bincount(codes, minlength=K).astype(float)
    onehot = np.zeros((K, codes.size))
    onehot[codes, np.arange(codes.size)] = 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        means = (onehot @ data) / counts[:, None]
        centered = data - means[codes]
        p = data.shape[1]
        outer = (centered[:, :, None] * centered[:, None, :]).reshape(codes.size, p * p)
        cov = (onehot @ outer).reshape(K, p, p) / (counts - 1.0)[:, None, None]
    return counts, means, cov


@dataclass(frozen=True)
class StratumMoments:
    """Stratum-level finite-population moments, each with a leading K axis.

    Covariances use the divisor N_k - 1.  ``S_W1`` is the covariance of W
    with Y(1), ``S_Wtau`` of W with tau, and so on.  Outcome fields are None
    in sampled-only mode.
    """

    sizes: np.ndarray
    weights: np.ndarray
    means: dict = field(default_factory=dict)
    S2: dict = field(default_factory=dict)
    cross: dict = field(default_factory=dict)
    S2_1: np.ndarray | None = None
    S2_0: np.ndarray | None = None
    S2_tau: np.ndarray | None = None
    S_10: np.ndarray | None = None
    mode: str = "oracle"

    @property
    def K(self) -> int:
        return self.sizes.size

    def cov(self, block: str) -> np.ndarray:
        """S^2_[k]B for covariate block B, shape (K, J, J)."""
        return self.S2[block]

    def covy(self, block: str, arm: str) -> np.ndarray:
        """S_[k]B,arm for arm in {'1', '0', 'tau'}, shape (K, J)."""
        return self.cross[(block, arm)]


def stratum_moments(pop: Population, mode: str = "oracle") -> StratumMoments:
    """Compute every stratum moment used downstream.

    ``mode="sampled-only"`` skips anything that touches potential outcomes.
    """
    if mode not in ("oracle", "sampled-only"):
        raise ValueError(f"unknown moments mode {mode!r}")
    if mode == "oracle" and not pop.has_oracle:
        raise PopulationError("oracle moments need both potential outcomes")
    dims = [(b, pop.block(b).shape[1]) for b in BLOCKS]
    cols = [pop.block(b) for b, J in dims if J]
    if mode == "oracle":
        cols = [np.column_stack([pop.y1, pop.y0])] + cols
    data = np.column_stack(cols) if cols else np.zeros((pop.N, 0))
    _, means, cov = group_moments(pop.strata, pop.K, data)

    off = 2 if mode == "oracle" else 0
    slices = {}
    for b, J in dims:
        slices[b] = slice(off, off + J)
        off += J
    m_means, m_S2, m_cross = {}, {}, {}
    for b, _ in dims:
        s = slices[b]
        m_means[b] = means[:, s]
        m_S2[b] = cov[:, s, s]
    kw = {}
    if mode == "oracle":
        m_means["y1"], m_means["y0"] = means[:, 0], means[:, 1]
        s1, s0, s10 = cov[:, 0, 0], cov[:, 1, 1], cov[:, 0, 1]
        kw = dict(S2_1=s1, S2_0=s0, S_10=s10, S2_tau=np.maximum(s1 + s0 - 2.0 * s10, 0.0))
        # S2_tau from the direct differences too; the two routes must agree
        _, _, ctau = group_moments(pop.strata, pop.K, pop.y1 - pop.y0)
        direct = ctau[:, 0, 0]
        if not np.allclose(direct, kw["S2_tau"], rtol=1e-8, atol=1e-10 * (1 + np.max(s1 + s0))):
            raise ArithmeticError("inconsistent S2_tau between direct and decomposed routes")
        kw["S2_tau"] = direct
        for b, _ in dims:
            s = slices[b]
            m_cross[(b, "1")] = cov[:, s, 0]
            m_cross[(b, "0")] = cov[:, s, 1]
            m_cross[(b, "tau")] = cov[:, s, 0] - cov[:, s, 1]
    for arr in [*m_means.values(), *m_S2.values(), *m_cross.values(), *kw.values()]:
        arr.setflags(write=False)
    return StratumMoments(
        sizes=pop.sizes.astype(float), weights=pop.weights, means=m_means, S2=m_S2,
        cross=m_cross, mode=mode, **kw,
    )
