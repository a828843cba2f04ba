"""Numeric substrate: chi-square distribution functions, small SPD solves,
seeded random streams and the truncated-normal variables L_{J,a}.

Everything here is deterministic given its inputs.  The incomplete gamma
routines are vectorised over ``x`` so the truncated sampler can invert the
chi-square CDF for a million draws at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

__all__ = [
    "SingularMatrixError",
    "RngStream",
    "TruncSpec",
    "chi2_cdf",
    "chi2_quantile",
    "nu",
    "sample_trunc_first_coord",
    "SpdMatrix",
    "spd_solve",
    "quad_form",
]

_EPS = 1e-15
_TINY = 1e-300
_MAX_ITER = 2000
_STD_NORMAL = NormalDist()


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot falls below the jitter floor."""

    def __init__(self, pivot: int, value: float, floor: float):
        self.pivot = pivot
        self.value = value
        self.floor = floor
        super().__init__(
            f"matrix is singular: pivot {pivot} = {value:.3e} <= floor {floor:.3e}"
        )


# ---------------------------------------------------------------------------
# incomplete gamma / chi-square
# ---------------------------------------------------------------------------


def _gammainc_series(s: float, x: np.ndarray) -> np.ndarray:
    # P(s, x) = x^s e^-x / Gamma(s+1) * sum_k x^k / ((s+1)...(s+k))
    term = np.ones_like(x)
    total = np.ones_like(x)
    denom = s
    for _ in range(_MAX_ITER):
        denom += 1.0
        term = term * x / denom
        total = total + term
        if np.all(term <= total * _EPS):
            break
    with np.errstate(divide="ignore"):
        logpre = s * np.log(x) - x - math.lgamma(s + 1.0)
    return np.exp(logpre) * total


def _gammaincc_cf(s: float, x: np.ndarray) -> np.ndarray:
    # Q(s, x) by the modified Lentz continued fraction.
    b = x + 1.0 - s
    c = np.full_like(x, 1.0 / _TINY)
    d = 1.0 / b
    h = d.copy()
    for i in range(1, _MAX_ITER):
        an = -i * (i - s)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < _TINY, _TINY, d)
        c = b + an / c
        c = np.where(np.abs(c) < _TINY, _TINY, c)
        d = 1.0 / d
        delta = d * c
        h = h * delta
        if np.all(np.abs(delta - 1.0) <= _EPS):
            break
    return np.exp(s * np.log(x) - x - math.lgamma(s)) * h


def _gammainc_lower(s: float, x: np.ndarray) -> np.ndarray:
    """Regularised lower incomplete gamma P(s, x), vectorised over x >= 0."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    zero = x <= 0.0
    inf = np.isposinf(x)
    out[zero] = 0.0
    out[inf] = 1.0
    rest = ~(zero | inf)
    small = rest & (x < s + 1.0)
    large = rest & ~small
    if small.any():
        out[small] = _gammainc_series(s, x[small])
    if large.any():
        out[large] = 1.0 - _gammaincc_cf(s, x[large])
    return np.clip(out, 0.0, 1.0)


def _chi2_p(J: int, x: np.ndarray) -> np.ndarray:
    return _gammainc_lower(0.5 * J, 0.5 * np.asarray(x, dtype=float))


def _chi2_logpdf(J: int, x: np.ndarray) -> np.ndarray:
    s = 0.5 * J
    with np.errstate(divide="ignore"):
        return (s - 1.0) * np.log(x) - 0.5 * x - s * math.log(2.0) - math.lgamma(s)


def chi2_cdf(J: int, x):
    """P(chi2_J <= x).  Scalar in, float out; array in, array out."""
    if J < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {J}")
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0):
        raise ValueError("chi2_cdf requires x >= 0")
    if J == 2:
        with np.errstate(over="ignore"):
            res = -np.expm1(-0.5 * arr)
    else:
        res = _chi2_p(J, arr.ravel()).reshape(arr.shape)
    if np.ndim(x) == 0:
        return float(res)
    return res


def _wilson_hilferty(J: int, p: np.ndarray) -> np.ndarray:
    # starting point only; Newton steps below do the real work
    z = np.array([_STD_NORMAL.inv_cdf(float(v)) for v in p])
    h = 2.0 / (9.0 * J)
    guess = J * (1.0 - h + z * np.sqrt(h)) ** 3
    return np.maximum(guess, 1e-300)


def _chi2_quantile_array(J: int, p: np.ndarray, upper: float = math.inf) -> np.ndarray:
    """Vectorised inverse of chi2_cdf on (0, 1); ``upper`` is a known bracket."""
    p = np.asarray(p, dtype=float)
    if J == 2:
        x = -2.0 * np.log1p(-p)
        return np.minimum(x, upper)
    s = 0.5 * J
    lo = np.zeros_like(p)
    if math.isfinite(upper):
        hi = np.full_like(p, upper)
    else:
        hi = np.full_like(p, 2.0 * J + 10.0)
        short = _chi2_p(J, hi) < p
        while short.any():
            hi[short] *= 2.0
            short = _chi2_p(J, hi) < p
    # lower-tail expansion P ~ (x/2)^s / Gamma(s+1), else Wilson-Hilferty
    x = 2.0 * np.exp((math.lgamma(s + 1.0) + np.log(p)) / s)
    mid = x > 0.5 * J
    if mid.any():
        x[mid] = _wilson_hilferty(J, p[mid])
    x = np.clip(x, 1e-300, hi)
    active = np.arange(p.size)
    for _ in range(300):
        xa, pa, la, ha = x[active], p[active], lo[active], hi[active]
        f = _chi2_p(J, xa) - pa
        la = np.where(f < 0, xa, la)
        ha = np.where(f > 0, xa, ha)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            x_new = xa - f / np.exp(_chi2_logpdf(J, xa))
        bad = ~np.isfinite(x_new) | (x_new < la) | (x_new > ha)
        x_new = np.where(bad, 0.5 * (la + ha), x_new)
        hit = np.abs(f) <= 1e-15 * pa
        done = hit | (np.abs(x_new - xa) <= 1e-14 * xa)
        x[active] = np.where(hit, xa, x_new)
        lo[active], hi[active] = la, ha
        active = active[~done]
        if active.size == 0:
            break
    return x


def chi2_quantile(J: int, p):
    """x with chi2_cdf(J, x) = p, for 0 < p < 1."""
    if J < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {J}")
    arr = np.asarray(p, dtype=float)
    if np.any((arr <= 0.0) | (arr >= 1.0)):
        raise ValueError("chi2_quantile requires 0 < p < 1")
    res = _chi2_quantile_array(J, arr.ravel()).reshape(arr.shape)
    if np.ndim(p) == 0:
        return float(res)
    return res


def nu(J: int, a: float) -> float:
    """Variance of L_{J,a}: P(chi2_{J+2} <= a) / P(chi2_J <= a)."""
    if not a > 0:
        raise ValueError(f"threshold must be positive, got {a}")
    if math.isinf(a):
        return 1.0
    num = chi2_cdf(J + 2, a)
    den = chi2_cdf(J, a)
    if den <= 0.0:
        raise ValueError(f"P(chi2_{J} <= {a}) underflows to zero")
    return num / den


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """A random stream fully determined by ``(seed, index)``.

    Streams are derived with ``SeedSequence(seed, spawn_key=path)``, so the
    draws of replication ``r`` never depend on how work is scheduled.
    """

    seed: int
    index: tuple[int, ...] = ()

    def __post_init__(self):
        if isinstance(self.index, int):
            object.__setattr__(self, "index", (self.index,))

    def child(self, j: int) -> "RngStream":
        return RngStream(self.seed, self.index + (int(j),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & ((1 << 64) - 1), spawn_key=self.index)
        return np.random.Generator(np.random.PCG64(ss))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return np.random.default_rng(rng)


# ---------------------------------------------------------------------------
# truncated normal L_{J,a}
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TruncSpec:
    J: int
    a: float

    def __post_init__(self):
        if self.J < 1:
            raise ValueError("J must be a positive integer")
        if not self.a > 0:
            raise ValueError("threshold a must be in (0, inf]")

    @property
    def acceptance(self) -> float:
        return 1.0 if math.isinf(self.a) else chi2_cdf(self.J, self.a)

    @property
    def variance(self) -> float:
        return nu(self.J, self.a)


def sample_trunc_first_coord(spec: TruncSpec, rng, size: int | None = None):
    """Exact draws of D_1 | D'D <= a for D ~ N(0, I_J).

    The squared radius is drawn by inverting the chi-square CDF on
    (0, F(a)); the squared direction cosine is Beta(1/2, (J-1)/2).
    """
    gen = _as_generator(rng)
    n = 1 if size is None else int(size)
    if math.isinf(spec.a):
        out = gen.standard_normal(n)
    else:
        top = spec.acceptance
        if top <= 0.0:
            raise ValueError("acceptance probability underflows to zero")
        u = gen.random(n) * top
        u = np.where(u <= 0.0, np.nextafter(0.0, 1.0), u)
        r2 = _chi2_quantile_array(spec.J, u, upper=spec.a)
        r2 = np.minimum(r2, spec.a)
        if spec.J == 1:
            cos2 = np.ones(n)
        else:
            cos2 = gen.beta(0.5, 0.5 * (spec.J - 1), size=n)
        sign = np.where(gen.random(n) < 0.5, -1.0, 1.0)
        out = sign * np.sqrt(r2 * cos2)
    return float(out[0]) if size is None else out


# ---------------------------------------------------------------------------
# SPD linear algebra
# ---------------------------------------------------------------------------


class SpdMatrix:
    """Symmetric positive-definite matrix with a cached Cholesky factor.

    Pivots at or below ``1e-12 * trace / d`` make the matrix singular; no
    pseudo-inverse is ever attempted.
    """

    def __init__(self, m):
        m = np.atleast_2d(np.asarray(m, dtype=float))
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"matrix must be square, got shape {m.shape}")
        self.d = m.shape[0]
        self.matrix = 0.5 * (m + m.T)
        self.floor = 1e-12 * max(np.trace(self.matrix), 0.0) / max(self.d, 1)
        self._lower = None

    @property
    def lower(self) -> np.ndarray:
        if self._lower is None:
            self._lower = self._cholesky()
        return self._lower

    def _cholesky(self) -> np.ndarray:
        a = self.matrix
        d = self.d
        L = np.zeros_like(a)
        for j in range(d):
            v = a[j, j] - L[j, :j] @ L[j, :j]
            if not v > self.floor:
                raise SingularMatrixError(j, float(v), self.floor)
            L[j, j] = math.sqrt(v)
            if j + 1 < d:
                L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
        return L

    @property
    def is_singular(self) -> bool:
        try:
            self.lower
        except SingularMatrixError:
            return True
        return False

    def half_solve(self, b) -> np.ndarray:
        """L^{-1} b along the first axis (b may be a vector or d x m)."""
        L = self.lower
        b = np.asarray(b, dtype=float)
        y = np.array(b, dtype=float, copy=True)
        for i in range(self.d):
            y[i] = (b[i] - L[i, :i] @ y[:i]) / L[i, i]
        return y

    def solve(self, b) -> np.ndarray:
        L = self.lower
        y = self.half_solve(b)
        x = y.copy()
        for i in reversed(range(self.d)):
            x[i] = (y[i] - L[i + 1:, i] @ x[i + 1:]) / L[i, i]
        return x

    def quad(self, v) -> np.ndarray | float:
        """v' m^{-1} v; ``v`` may carry leading batch axes (..., d)."""
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            y = self.half_solve(v)
            return float(max(y @ y, 0.0))
        flat = v.reshape(-1, self.d).T
        y = self.half_solve(flat)
        return np.maximum((y * y).sum(axis=0), 0.0).reshape(v.shape[:-1])


def spd_solve(m, b) -> np.ndarray:
    """Solve m x = b for SPD ``m``; raises SingularMatrixError."""
    mat = m if isinstance(m, SpdMatrix) else SpdMatrix(m)
    return mat.solve(b)


def quad_form(m, v):
    mat = m if isinstance(m, SpdMatrix) else SpdMatrix(m)
    return mat.quad(v)
