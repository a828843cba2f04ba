"""Optimal sampling fractions f_[k] and treated proportions e_[k]1.

The SRSE optimum has a closed form; the SRSRR and regression-adjusted
optima are found by alternating fixed-point updates started from it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .population import BLOCKS, StratumMoments
from .statkit import SpdMatrix, nu

__all__ = [
    "AllocationError",
    "AllocationInput",
    "AllocationResult",
    "allocation_objective",
    "arm_score",
    "optimal_srse",
    "optimal_srsrr",
    "optimal_adjusted",
    "optimize",
    "load_moments_csv",
    "save_moments_csv",
]

MODES = ("srse", "srsrr", "srsrr_adjusted")


class AllocationError(ValueError):
    pass


@dataclass
class AllocationInput:
    """Stratum moments and targets for an allocation problem.

    ``S_y1[b]`` / ``S_y0[b]`` hold the (K, J) covariances of block ``b``
    with Y(1) / Y(0); ``S2[b]`` the (K, J, J) covariate covariances.
    ``e1`` fixes the treated proportions for the SRSE solve; when None they
    are optimized too.
    """

    weights: np.ndarray
    sizes: np.ndarray
    S2_1: np.ndarray
    S2_0: np.ndarray
    S2_tau: np.ndarray
    f: float
    S_y1: dict = field(default_factory=dict)
    S_y0: dict = field(default_factory=dict)
    S2: dict = field(default_factory=dict)
    J1: int = 0
    a_S: float = math.inf
    J2: int = 0
    a_T: float = math.inf
    mode: str = "srse"
    e1: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.sizes = np.asarray(self.sizes, dtype=float)
        for name in ("S2_1", "S2_0", "S2_tau"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if not 0.0 < self.f < 1.0:
            raise AllocationError(f"total sampling fraction must lie in (0, 1), got {self.f}")
        if self.mode not in MODES:
            raise AllocationError(f"unknown allocation mode {self.mode!r}")
        need = {"srse": (), "srsrr": ("w", "x"), "srsrr_adjusted": ("e", "c")}[self.mode]
        for b in need:
            if b not in self.S2:
                raise AllocationError(f"mode {self.mode} needs moments for block {b}")

    @property
    def K(self) -> int:
        return self.weights.size

    @classmethod
    def from_moments(cls, m: StratumMoments, f: float, mode: str = "srse", **kw) -> "AllocationInput":
        if m.S2_1 is None:
            raise AllocationError("allocation needs oracle (outcome) moments")
        S_y1, S_y0, S2 = {}, {}, {}
        for b in BLOCKS:
            if b in m.S2 and m.S2[b].shape[1]:
                S2[b] = np.asarray(m.S2[b])
                S_y1[b] = np.asarray(m.cross[(b, "1")])
                S_y0[b] = np.asarray(m.cross[(b, "0")])
        J1 = S2["w"].shape[1] if "w" in S2 else 0
        J2 = S2["x"].shape[1] if "x" in S2 else 0
        return cls(weights=m.weights, sizes=m.sizes, S2_1=m.S2_1, S2_0=m.S2_0, S2_tau=m.S2_tau,
                   f=f, S_y1=S_y1, S_y0=S_y0, S2=S2, J1=J1, J2=J2, mode=mode, **kw)

    def with_mode(self, mode: str) -> "AllocationInput":
        kw = dict(self.__dict__)
        kw["mode"] = mode
        return AllocationInput(**kw)


@dataclass
class AllocationResult:
    f_k: np.ndarray
    e1: np.ndarray
    iterations: int
    converged: bool
    objective: float
    history: list = field(default_factory=list)
    clipped: bool = False
    non_monotone: bool = False
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "f_k": self.f_k.tolist(), "e1": self.e1.tolist(), "iterations": self.iterations,
            "converged": self.converged, "objective": self.objective, "history": list(self.history),
            "clipped": self.clipped, "non_monotone": self.non_monotone, "notes": list(self.notes),
        }


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def _blocks(inp: AllocationInput, f_k, e1, samp: str, asg: str):
    """(V_tt, V_Bt, V_BB) for the sampling block and assignment block at (f_k, e1)."""
    e0 = 1.0 - e1
    Pi, f = inp.weights, inp.f
    scale = Pi * f / f_k  # Pi^2 / pi
    V_tt = float(scale @ (inp.S2_1 / e1 + inp.S2_0 / e0 - f_k * inp.S2_tau))
    out = {"V_tt": V_tt}
    if samp in inp.S2:
        c = scale * (1.0 - f_k)
        S_tau = inp.S_y1[samp] - inp.S_y0[samp]
        out["s"] = (np.einsum("k,kj->j", c, S_tau), np.einsum("k,kij->ij", c, inp.S2[samp]))
    if asg in inp.S2:
        out["a"] = (
            np.einsum("k,kj->j", scale, inp.S_y1[asg] / e1[:, None] + inp.S_y0[asg] / e0[:, None]),
            np.einsum("k,kij->ij", scale / (e1 * e0), inp.S2[asg]),
        )
    return out


def _nus(inp: AllocationInput) -> tuple[float, float]:
    n1 = nu(inp.J1, inp.a_S) if inp.J1 and math.isfinite(inp.a_S) else 1.0
    n2 = nu(inp.J2, inp.a_T) if inp.J2 and math.isfinite(inp.a_T) else 1.0
    return n1, n2


def allocation_objective(inp: AllocationInput, f_k, e1, mode: str | None = None) -> float:
    """Asymptotic variance of sqrt(n)(estimator - tau) at the allocation."""
    mode = mode or inp.mode
    f_k = np.asarray(f_k, dtype=float)
    e1 = np.asarray(e1, dtype=float)
    if mode == "srse":
        return _blocks(inp, f_k, e1, "", "")["V_tt"]
    if mode == "srsrr":
        c1, c2 = (1.0 - v for v in _nus(inp))
        b = _blocks(inp, f_k, e1, "w", "x")
    else:
        c1 = c2 = 1.0
        b = _blocks(inp, f_k, e1, "e", "c")
    val = b["V_tt"]
    if "s" in b:
        val -= c1 * SpdMatrix(b["s"][1]).quad(b["s"][0])
    if "a" in b:
        val -= c2 * SpdMatrix(b["a"][1]).quad(b["a"][0])
    return float(val)


# ---------------------------------------------------------------------------
# feasibility
# ---------------------------------------------------------------------------


def _clip(inp: AllocationInput, f_k: np.ndarray, e1: np.ndarray) -> tuple[np.ndarray, bool]:
    """Clip f_k into [f_min, 1] and restore sum_k Pi_k f_k = f."""
    e_min = np.minimum(e1, 1.0 - e1)
    lo = np.minimum(4.0 / (inp.sizes * e_min), 1.0)
    hi = np.ones_like(f_k)
    if inp.weights @ lo > inp.f + 1e-12:
        raise AllocationError("total sampling fraction too small for >= 2 units per arm in every stratum")
    f_k = np.asarray(f_k, dtype=float)
    clipped = bool(np.any(f_k < lo) or np.any(f_k > hi))
    fixed = np.zeros(f_k.size, dtype=bool)
    out = f_k.copy()
    for _ in range(2 * f_k.size + 2):
        free = ~fixed
        budget = inp.f - inp.weights[fixed] @ out[fixed]
        mass = inp.weights[free] @ f_k[free]
        if mass <= 0:
            break
        out[free] = f_k[free] * budget / mass
        low, high = free & (out < lo), free & (out > hi)
        if not (low.any() or high.any()):
            break
        clipped = True
        out[low] = lo[low]
        out[high] = hi[high]
        fixed |= low | high
    return out, clipped


def _normalize(inp: AllocationInput, A: np.ndarray) -> np.ndarray:
    return inp.f * A / float(inp.weights @ A)


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def _srse_fractions(inp: AllocationInput, e1: np.ndarray) -> np.ndarray:
    return _normalize(inp, np.sqrt(inp.S2_1 / e1 + inp.S2_0 / (1.0 - e1)))


def optimal_srse(inp: AllocationInput) -> AllocationResult:
    """Closed-form optimum of the SRSE variance.

    e_[k]1 = S_[k]1 / (S_[k]1 + S_[k]0) unless fixed by ``inp.e1``, and
    f_[k] proportional to (S^2_1 / e_1 + S^2_0 / e_0)^{1/2}.
    """
    s1, s0 = np.sqrt(np.maximum(inp.S2_1, 0)), np.sqrt(np.maximum(inp.S2_0, 0))
    if inp.e1 is None:
        dead = (s1 + s0) == 0
        if dead.any():
            raise AllocationError(f"zero outcome variance in both arms of stratum {int(np.flatnonzero(dead)[0])}")
        e1 = s1 / (s1 + s0)
    else:
        e1 = np.broadcast_to(np.asarray(inp.e1, dtype=float), (inp.K,)).copy()
    notes = []
    if np.any((e1 <= 0) | (e1 >= 1)):
        notes.append("treated proportion at the boundary; clipped into [0.01, 0.99]")
        e1 = np.clip(e1, 0.01, 0.99)
    f_k, clipped = _clip(inp, _srse_fractions(inp, e1), e1)
    obj = allocation_objective(inp, f_k, e1, "srse")
    return AllocationResult(f_k=f_k, e1=e1, iterations=0, converged=True, objective=obj,
                            history=[obj], clipped=clipped, notes=notes)


def arm_score(S2_t, quad, cross):
    """|S^2_t + quad - 2 cross|^{1/2}, the a_[k]t / b_[k]t term of the e update."""
    return np.sqrt(np.abs(np.asarray(S2_t) + quad - 2.0 * np.asarray(cross)))


def _fixed_point(inp: AllocationInput, mode: str, max_iter: int, tol: float) -> AllocationResult:
    start = optimal_srse(inp.with_mode("srse") if inp.mode != "srse" else inp)
    f_k, e1 = start.f_k.copy(), start.e1.copy()
    if mode == "srsrr":
        samp, asg = "w", "x"
        c1, c2 = (1.0 - v for v in _nus(inp))
    else:
        samp, asg = "e", "c"
        c1 = c2 = 1.0
    history = [allocation_objective(inp, f_k, e1, mode)]
    clipped = start.clipped
    notes = list(start.notes)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        e0 = 1.0 - e1
        b = _blocks(inp, f_k, e1, samp, asg)
        A2 = inp.S2_1 / e1 + inp.S2_0 / e0
        quad = cross1 = cross0 = np.zeros(inp.K)
        if "s" in b:
            beta = SpdMatrix(b["s"][1]).solve(b["s"][0])
            S_tau = inp.S_y1[samp] - inp.S_y0[samp]
            A2 = A2 - 2 * c1 * S_tau @ beta + c1 * np.einsum("i,kij,j->k", beta, inp.S2[samp], beta)
        if "a" in b:
            beta = SpdMatrix(b["a"][1]).solve(b["a"][0])
            quad = c2 * np.einsum("i,kij,j->k", beta, inp.S2[asg], beta)
            cross1, cross0 = c2 * (inp.S_y1[asg] @ beta), c2 * (inp.S_y0[asg] @ beta)
            A2 = A2 - 2 * (cross1 / e1 + cross0 / e0) + quad / (e1 * e0)
        if np.any(A2 < 0):
            notes.append(f"iteration {it}: negative A_k^2 truncated at 0")
        A = np.sqrt(np.maximum(A2, 0.0))
        a1 = arm_score(inp.S2_1, quad, cross1)
        a0 = arm_score(inp.S2_0, quad, cross0)
        e_new = a1 / (a1 + a0)
        e_new = np.clip(e_new, 0.01, 0.99)
        f_new, clip_now = _clip(inp, _normalize(inp, A), e_new)
        clipped |= clip_now
        change = max(np.max(np.abs(f_new - f_k)), np.max(np.abs(e_new - e1)))
        f_k, e1 = f_new, e_new
        history.append(allocation_objective(inp, f_k, e1, mode))
        if change <= tol:
            converged = True
            break
    non_monotone = any(b > a + 1e-12 * abs(a) for a, b in zip(history, history[1:]))
    if non_monotone:
        notes.append("objective increased between some iterations")
    return AllocationResult(f_k=f_k, e1=e1, iterations=it, converged=converged, objective=history[-1],
                            history=history, clipped=clipped, non_monotone=non_monotone, notes=notes)


def optimal_srsrr(inp: AllocationInput, max_iter: int = 500, tol: float = 1e-8) -> AllocationResult:
    """Alternating updates f_k = f A_k / sum Pi A, e_kt = a_kt / (a_k1 + a_k0)."""
    return _fixed_point(inp, "srsrr", max_iter, tol)


def optimal_adjusted(inp: AllocationInput, max_iter: int = 500, tol: float = 1e-8) -> AllocationResult:
    """Same scheme for the adjusted estimator, with E/C blocks and no nu factors."""
    return _fixed_point(inp, "srsrr_adjusted", max_iter, tol)


def optimize(inp: AllocationInput) -> AllocationResult:
    return {"srse": optimal_srse, "srsrr": optimal_srsrr, "srsrr_adjusted": optimal_adjusted}[inp.mode](inp)


# ---------------------------------------------------------------------------
# moments files
# ---------------------------------------------------------------------------


def _moment_columns(dims: dict[str, int]) -> list[str]:
    cols = ["stratum", "N", "S2_1", "S2_0", "S2_tau"]
    for b in BLOCKS:
        J = dims.get(b, 0)
        cols += [f"S_{b}{j + 1}_1" for j in range(J)]
        cols += [f"S_{b}{j + 1}_0" for j in range(J)]
        cols += [f"S2_{b}{i + 1}{j + 1}" for i in range(J) for j in range(i, J)]
    return cols


def save_moments_csv(path, inp: AllocationInput, labels=None) -> None:
    """One row per stratum: N, outcome variances and covariate blocks."""
    dims = {b: inp.S2[b].shape[1] for b in inp.S2}
    cols = _moment_columns(dims)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for k in range(inp.K):
            row = [labels[k] if labels else k + 1, int(inp.sizes[k]),
                   repr(float(inp.S2_1[k])), repr(float(inp.S2_0[k])), repr(float(inp.S2_tau[k]))]
            for b in BLOCKS:
                if b not in dims:
                    continue
                J = dims[b]
                row += [repr(float(v)) for v in inp.S_y1[b][k]]
                row += [repr(float(v)) for v in inp.S_y0[b][k]]
                row += [repr(float(inp.S2[b][k, i, j])) for i in range(J) for j in range(i, J)]
            wr.writerow(row)


def load_moments_csv(path, f: float, mode: str = "srse", **kw) -> AllocationInput:
    """Read a per-stratum moments file written by ``save_moments_csv``.

    Stratum weights are N_[k] / sum N.
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise AllocationError("moments file is empty")
    header = list(rows[0].keys())
    for col in ("stratum", "N", "S2_1", "S2_0", "S2_tau"):
        if col not in header:
            raise AllocationError(f"moments file lacks column {col}")
    dims = {}
    for b in BLOCKS:
        J = 0
        while f"S_{b}{J + 1}_1" in header:
            J += 1
        if J:
            dims[b] = J
    unknown = set(header) - set(_moment_columns(dims))
    if unknown:
        raise AllocationError(f"unknown moments columns: {sorted(unknown)}")

    def col(name):
        try:
            return np.array([float(r[name]) for r in rows])
        except (TypeError, ValueError):
            raise AllocationError(f"non-numeric entry in column {name}") from None

    sizes = col("N")
    S_y1, S_y0, S2 = {}, {}, {}
    for b, J in dims.items():
        S_y1[b] = np.column_stack([col(f"S_{b}{j + 1}_1") for j in range(J)])
        S_y0[b] = np.column_stack([col(f"S_{b}{j + 1}_0") for j in range(J)])
        M = np.zeros((len(rows), J, J))
        for i in range(J):
            for j in range(i, J):
                M[:, i, j] = M[:, j, i] = col(f"S2_{b}{i + 1}{j + 1}")
        S2[b] = M
    return AllocationInput(
        weights=sizes / sizes.sum(), sizes=sizes, S2_1=col("S2_1"), S2_0=col("S2_0"), S2_tau=col("S2_tau"),
        f=f, S_y1=S_y1, S_y0=S_y0, S2=S2, J1=dims.get("w", 0), J2=dims.get("x", 0), mode=mode, **kw,
    )
