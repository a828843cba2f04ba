"""Single-stage versus two-stage SRSRR on populations small enough to enumerate.

The single-stage design is uniform over the set M of (z, t) pairs passing
both balance checks.  The two-stage design draws z uniformly among the
accepted samples and then t uniformly among the acceptable assignments
for that z.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .plan import CheckedPlan, DesignPlan, validate_plan
from .population import Population
from .statkit import _as_generator

__all__ = [
    "EquivalenceResult",
    "DesignSpace",
    "equivalence_probe",
    "tiny_population",
    "tiny_plan",
    "TINY_LAYOUTS",
    "MAX_EXACT_CELLS",
]

MAX_EXACT_CELLS = 500_000_000
MAX_TABLE_CELLS = 5_000_000
_CHUNK_CELLS = 4_000_000
_QUANTILE_BINS = 1 << 20

# N -> (stratum sizes, n_k, n_k1); the stratum count grows with N
TINY_LAYOUTS = {
    8: ((4, 4), 3, 1),
    16: ((4,) * 4, 3, 1),
    32: ((4,) * 8, 3, 1),
}


def tiny_population(N: int, rng=0, effect: float = 1.0) -> Population:
    """Population on one of the ``TINY_LAYOUTS`` with W = X1 and X = (X1, X2)."""
    sizes, _, _ = TINY_LAYOUTS[N]
    gen = _as_generator(rng)
    strata = np.repeat(np.arange(len(sizes)), sizes)
    x = gen.standard_normal((N, 2))
    y0 = x.sum(axis=1) + 0.5 * gen.standard_normal(N)
    y1 = y0 + effect + 0.5 * x[:, 0] + 0.3 * gen.standard_normal(N)
    return Population(strata, w=x[:, :1], x=x, y1=y1, y0=y0)


def tiny_plan(N: int, **kw) -> DesignPlan:
    sizes, nk, n1k = TINY_LAYOUTS[N]
    K = len(sizes)
    return DesignPlan(n=(nk,) * K, n1=(n1k,) * K, min_arm=1, **kw)


def _subsets(members: np.ndarray, nk: int, n1k: int):
    """Unit indices of every size-nk subset (S, nk) and every arm split (A, nk)."""
    subs = np.array(list(itertools.combinations(range(members.size), nk)), dtype=np.int64)
    arms = np.array(list(itertools.combinations(range(nk), n1k)), dtype=np.int64)
    treat = np.zeros((arms.shape[0], nk), dtype=bool)
    np.put_along_axis(treat, arms, True, axis=1)
    return members[subs], treat


class DesignSpace:
    """Every (z, t) of a stratified design, factorized by stratum.

    Samples z are indexed in mixed radix over per-stratum subsets (first
    stratum most significant); assignments t likewise over per-stratum arm
    splits.  M_S is held for every z; M_T and tau_hat are produced in
    chunks of rows so that large spaces stream through bounded memory.
    """

    def __init__(self, pop: Population, plan: DesignPlan | CheckedPlan, max_cells: int = MAX_EXACT_CELLS):
        P = plan if isinstance(plan, CheckedPlan) else validate_plan(pop, plan)
        if not pop.has_oracle:
            raise ValueError("enumeration needs both potential outcomes")
        K = pop.K
        self.S_k = [math.comb(int(P.N[k]), int(P.n[k])) for k in range(K)]
        self.A_k = [math.comb(int(P.n[k]), int(P.n1[k])) for k in range(K)]
        self.Z, self.T = math.prod(self.S_k), math.prod(self.A_k)
        if self.Z * self.T > max_cells:
            raise ValueError(f"design space has {self.Z * self.T} (z, t) pairs; exact mode allows at most {max_cells}")
        self.tau = pop.tau
        Pi = pop.weights
        J1, J2 = pop.J1, pop.J2
        self.J2 = J2
        self._tx, self._th = [], []
        dW = np.zeros((1, J1))
        S2X = np.zeros((1, J2, J2))
        for k in range(K):
            nk, n1k = int(P.n[k]), int(P.n1[k])
            n0k = nk - n1k
            units, treat = _subsets(pop.members[k], nk, n1k)
            if J1:
                dk = Pi[k] * pop.w[units].mean(axis=1)
                dW = (dW[:, None, :] + dk[None]).reshape(-1, J1)
            if J2:
                xk = pop.x[units]  # (S, nk, J2)
                xc = xk - xk.mean(axis=1, keepdims=True)
                s2 = np.einsum("snj,snl->sjl", xc, xc) / (nk - 1)
                S2X = (S2X[:, None] + Pi[k] ** 2 * nk / (n1k * n0k) * s2[None]).reshape(-1, J2, J2)
                arm = treat / n1k - (~treat) / n0k  # (A, nk)
                self._tx.append(Pi[k] * np.einsum("an,snj->saj", arm, xk))  # (S, A, J2)
            y1k, y0k = pop.y1[units], pop.y0[units]
            self._th.append(Pi[k] * (y1k @ treat.T / n1k - y0k @ (~treat).T / n0k))  # (S, A)
        if J1:
            coef = Pi**2 * (1.0 / P.n - 1.0 / P.N)
            S2W = np.einsum("k,kij->ij", coef, _stratum_cov(pop.w, pop))
            d = dW - pop.w.mean(axis=0)
            self.m_s = np.einsum("zi,zi->z", d, np.linalg.solve(S2W, d.T).T)
        else:
            self.m_s = np.zeros(self.Z)
        self._S2X = S2X if J2 else None

    @property
    def cells(self) -> int:
        return self.Z * self.T

    def _half(self, idx, ks, tables, c: int, whiten=None) -> np.ndarray:
        """Sum of per-stratum tables over strata ``ks``: (c, prod A_k, d)."""
        d = tables[0].shape[-1] if tables[0].ndim == 3 else 1
        out = np.zeros((c, 1, d))
        for k in ks:
            part = tables[k][idx[k]]
            if part.ndim == 2:
                part = part[..., None]
            if whiten is not None:
                part = np.einsum("zij,zaj->zai", whiten, part)
            out = (out[:, :, None, :] + part[:, None, :, :]).reshape(c, -1, d)
        return out

    def rows(self, z0: int, z1: int) -> tuple[np.ndarray, np.ndarray]:
        """(M_T, tau_hat) for samples z0..z1-1, each of shape (z1 - z0, T).

        Strata are split in two halves so the final (z, t) grid is an outer
        combination of two small partial sums.
        """
        idx = np.unravel_index(np.arange(z0, z1), self.S_k)
        c = z1 - z0
        K = len(self.S_k)
        lo, hi = range(K // 2), range(K // 2, K)
        tA = self._half(idx, lo, self._th, c)[..., 0]
        tB = self._half(idx, hi, self._th, c)[..., 0]
        th = (tA[:, :, None] + tB[:, None, :]).reshape(c, -1)
        if not self.J2:
            return np.zeros_like(th), th
        Linv = np.linalg.inv(np.linalg.cholesky(self._S2X[z0:z1]))
        uA = self._half(idx, lo, self._tx, c, Linv)
        uB = self._half(idx, hi, self._tx, c, Linv)
        nA = np.einsum("zaj,zaj->za", uA, uA)
        nB = np.einsum("zbj,zbj->zb", uB, uB)
        m_t = np.matmul(uA, np.swapaxes(uB, 1, 2))
        m_t *= 2.0
        m_t += nA[:, :, None]
        m_t += nB[:, None, :]
        return m_t.reshape(c, -1), th

    def chunks(self):
        step = max(1, _CHUNK_CELLS // self.T)
        for z0 in range(0, self.Z, step):
            z1 = min(z0 + step, self.Z)
            yield z0, z1, *self.rows(z0, z1)

    def table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Full (M_S, M_T, tau_hat) arrays; only for small spaces."""
        if self.cells > MAX_TABLE_CELLS:
            raise ValueError("design space too large to tabulate")
        m_t, th = self.rows(0, self.Z)
        return self.m_s, m_t, th

    def _bins(self, m: np.ndarray) -> np.ndarray:
        return np.minimum((m / (1.0 + m) * _QUANTILE_BINS).astype(np.int64), _QUANTILE_BINS - 1)

    def m_t_histogram(self) -> np.ndarray:
        counts = np.zeros(_QUANTILE_BINS, dtype=np.int64)
        for _, _, m_t, _ in self.chunks():
            counts += np.bincount(self._bins(m_t).ravel(), minlength=_QUANTILE_BINS)
        return counts

    def m_s_level(self, p: float) -> float:
        if p >= 1:
            return math.inf
        s = np.sort(self.m_s)
        return _nudge(s[max(int(math.ceil(p * s.size)) - 1, 0)])


def _nudge(v: float) -> float:
    # thresholds sit just above an attained value so ties land inside
    return float(v + 1e-9 * max(abs(v), 1e-300))


def _stratum_cov(a: np.ndarray, pop: Population) -> np.ndarray:
    out = np.empty((pop.K, a.shape[1], a.shape[1]))
    for k in range(pop.K):
        out[k] = np.atleast_2d(np.cov(a[pop.members[k]], rowvar=False))
    return out


@dataclass
class EquivalenceResult:
    d_tv: float | None
    bound: float
    mode: str
    a_S: float
    a_T: float
    p_both: float
    p_S: float
    p_T_given_S: float
    accepted_pairs: int = 0
    dead_fraction: float = 0.0
    gap: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _ks(values, probs_a, probs_b) -> float:
    """Largest gap between the two step CDFs of ``values``."""
    o = np.argsort(values, kind="stable")
    v = values[o]
    diff = np.cumsum(probs_a[o] - probs_b[o])
    last = np.r_[v[1:] != v[:-1], True]  # evaluate only after the final tie
    return float(np.max(np.abs(diff[last]))) if v.size else 0.0


def _exact(space: DesignSpace, a_S: float, a_T: float | None, p_T: float | None = None) -> EquivalenceResult:
    """Exact tallies; with ``p_T`` the threshold is the exact p_T-quantile of M_T.

    The quantile search shares the tally pass: cells in bins below the
    quantile's histogram bin are accepted outright and the few cells inside
    it are resolved once the exact value is known.
    """
    acc_s = space.m_s <= a_S
    Z, T = space.Z, space.T
    cnt = np.zeros(Z, dtype=np.int64)
    sum_th = np.zeros(Z)
    sum_th2 = np.zeros(Z)
    small = space.cells <= MAX_TABLE_CELLS
    keep_v, keep_z = [], []
    pending = []
    cut = None
    if p_T is not None and p_T < 1:
        counts = np.cumsum(space.m_t_histogram())
        rank = max(int(math.ceil(p_T * space.cells)) - 1, 0)
        cut = int(np.searchsorted(counts, rank, side="right"))
        before = int(counts[cut - 1]) if cut else 0
    elif p_T is not None:
        a_T = math.inf

    for z0, z1, m_t, th in space.chunks():
        if cut is None:
            acc = m_t <= a_T
        else:
            bins = space._bins(m_t)
            acc = bins < cut
            zz, tt = np.nonzero(bins == cut)
            pending.append((zz + z0, m_t[zz, tt], th[zz, tt]))
        cnt[z0:z1] = acc.sum(axis=1)
        th_acc = np.where(acc, th, 0.0)
        sum_th[z0:z1] = th_acc.sum(axis=1)
        sum_th2[z0:z1] = (th_acc * th).sum(axis=1)
        if small:
            zz, tt = np.nonzero(acc & acc_s[z0:z1, None])
            keep_v.append(th[zz, tt])
            keep_z.append(zz + z0)
    if cut is not None:
        pz = np.concatenate([q[0] for q in pending])
        pm = np.concatenate([q[1] for q in pending])
        pv = np.concatenate([q[2] for q in pending])
        a_T = _nudge(np.sort(pm)[rank - before])
        ok = pm <= a_T
        np.add.at(cnt, pz[ok], 1)
        np.add.at(sum_th, pz[ok], pv[ok])
        np.add.at(sum_th2, pz[ok], pv[ok] ** 2)
        if small:
            sel = ok & acc_s[pz]
            keep_v.append(pv[sel])
            keep_z.append(pz[sel])

    p_T_z = cnt / T
    size_M = int(cnt[acc_s].sum())
    p_S = float(acc_s.mean())
    if size_M == 0:
        return EquivalenceResult(d_tv=1.0, bound=1.0, mode="exact", a_S=a_S, a_T=a_T, p_both=0.0, p_S=p_S,
                                 p_T_given_S=0.0, notes=["no (z, t) pair passes both checks"])
    p_both = size_M / (Z * T)
    p_T_S = float(p_T_z[acc_s].mean())
    bound = float(np.mean(np.abs(p_T_z - p_T_S)) / p_both)

    notes = []
    live = acc_s & (cnt > 0)
    L = int(live.sum())
    dead = float(1.0 - L / acc_s.sum())
    if dead > 0:
        notes.append(f"{dead:.3g} of accepted samples admit no acceptable assignment; two-stage draws restart")
    c = cnt[live].astype(float)
    # per accepted pair: single-stage 1/|M|, two-stage 1/(L m2(z))
    d_tv = 0.5 * float(np.sum(c * np.abs(1.0 / size_M - 1.0 / (L * c))))
    w_two = np.zeros(Z)
    w_two[live] = 1.0 / (L * c)
    mean_s = float(sum_th[acc_s].sum() / size_M)
    mean_t = float(w_two @ sum_th)
    gap = {
        "sum_single": float(c.sum() / size_M), "sum_two": float(np.sum(w_two * cnt)),
        "mean_single": mean_s, "mean_two": mean_t,
        "var_single": float(sum_th2[acc_s].sum() / size_M - mean_s**2),
        "var_two": float(w_two @ sum_th2 - mean_t**2),
    }
    if small:
        v = np.concatenate(keep_v)
        zz = np.concatenate(keep_z)
        gap["ks_tau_hat"] = _ks(v, np.full(v.size, 1.0 / size_M), w_two[zz])
    return EquivalenceResult(d_tv=d_tv, bound=bound, mode="exact", a_S=a_S, a_T=a_T, p_both=p_both, p_S=p_S,
                             p_T_given_S=p_T_S, accepted_pairs=size_M, dead_fraction=dead, gap=gap, notes=notes)


def _monte_carlo(pop: Population, P: CheckedPlan, rng, n_z: int, n_t: int) -> EquivalenceResult:
    """Estimate the bound by nested simulation; d_TV itself is not estimable."""
    from .design import DesignEngine

    eng = DesignEngine(pop, P)
    gen = _as_generator(rng)
    a_S, a_T = P.a_S, P.a_T
    cand = eng._candidates(gen, n_z)
    ms = eng.m_s_batch(cand)
    p_T_z = np.empty(n_z)
    for i in range(n_z):
        sel = eng._selection(cand[i], ms[i], 1)
        metric = eng._metric_or_none(sel, required=False)
        t = eng._assign_candidates(gen, n_t)
        p_T_z[i] = float(np.mean(eng.m_t_batch(sel, t, metric) <= a_T)) if metric is not None else 1.0
    acc = ms <= a_S if math.isfinite(a_S) else np.ones(n_z, dtype=bool)
    if not acc.any():
        return EquivalenceResult(d_tv=None, bound=1.0, mode="monte-carlo", a_S=a_S, a_T=a_T, p_both=0.0,
                                 p_S=0.0, p_T_given_S=0.0, notes=["no simulated sample passed M_S <= a_S"])
    p_T_S = float(p_T_z[acc].mean())
    p_both = float(np.mean(acc * p_T_z))
    bound = float(np.mean(np.abs(p_T_z - p_T_S)) / p_both) if p_both > 0 else 1.0
    return EquivalenceResult(d_tv=None, bound=min(bound, 1.0) if p_both == 0 else bound, mode="monte-carlo",
                             a_S=a_S, a_T=a_T, p_both=p_both, p_S=float(acc.mean()), p_T_given_S=p_T_S,
                             notes=[f"{n_z} samples x {n_t} assignments; includes Monte Carlo noise"])


def equivalence_probe(pop: Population, plan: DesignPlan | CheckedPlan, mode: str = "exact", *,
                      p_S: float | None = None, p_T: float | None = None, rng=0,
                      n_z: int = 2000, n_t: int = 500) -> EquivalenceResult:
    """d_TV between the single- and two-stage designs and its upper bound.

    In exact mode ``p_S``/``p_T`` (when given) choose thresholds whose exact
    acceptance rates match those levels; otherwise the plan's thresholds apply.
    """
    P = plan if isinstance(plan, CheckedPlan) else validate_plan(pop, plan)
    if mode == "exact":
        space = DesignSpace(pop, P)
        a_S = space.m_s_level(p_S) if p_S is not None else P.a_S
        res = _exact(space, a_S, P.a_T, p_T)
        if res.d_tv is not None and not (0.0 <= res.d_tv <= res.bound + 1e-12):
            res.notes.append("d_TV exceeds the bound")
        return res
    if mode == "monte-carlo":
        return _monte_carlo(pop, P, rng, n_z, n_t)
    raise ValueError(f"unknown probe mode {mode!r}")
