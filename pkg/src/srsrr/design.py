"""Sampling and assignment stages: stratified (rejective) sampling,
stratified rerandomization and the single-stage joint variant.

Draws are made in batches: a batch of candidate samples is generated by
partial Fisher-Yates shuffles run in parallel over every stratum of the same
shape, the Mahalanobis criterion is evaluated for the whole batch, and the
first acceptable candidate (in draw order) is kept.  The batch size depends
only on the acceptance level and N, so results depend only on the seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .plan import CheckedPlan, DesignPlan, calibrate_threshold, validate_plan
from .population import Population, group_moments
from .statkit import RngStream, SingularMatrixError, SpdMatrix, _as_generator

__all__ = [
    "DesignFailure",
    "SampleSelection",
    "Assignment",
    "DesignEngine",
    "calibrate_threshold",
    "stratified_sample",
    "mahalanobis_sampling",
    "rejective_sample",
    "mahalanobis_assignment",
    "rerandomize",
    "joint_srsrr",
    "export_draw",
]

_BATCH_CELLS = 4_000_000


@dataclass
class SampleSelection:
    """Accepted sample: ``idx`` lists sampled units grouped by stratum."""

    z: np.ndarray
    idx: np.ndarray
    offsets: np.ndarray
    m_s: float
    attempts: int

    def stratum(self, k: int) -> np.ndarray:
        return self.idx[self.offsets[k]:self.offsets[k + 1]]

    @property
    def codes(self) -> np.ndarray:
        """Stratum code of each entry of ``idx``."""
        return np.repeat(np.arange(self.offsets.size - 1), np.diff(self.offsets))


@dataclass
class Assignment:
    """Treatment indicators aligned with ``SampleSelection.idx``."""

    t: np.ndarray
    m_t: float
    attempts: int

    def full(self, selection: SampleSelection) -> np.ndarray:
        out = np.zeros(selection.z.size, dtype=np.int8)
        out[selection.idx] = self.t
        return out


class DesignFailure(RuntimeError):
    """Rejection loop exhausted ``max_attempts``; carries the best draw."""

    def __init__(self, stage: str, attempts: int, best, best_m: float, threshold: float):
        self.stage = stage
        self.attempts = attempts
        self.best = best
        self.best_m = best_m
        self.threshold = threshold
        super().__init__(
            f"{stage} stage: no acceptable draw in {attempts} attempts "
            f"(best M = {best_m:.4g}, threshold {threshold:.4g})"
        )


def _batch_size(p: float, cells: int) -> int:
    if p >= 1.0:
        return 1
    return int(max(1, min(math.ceil(1.0 / p), _BATCH_CELLS // max(cells, 1))))


def _partial_shuffle(gen: np.random.Generator, B: int, m: int, size: int, take: int) -> np.ndarray:
    """First ``take`` positions of B*m independent partial Fisher-Yates shuffles of range(size)."""
    rows = B * m
    u = gen.random((take, rows))
    flat = np.tile(np.arange(size, dtype=np.int32), rows)
    base = np.arange(rows, dtype=np.int64) * size
    for i in range(min(take, size - 1)):
        j = np.minimum((u[i] * (size - i)).astype(np.int64), size - i - 1)
        pi = base + i
        pj = pi + j
        tmp = flat[pi]
        flat[pi] = flat[pj]
        flat[pj] = tmp
    return flat.reshape(B, m, size)[:, :, :take]


class DesignEngine:
    """Precomputed state for repeated draws from one (population, plan).

    The M_S metric comes from population covariances of W; the M_T metric
    is recomputed from the sampled units for every accepted sample.
    """

    def __init__(self, pop: Population, plan: DesignPlan | CheckedPlan):
        self.pop = pop
        self.plan = plan if isinstance(plan, CheckedPlan) else validate_plan(pop, plan)
        P = self.plan
        self.K = pop.K
        self.weights = pop.weights
        # strata grouped by shape (N_k, n_k, n_k1) for batched shuffles
        shapes: dict[tuple[int, int, int], list[int]] = {}
        for k in range(self.K):
            shapes.setdefault((int(P.N[k]), int(P.n[k]), int(P.n1[k])), []).append(k)
        self.groups = []
        for (Nk, nk, n1k), ks in shapes.items():
            ks = np.array(ks)
            members = np.stack([pop.members[k] for k in ks])
            self.groups.append((Nk, nk, n1k, ks, members))
        self.offsets = np.concatenate([[0], np.cumsum(P.n)]).astype(np.int64)

        self.metric_S = None
        self.metric_S_error = None
        if pop.J1:
            _, _, S2W = group_moments(pop.strata, self.K, pop.w)
            coef = self.weights**2 * (1.0 / P.n - 1.0 / P.N)
            self.metric_S = SpdMatrix(np.einsum("k,kij->ij", coef, S2W))
            try:
                self.metric_S.lower
            except SingularMatrixError as exc:
                self.metric_S_error = exc
            self.wbar = pop.w.mean(axis=0)
        if math.isfinite(P.a_S) and self.metric_S_error is not None:
            raise self.metric_S_error
        self.batch_S = _batch_size(P.p_S, pop.N)

    # ------------------------------------------------------------------ sampling

    def _candidates(self, gen: np.random.Generator, B: int) -> np.ndarray:
        """B candidate samples as unit indices, shape (B, n) in stratum order."""
        out = np.empty((B, self.plan.n_total), dtype=np.int64)
        for Nk, nk, _, ks, members in self.groups:
            local = _partial_shuffle(gen, B, ks.size, Nk, nk)
            units = np.take_along_axis(
                np.broadcast_to(members, (B,) + members.shape), local.astype(np.int64), axis=2
            )
            for j, k in enumerate(ks):
                out[:, self.offsets[k]:self.offsets[k + 1]] = units[:, j, :]
        return out

    def _delta_w(self, cand: np.ndarray) -> np.ndarray:
        """delta_W = sum_k Pi_k mean_k(W_sampled) - Wbar for each row of cand."""
        Wc = self.pop.w[cand]  # (B, n, J1)
        codes = np.repeat(np.arange(self.K), self.plan.n)
        coef = (self.weights / self.plan.n)[codes]
        return np.einsum("i,bij->bj", coef, Wc) - self.wbar

    def m_s_batch(self, cand: np.ndarray) -> np.ndarray:
        if self.metric_S is None or self.metric_S_error is not None:
            return np.full(cand.shape[0], np.nan)
        return np.atleast_1d(self.metric_S.quad(self._delta_w(cand)))

    def _selection(self, units: np.ndarray, m_s: float, attempts: int) -> SampleSelection:
        z = np.zeros(self.pop.N, dtype=np.int8)
        z[units] = 1
        return SampleSelection(z=z, idx=units.copy(), offsets=self.offsets, m_s=float(m_s), attempts=attempts)

    def sample(self, rng, a_S: float | None = None, max_attempts: int | None = None) -> SampleSelection:
        """Stratified sampling repeated until M_S <= a_S."""
        gen = _as_generator(rng)
        a = self.plan.a_S if a_S is None else a_S
        limit = max_attempts or self.plan.max_attempts_S
        if math.isinf(a):
            cand = self._candidates(gen, 1)
            return self._selection(cand[0], self.m_s_batch(cand)[0], 1)
        B = self.batch_S
        attempts = 0
        best, best_m = None, math.inf
        while attempts < limit:
            size = min(B, limit - attempts)
            cand = self._candidates(gen, size)
            ms = self.m_s_batch(cand)
            ok = np.flatnonzero(ms <= a)
            if ok.size:
                i = int(ok[0])
                return self._selection(cand[i], ms[i], attempts + i + 1)
            j = int(np.argmin(ms))
            if ms[j] < best_m:
                best, best_m = cand[j].copy(), float(ms[j])
            attempts += size
        raise DesignFailure("sampling", attempts, self._selection(best, best_m, attempts), best_m, a)

    def m_s(self, selection: SampleSelection) -> float:
        return float(self.m_s_batch(selection.idx[None, :])[0])

    def srse_m_s(self, rng, draws: int) -> np.ndarray:
        """M_S for ``draws`` independent stratified samples without rejection."""
        gen = _as_generator(rng)
        B = max(1, min(draws, 4_000_000 // max(self.pop.N, 1)))
        out = []
        done = 0
        while done < draws:
            size = min(B, draws - done)
            out.append(self.m_s_batch(self._candidates(gen, size)))
            done += size
        return np.concatenate(out) if out else np.zeros(0)

    # ---------------------------------------------------------------- assignment

    def assignment_metric(self, selection: SampleSelection) -> SpdMatrix:
        """sum_k Pi_k^2 n_k / (n_k1 n_k0) S^2_[k]X|S."""
        P = self.plan
        xs = self.pop.x[selection.idx]
        _, _, S2 = group_moments(selection.codes, self.K, xs)
        coef = self.weights**2 * P.n / (P.n1 * P.n0)
        return SpdMatrix(np.einsum("k,kij->ij", coef, S2))

    def _assign_candidates(self, gen, B: int) -> np.ndarray:
        """B candidate assignments as 0/1 arrays aligned with selection.idx."""
        t = np.zeros((B, self.plan.n_total), dtype=np.int8)
        for _, nk, n1k, ks, _ in self.groups:
            local = _partial_shuffle(gen, B, ks.size, nk, n1k).astype(np.int64)
            base = self.offsets[ks][None, :, None]
            pos = (base + local).reshape(B, -1)
            np.put_along_axis(t, pos, 1, axis=1)
        return t

    def tau_x(self, selection: SampleSelection, t: np.ndarray) -> np.ndarray:
        """tau_X = sum_k Pi_k (Xbar_k1 - Xbar_k0) for each row of t (B, n)."""
        P = self.plan
        codes = selection.codes
        xs = self.pop.x[selection.idx]
        w1 = (self.weights / P.n1)[codes]
        w0 = (self.weights / P.n0)[codes]
        coef = t * (w1 + w0) - w0  # w1 if treated else -w0
        return coef @ xs

    def m_t_batch(self, selection: SampleSelection, t: np.ndarray, metric: SpdMatrix | None) -> np.ndarray:
        if metric is None:
            return np.full(t.shape[0], np.nan)
        return np.atleast_1d(metric.quad(self.tau_x(selection, t)))

    def _metric_or_none(self, selection, required: bool):
        if not self.pop.J2:
            return None
        metric = self.assignment_metric(selection)
        try:
            metric.lower
        except SingularMatrixError:
            if required:
                raise
            return None
        return metric

    def assign(self, selection: SampleSelection, rng, a_T: float | None = None,
               max_attempts: int | None = None) -> Assignment:
        """Stratified complete randomization repeated until M_T <= a_T."""
        gen = _as_generator(rng)
        a = self.plan.a_T if a_T is None else a_T
        limit = max_attempts or self.plan.max_attempts_T
        metric = self._metric_or_none(selection, required=math.isfinite(a))
        if math.isinf(a):
            t = self._assign_candidates(gen, 1)
            return Assignment(t=t[0], m_t=float(self.m_t_batch(selection, t, metric)[0]), attempts=1)
        B = _batch_size(self.plan.p_T, self.plan.n_total)
        attempts = 0
        best, best_m = None, math.inf
        while attempts < limit:
            size = min(B, limit - attempts)
            t = self._assign_candidates(gen, size)
            mt = self.m_t_batch(selection, t, metric)
            ok = np.flatnonzero(mt <= a)
            if ok.size:
                i = int(ok[0])
                return Assignment(t=t[i].copy(), m_t=float(mt[i]), attempts=attempts + i + 1)
            j = int(np.argmin(mt))
            if mt[j] < best_m:
                best, best_m = t[j].copy(), float(mt[j])
            attempts += size
        raise DesignFailure("assignment", attempts, Assignment(best, best_m, attempts), best_m, a)

    def m_t(self, selection: SampleSelection, assignment: Assignment) -> float:
        metric = self._metric_or_none(selection, required=True)
        return float(self.m_t_batch(selection, assignment.t[None, :], metric)[0])

    # ------------------------------------------------------------------ combined

    def draw(self, rng) -> tuple[SampleSelection, Assignment]:
        """Two-stage SRSRR: rejective sampling, then rerandomization."""
        if isinstance(rng, RngStream):
            sel = self.sample(rng.child(0))
            return sel, self.assign(sel, rng.child(1))
        gen = _as_generator(rng)
        sel = self.sample(gen)
        return sel, self.assign(sel, gen)

    def joint(self, rng, max_attempts: int | None = None) -> tuple[SampleSelection, Assignment]:
        """Single-stage variant: redraw (Z, T) together until both criteria hold."""
        gen = _as_generator(rng)
        P = self.plan
        limit = max_attempts or int(math.ceil(50.0 / (P.p_S * P.p_T) - 1e-9))
        best, best_gap = None, math.inf
        for attempt in range(1, limit + 1):
            cand = self._candidates(gen, 1)
            ms = float(self.m_s_batch(cand)[0])
            sel = self._selection(cand[0], ms, attempt)
            t = self._assign_candidates(gen, 1)
            if math.isinf(P.a_S) or ms <= P.a_S:
                metric = self._metric_or_none(sel, required=math.isfinite(P.a_T))
                mt = float(self.m_t_batch(sel, t, metric)[0])
                asg = Assignment(t[0], mt, attempt)
                if math.isinf(P.a_T) or mt <= P.a_T:
                    return sel, asg
                gap = mt / P.a_T
            else:
                asg = Assignment(t[0], math.nan, attempt)
                gap = ms / P.a_S + 1.0
            if gap < best_gap:
                best, best_gap = (sel, asg), gap
        raise DesignFailure("joint", limit, best, best_gap, 1.0)


# ---------------------------------------------------------------------------
# functional surface
# ---------------------------------------------------------------------------


def stratified_sample(pop: Population, plan, rng) -> SampleSelection:
    """Unconditioned stratified simple random sample."""
    return DesignEngine(pop, plan).sample(rng, a_S=math.inf)


def mahalanobis_sampling(pop: Population, moments, selection: SampleSelection) -> float:
    """M_S of a sample; ``moments`` supplies population S^2_[k]W."""
    n = np.diff(selection.offsets).astype(float)
    S2W = moments.cov("w")
    coef = pop.weights**2 * (1.0 / n - 1.0 / pop.sizes)
    metric = SpdMatrix(np.einsum("k,kij->ij", coef, S2W))
    codes = selection.codes
    wbar_s = np.einsum("i,ij->j", (pop.weights / n)[codes], pop.w[selection.idx])
    return metric.quad(wbar_s - pop.w.mean(axis=0))


def rejective_sample(pop: Population, plan, rng) -> SampleSelection:
    return DesignEngine(pop, plan).sample(rng)


def mahalanobis_assignment(pop: Population, selection: SampleSelection, assignment: Assignment) -> float:
    """M_T of an assignment within the given sample."""
    codes = selection.codes
    K = selection.offsets.size - 1
    t = np.asarray(assignment.t)
    n = np.bincount(codes, minlength=K).astype(float)
    n1 = np.bincount(codes, weights=t, minlength=K)
    n0 = n - n1
    xs = pop.x[selection.idx]
    _, _, S2 = group_moments(codes, K, xs)
    metric = SpdMatrix(np.einsum("k,kij->ij", pop.weights**2 * n / (n1 * n0), S2))
    coef = np.where(t == 1, (pop.weights / n1)[codes], -(pop.weights / n0)[codes])
    return metric.quad(coef @ xs)


def rerandomize(pop: Population, selection: SampleSelection, plan, rng) -> Assignment:
    return DesignEngine(pop, plan).assign(selection, rng)


def joint_srsrr(pop: Population, plan, rng) -> tuple[SampleSelection, Assignment]:
    return DesignEngine(pop, plan).joint(rng)


def export_draw(path, pop: Population, selection: SampleSelection, assignment: Assignment | None) -> None:
    """Write one row per unit: unit_id, z, t, attempt_count, m_s, m_t.

    ``attempt_count`` is the total over both stages; the last three columns
    repeat on every row so the file stands alone.
    """
    t = assignment.full(selection) if assignment is not None else np.zeros(pop.N, dtype=np.int8)
    attempts = selection.attempts + (assignment.attempts if assignment is not None else 0)
    m_t = assignment.m_t if assignment is not None else math.nan
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["unit_id", "z", "t", "attempt_count", "m_s", "m_t"])
        for i in range(pop.N):
            wr.writerow([pop.unit_ids[i], int(selection.z[i]), int(t[i]), attempts, repr(selection.m_s), repr(m_t)])
