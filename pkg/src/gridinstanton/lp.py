"""Bounded-variable simplex, primal with a dual pass for warm starts.

Solves ``min c.x  s.t.  A x = b,  lower <= x <= upper`` where any bound may be
infinite.  The constraint matrix is augmented with one artificial column per
row; artificials are boxed to ``[0, 0]`` so the same composite phase-1 pass
(minimise the sum of bound violations of basic variables) serves both cold
starts from the artificial basis and warm starts from a previous optimal
basis.  Pricing is Dantzig's rule with a fallback to Bland's rule after a run
of degenerate pivots; ties are broken by lowest column index.

A warm start first tries a short dual simplex pass: when only the
right-hand side has moved, the old basis stays dual feasible and a few dual
pivots restore primal feasibility.  Whatever the dual pass leaves unfinished
goes to the primal method.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Basis",
    "LPIterationLimit",
    "LPProblem",
    "LPResult",
    "LPStatus",
    "Tolerances",
    "solve",
]


class LPStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class LPIterationLimit(RuntimeError):
    """Raised when the simplex exceeds its iteration budget."""

    def __init__(self, message, iterations):
        super().__init__(message)
        self.iterations = iterations


@dataclass(frozen=True)
class Tolerances:
    feas_tol: float = 1e-8
    opt_tol: float = 1e-9
    pivot_tol: float = 1e-11
    stall_threshold: int = 50
    refactor_every: int = 64
    clean_after: int = 32
    max_iter: int | None = None


@dataclass
class LPProblem:
    """Equality-form LP with per-variable bounds.

    ``A`` is stored dense; use :meth:`from_triplets` to build it from
    row-major (row, col, value) triplets.
    """

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.lower = np.asarray(self.lower, dtype=float).ravel()
        self.upper = np.asarray(self.upper, dtype=float).ravel()
        n = self.c.size
        if self.A.size == 0:
            self.A = self.A.reshape(self.b.size, n)
        m = self.A.shape[0]
        if self.A.shape[1] != n:
            raise ValueError(f"A has {self.A.shape[1]} columns but c has {n} entries")
        if self.b.size != m:
            raise ValueError(f"b has {self.b.size} entries but A has {m} rows")
        if self.lower.size != n or self.upper.size != n:
            raise ValueError("bounds must have one entry per variable")
        if np.any(np.isnan(self.lower)) or np.any(np.isnan(self.upper)):
            raise ValueError("bounds must not be NaN")
        if np.any(self.lower > self.upper):
            j = int(np.argmax(self.lower > self.upper))
            raise ValueError(f"lower > upper for variable {j}")
        if np.any(self.lower == np.inf) or np.any(self.upper == -np.inf):
            raise ValueError("lower bound +inf or upper bound -inf")

    @classmethod
    def from_triplets(cls, c, rows, cols, vals, b, lower, upper):
        c = np.asarray(c, dtype=float)
        b = np.asarray(b, dtype=float)
        A = np.zeros((b.size, c.size))
        np.add.at(A, (np.asarray(rows, dtype=int), np.asarray(cols, dtype=int)), vals)
        return cls(c, A, b, lower, upper)

    @property
    def shape(self):
        return self.A.shape


@dataclass(frozen=True)
class Basis:
    """Simplex basis over the augmented ``[A | I]`` column space.

    ``basic`` lists the column in each basis position; ``at_upper`` flags the
    nonbasic columns sitting at their upper bound.
    """

    basic: tuple
    at_upper: frozenset = field(default_factory=frozenset)


@dataclass
class LPResult:
    status: LPStatus
    x: np.ndarray
    objective: float
    iterations: int
    basis: Basis | None = None
    basis_inverse: np.ndarray | None = field(default=None, repr=False)
    # rank-one updates applied to basis_inverse since it was last inverted afresh
    inverse_age: int = 0

    @property
    def optimal(self):
        return self.status is LPStatus.OPTIMAL


class _Simplex:
    def __init__(self, problem: LPProblem, tol: Tolerances):
        self.tol = tol
        A = problem.A
        m, n = A.shape
        self.m, self.n = m, n
        self.M = np.hstack([A, np.eye(m)])
        self.b = problem.b
        self.lo = np.concatenate([problem.lower, np.zeros(m)])
        self.hi = np.concatenate([problem.upper, np.zeros(m)])
        self.cost = np.concatenate([problem.c, np.zeros(m)])
        self.fixed = self.lo == self.hi
        self.max_iter = tol.max_iter or 50 * (m + n) + 1000
        self.iterations = 0

    # -- setup -------------------------------------------------------------

    def start(self, basis: Basis | None, binv=None, age=0):
        m, n = self.m, self.n
        ntot = n + m
        self.age = 0
        if basis is not None and len(basis.basic) == m:
            basic = np.asarray(basis.basic, dtype=int)
            at_upper = basis.at_upper
            if np.unique(basic).size == m and basic.min(initial=0) >= 0 and basic.max(initial=0) < ntot:
                if binv is not None and binv.shape == (m, m) and age < self.tol.refactor_every:
                    binv = np.array(binv, dtype=float)  # updated in place below
                    self.age = age
                else:
                    try:
                        binv = np.linalg.inv(self.M[:, basic])
                    except np.linalg.LinAlgError:
                        binv = None
                if binv is not None and np.all(np.isfinite(binv)):
                    self._init_state(basic, at_upper, binv)
                    return
        basic = np.arange(n, n + m)
        self._init_state(basic, frozenset(), np.eye(m))
        self.warm = False

    def _init_state(self, basic, at_upper, binv):
        ntot = self.n + self.m
        self.basic = basic.copy()
        self.is_basic = np.zeros(ntot, dtype=bool)
        self.is_basic[basic] = True
        ups = np.zeros(ntot, dtype=bool)
        if at_upper:
            ups[[j for j in at_upper if 0 <= j < ntot]] = True
        lo_fin, hi_fin = np.isfinite(self.lo), np.isfinite(self.hi)
        x = np.where(ups & hi_fin, self.hi, np.where(lo_fin, self.lo, np.where(hi_fin, self.hi, 0.0)))
        x[basic] = 0.0
        self.x = x
        self.warm = True
        self.binv = binv
        self._recompute_basics()

    def _recompute_basics(self):
        nb = ~self.is_basic
        rhs = self.b - self.M[:, nb] @ self.x[nb]
        self.x[self.basic] = self.binv @ rhs

    def _refactor(self):
        B = self.M[:, self.basic]
        try:
            self.binv = np.linalg.inv(B)
            self.age = 0
        except np.linalg.LinAlgError:  # pragma: no cover - guarded by pivot_tol
            pass
        self._recompute_basics()

    # -- main loop ---------------------------------------------------------

    def run(self):
        tol = self.tol
        ftol = tol.feas_tol
        degenerate_run = 0
        ntot = self.n + self.m
        idx = np.arange(ntot)
        while True:
            xb = self.x[self.basic]
            lob = self.lo[self.basic]
            hib = self.hi[self.basic]
            below = xb < lob - ftol
            above = xb > hib + ftol
            phase1 = bool(below.any() or above.any())
            if phase1:
                cb = above.astype(float) - below.astype(float)
                cn = np.zeros(ntot)
            else:
                cb = self.cost[self.basic]
                cn = self.cost
            y = cb @ self.binv
            d = cn - y @ self.M
            d[self.basic] = 0.0
            xj = self.x
            can_up = (~self.is_basic) & (~self.fixed) & (xj < self.hi - ftol)
            can_down = (~self.is_basic) & (~self.fixed) & (xj > self.lo + ftol)
            improve_up = can_up & (d < -tol.opt_tol)
            improve_down = can_down & (d > tol.opt_tol)
            eligible = improve_up | improve_down
            if not eligible.any():
                if phase1:
                    return LPStatus.INFEASIBLE
                return LPStatus.OPTIMAL

            bland = degenerate_run >= tol.stall_threshold
            if bland:
                j = int(idx[eligible][0])
            else:
                score = np.where(eligible, np.abs(d), -1.0)
                j = int(np.argmax(score))
            direction = 1.0 if improve_up[j] else -1.0

            alpha = self.binv @ self.M[:, j]
            delta = -direction * alpha

            t_best = self.hi[j] - self.lo[j]
            leave = -1
            leave_value = 0.0
            mask = np.abs(delta) > tol.pivot_tol
            if mask.any():
                pos = np.flatnonzero(mask)
                dl = delta[pos]
                xv = xb[pos]
                lo_ = lob[pos]
                hi_ = hib[pos]
                ab = above[pos]
                bl = below[pos]
                # blocking value each basic variable runs into
                target = np.full(pos.size, np.nan)
                dec = dl < 0
                inc = ~dec
                target[dec & ab] = hi_[dec & ab]
                target[dec & ~ab & ~bl] = lo_[dec & ~ab & ~bl]
                target[inc & bl] = lo_[inc & bl]
                target[inc & ~ab & ~bl] = hi_[inc & ~ab & ~bl]
                ok = np.isfinite(target)
                if ok.any():
                    ratios = np.full(pos.size, np.inf)
                    ratios[ok] = np.maximum((target[ok] - xv[ok]) / dl[ok], 0.0)
                    rmin = ratios.min()
                    if rmin < t_best or not np.isfinite(t_best):
                        if np.isfinite(rmin):
                            ties = np.flatnonzero(ratios <= rmin + 1e-12 * (1.0 + rmin))
                            if bland:
                                cols = self.basic[pos[ties]]
                                pick = ties[int(np.argmin(cols))]
                            else:
                                mag = np.abs(dl[ties])
                                best = np.flatnonzero(mag >= mag.max() * (1 - 1e-12))
                                cols = self.basic[pos[ties[best]]]
                                pick = ties[best[int(np.argmin(cols))]]
                            t_best = ratios[pick]
                            leave = int(pos[pick])
                            leave_value = target[pick]

            if not np.isfinite(t_best):
                if phase1:  # pragma: no cover - phase 1 is bounded below
                    raise RuntimeError("unbounded phase-1 direction")
                self._unbounded_direction = (j, direction)
                return LPStatus.UNBOUNDED

            step = t_best
            self.x[self.basic] = xb + step * delta
            if leave < 0:
                # bound flip of the entering variable
                self.x[j] = self.hi[j] if direction > 0 else self.lo[j]
            else:
                self.x[j] = self.x[j] + direction * step
                out = self.basic[leave]
                self.x[out] = leave_value
                piv = alpha[leave]
                row = self.binv[leave] / piv
                self.binv -= np.outer(alpha, row)
                self.binv[leave] = row
                self.basic[leave] = j
                self.is_basic[out] = False
                self.is_basic[j] = True
                self.age += 1
                if self.age >= tol.refactor_every:
                    self._refactor()

            if step <= ftol:
                degenerate_run += 1
            else:
                degenerate_run = 0
            self.iterations += 1
            if self.iterations > self.max_iter:
                raise LPIterationLimit(
                    f"simplex exceeded {self.max_iter} iterations", self.iterations
                )

    def run_dual(self, max_iter):
        """Dual simplex from the current basis.

        Returns the final status, or None when the basis is not dual feasible
        or the pivot budget runs out; the basis is then left for the primal
        method to finish.
        """
        tol = self.tol
        ftol, otol, ptol = tol.feas_tol, tol.opt_tol, tol.pivot_tol
        nb = ~self.is_basic
        d = self.cost - (self.cost[self.basic] @ self.binv) @ self.M
        d[self.basic] = 0.0
        # boxed nonbasics go to the bound that matches their reduced cost
        want_up = nb & ~self.fixed & (d < -otol)
        want_lo = nb & ~self.fixed & (d > otol)
        if np.any(want_up & ~np.isfinite(self.hi)) or np.any(want_lo & ~np.isfinite(self.lo)):
            return None
        if want_up.any() or want_lo.any():
            self.x[want_up] = self.hi[want_up]
            self.x[want_lo] = self.lo[want_lo]
            self._recompute_basics()
        for _ in range(max_iter):
            xb = self.x[self.basic]
            lob = self.lo[self.basic]
            hib = self.hi[self.basic]
            infeas = np.maximum(lob - xb, xb - hib)
            r = int(np.argmax(infeas))
            if infeas[r] <= ftol:
                return LPStatus.OPTIMAL
            going_up = xb[r] < lob[r]
            target = lob[r] if going_up else hib[r]
            row = self.binv[r] @ self.M
            nb = ~self.is_basic & ~self.fixed
            can_inc = nb & (self.x < self.hi - ftol)
            can_dec = nb & (self.x > self.lo + ftol)
            if going_up:
                cand = (can_inc & (row < -ptol)) | (can_dec & (row > ptol))
            else:
                cand = (can_inc & (row > ptol)) | (can_dec & (row < -ptol))
            if not cand.any():
                return LPStatus.INFEASIBLE
            js = np.flatnonzero(cand)
            ratios = np.abs(d[js]) / np.abs(row[js])
            rmin = ratios.min()
            ties = js[ratios <= rmin + 1e-12 * (1.0 + rmin)]
            mag = np.abs(row[ties])
            q = int(ties[np.flatnonzero(mag >= mag.max() * (1 - 1e-12))[0]])

            alpha = self.binv @ self.M[:, q]
            theta = (xb[r] - target) / alpha[r]
            self.x[self.basic] = xb - theta * alpha
            self.x[q] += theta
            out = self.basic[r]
            self.x[out] = target
            piv = alpha[r]
            brow = self.binv[r] / piv
            self.binv -= np.outer(alpha, brow)
            self.binv[r] = brow
            self.basic[r] = q
            self.is_basic[out] = False
            self.is_basic[q] = True
            self.age += 1
            self.iterations += 1
            if self.age >= tol.refactor_every:
                self._refactor()
                d = self.cost - (self.cost[self.basic] @ self.binv) @ self.M
                d[self.basic] = 0.0
            else:
                d = d - (d[q] / row[q]) * row
                d[self.basic] = 0.0
        return None

    def basis(self):
        nb = np.flatnonzero(~self.is_basic)
        ups = nb[(self.x[nb] == self.hi[nb]) & (self.lo[nb] != self.hi[nb])]
        return Basis(tuple(int(k) for k in self.basic), frozenset(int(k) for k in ups))


def solve(problem: LPProblem, tol: Tolerances | None = None, basis: Basis | None = None,
          basis_inverse=None, inverse_age=0) -> LPResult:
    """Solve ``problem``; ``basis`` optionally warm-starts from a previous solve.

    ``basis_inverse`` and ``inverse_age`` from that solve's result skip the
    initial factorisation; the inverse is rebuilt once it has absorbed
    ``refactor_every`` updates.  Raises :class:`LPIterationLimit` instead of
    returning a partial answer.
    """
    tol = tol or Tolerances()
    sx = _Simplex(problem, tol)
    sx.start(basis, basis_inverse, inverse_age)
    status = None
    if sx.warm:
        # a warm basis from the same c and A is usually dual feasible
        status = sx.run_dual(max(50, 2 * sx.m))
    if status is not LPStatus.OPTIMAL:
        status = sx.run()
    if status is LPStatus.OPTIMAL and sx.age >= tol.clean_after:
        # clean-up from a fresh factorisation once updates have piled up
        sx._refactor()
        xb = sx.x[sx.basic]
        if np.any(xb < sx.lo[sx.basic] - tol.feas_tol) or np.any(xb > sx.hi[sx.basic] + tol.feas_tol):
            status = sx.run()
            sx._refactor()
    n = problem.c.size
    x = sx.x[:n].copy()
    if status is LPStatus.OPTIMAL:
        objective = float(problem.c @ x)
    elif status is LPStatus.UNBOUNDED:
        objective = -np.inf
    else:
        objective = np.nan
    return LPResult(
        status=status,
        x=x,
        objective=objective,
        iterations=sx.iterations,
        basis=sx.basis() if status is LPStatus.OPTIMAL else None,
        basis_inverse=sx.binv if status is LPStatus.OPTIMAL else None,
        inverse_age=sx.age,
    )
