"""Load-shedding linear program for a DC grid and SAT/UNSAT classification.

Variables are ordered ``[f (per line) | theta (per non-reference bus) |
p (per generator) | s (per load)]``.  Rows are the nodal flow balances
followed by the phase/flow coupling of every line.  One phase per connected
component is pinned to zero and dropped from the variable vector.

:class:`ShedEvaluator` is the fast path used by the search.  The objective
and constraint matrix do not depend on the demand, so an optimal basis stays
dual feasible for every demand vector and is optimal wherever it is primal
feasible.  The evaluator keeps a small most-recently-used cache of such
bases, each stored as an affine map from demand to basic values.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .grid import Grid, connected_components
from .lp import Basis, LPProblem, LPStatus, Tolerances, solve

__all__ = [
    "GenStatus",
    "LPDCLayout",
    "SatStatus",
    "ShedEvaluator",
    "ShedResult",
    "build_lp",
    "evaluate",
    "is_sat",
    "shed_tolerance",
]

SAT_TOL_REL = 1e-6
GEN_TOL_REL = 1e-6
SHED_TOL_REL = 1e-7


class GenStatus(str, enum.Enum):
    IDLE = "idle"
    NORMAL = "normal"
    AT_CAPACITY = "at_capacity"
    UNBOUNDED = "unbounded"


def shed_tolerance(grid: Grid) -> float:
    return SHED_TOL_REL * max(1.0, float(np.sum(grid.nominal_demand)))


@dataclass(frozen=True)
class SatStatus:
    is_sat: bool
    total_shed: float

    def __bool__(self):
        return self.is_sat


@dataclass(frozen=True, eq=False)
class ShedResult:
    demand: np.ndarray
    total_shed: float
    shed: np.ndarray
    flows: np.ndarray
    phases: np.ndarray
    generation: np.ndarray
    saturated_lines: tuple
    generator_status: tuple
    is_sat: bool

    def to_dict(self, grid: Grid) -> dict:
        return {
            "sat": self.is_sat,
            "total_shed": self.total_shed,
            "demand": {str(b): float(v) for b, v in zip(grid.load_buses, self.demand)},
            "shed": {str(b): float(v) for b, v in zip(grid.load_buses, self.shed)},
            "flows": {grid.line_label(k): float(v) for k, v in enumerate(self.flows)},
            "phases": {str(b): float(v) for b, v in zip(grid.buses, self.phases)},
            "generation": {str(b): float(v) for b, v in zip(grid.gen_buses, self.generation)},
            "saturated_lines": [grid.line_label(k) for k in self.saturated_lines],
            "generator_status": {
                str(b): st.value for b, st in zip(grid.gen_buses, self.generator_status)
            },
        }


class LPDCLayout:
    """Index bookkeeping for the load-shedding LP of one grid."""

    def __init__(self, grid: Grid, reference=None, dc_coupling=True):
        self.grid = grid
        self.dc_coupling = dc_coupling
        comps = connected_components(grid)
        if reference is None:
            refs = [c[0] for c in comps]
        else:
            refs = [int(r) for r in np.atleast_1d(reference)]
            for comp in comps:
                if sum(r in comp for r in refs) != 1:
                    raise ValueError(f"need exactly one reference bus in component starting at {comp[0]}")
        self.reference = tuple(sorted(refs))
        ref_idx = {grid.bus_index(r) for r in refs}
        nb, nl, ng, nd = grid.n_buses, grid.n_lines, grid.n_gens, grid.n_loads
        if dc_coupling:
            self.theta_buses = np.array([i for i in range(nb) if i not in ref_idx], dtype=int)
        else:
            self.theta_buses = np.zeros(0, dtype=int)
        nt = self.theta_buses.size
        self.f = slice(0, nl)
        self.theta = slice(nl, nl + nt)
        self.p = slice(nl + nt, nl + nt + ng)
        self.s = slice(nl + nt + ng, nl + nt + ng + nd)
        self.n_vars = nl + nt + ng + nd
        self.n_rows = nb + (nl if dc_coupling else 0)

        rows, cols, vals = [], [], []
        frm = np.array([grid.bus_index(a) for a, _ in grid.lines], dtype=int)
        to = np.array([grid.bus_index(b) for _, b in grid.lines], dtype=int)
        self.line_from, self.line_to = frm, to
        for k in range(nl):
            rows += [frm[k], to[k]]
            cols += [k, k]
            vals += [1.0, -1.0]
        self.gen_idx = np.array([grid.bus_index(b) for b in grid.gen_buses], dtype=int)
        self.load_idx = np.array([grid.bus_index(b) for b in grid.load_buses], dtype=int)
        for g, i in enumerate(self.gen_idx):
            rows.append(i)
            cols.append(self.p.start + g)
            vals.append(-1.0)
        for d, i in enumerate(self.load_idx):
            rows.append(i)
            cols.append(self.s.start + d)
            vals.append(-1.0)
        if dc_coupling:
            theta_col = {int(i): self.theta.start + t for t, i in enumerate(self.theta_buses)}
            for k in range(nl):
                r = nb + k
                if frm[k] in theta_col:
                    rows.append(r), cols.append(theta_col[frm[k]]), vals.append(1.0)
                if to[k] in theta_col:
                    rows.append(r), cols.append(theta_col[to[k]]), vals.append(-1.0)
                rows.append(r), cols.append(k), vals.append(-float(grid.reactance[k]))
        self.A = np.zeros((self.n_rows, self.n_vars))
        np.add.at(self.A, (np.array(rows, dtype=int), np.array(cols, dtype=int)), vals)
        self.c = np.zeros(self.n_vars)
        self.c[self.s] = 1.0
        # demand enters b (load rows) and the shed upper bounds
        self.b_of_d = np.zeros((self.n_rows, nd))
        self.b_of_d[self.load_idx, np.arange(nd)] = -1.0
        lower = np.zeros(self.n_vars)
        upper = np.zeros(self.n_vars)
        lower[self.f] = -grid.line_capacity
        upper[self.f] = grid.line_capacity
        lower[self.theta] = -np.inf
        upper[self.theta] = np.inf
        upper[self.p] = grid.gen_capacity
        self.lower0, self.upper0 = lower, upper
        self._aug = None

    def augmented(self):
        """``([A | I], cost, lower, upper)`` over structural plus artificial columns."""
        if self._aug is None:
            m = self.n_rows
            self._aug = (
                np.hstack([self.A, np.eye(m)]),
                np.concatenate([self.c, np.zeros(m)]),
                np.concatenate([self.lower0, np.zeros(m)]),
                np.concatenate([self.upper0, np.zeros(m)]),
            )
        return self._aug

    def problem(self, demand) -> LPProblem:
        d = np.asarray(demand, dtype=float)
        upper = self.upper0.copy()
        upper[self.s] = d
        return LPProblem(self.c, self.A, self.b_of_d @ d, self.lower0, upper)

    def phases(self, x):
        th = np.zeros(self.grid.n_buses)
        th[self.theta_buses] = x[self.theta]
        if not self.dc_coupling:
            th[:] = np.nan
        return th


def build_lp(grid: Grid, demand, reference=None, dc_coupling=True) -> LPProblem:
    """LP minimising total shed; ``dc_coupling=False`` drops the phase rows."""
    d = _check_demand(grid, demand)
    return LPDCLayout(grid, reference, dc_coupling).problem(d)


def _check_demand(grid, demand):
    d = np.asarray(demand, dtype=float).ravel()
    if d.size != grid.n_loads:
        raise ValueError(f"demand has {d.size} entries, grid has {grid.n_loads} loads")
    if np.any(~np.isfinite(d)) or np.any(d < 0):
        raise ValueError("demand entries must be finite and nonnegative")
    return d


class _Region:
    """Affine map demand -> basic values valid while the basis stays feasible."""

    __slots__ = ("basis", "binv", "h", "G", "lo", "hi_c", "hi_G", "zero_loads", "x0", "xE_cols", "xE_loads", "basic",
                 "shed_g", "shed_h", "s_rows", "s_loads", "age")

    def __init__(self, layout: LPDCLayout, basis: Basis, binv, tol: Tolerances, age=0):
        self.age = age
        m, n = layout.n_rows, layout.n_vars
        nd = layout.grid.n_loads
        M, cost, lo, hi = layout.augmented()
        s0 = layout.s.start
        basic = np.asarray(basis.basic, dtype=int)
        is_basic = np.zeros(n + m, dtype=bool)
        is_basic[basic] = True
        nonbasic = ~is_basic
        at_upper = np.zeros(n + m, dtype=bool)
        if basis.at_upper:
            at_upper[list(basis.at_upper)] = True
        is_s = np.zeros(n + m, dtype=bool)
        is_s[layout.s] = True

        red = cost - (cost[basic] @ binv) @ M
        # nonbasic shed at its upper bound tracks its load; any other nonbasic
        # sits at a fixed bound (free columns at zero)
        s_up = nonbasic & is_s & at_upper
        fixed_val = np.where(at_upper & np.isfinite(hi), hi,
                             np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0)))
        x0 = np.where(nonbasic & ~is_s, fixed_val, 0.0)
        # a shed column whose reduced cost has the wrong sign for its bound
        # (bounds [0, d] collapse when d = 0) is optimal only while its load is zero
        wrong = np.where(at_upper, red > tol.opt_tol, red < -tol.opt_tol)
        zero_loads = np.flatnonzero(nonbasic & is_s & wrong) - s0
        E_cols = np.flatnonzero(s_up)
        E_loads = E_cols - s0
        self.h = binv @ (-(M @ x0))
        ME = np.zeros((m, nd))
        ME[:, E_loads] = M[:, E_cols]
        self.G = binv @ (layout.b_of_d - ME)
        self.lo = lo[basic]
        s_rows = np.flatnonzero(is_s[basic])
        hi_c = hi[basic].copy()
        hi_c[s_rows] = 0.0
        self.hi_c = hi_c
        # basic shed variables: their upper bound is the load they belong to
        self.s_rows = s_rows
        self.s_loads = basic[s_rows] - s0
        hi_G = np.zeros((m, nd))
        hi_G[s_rows, self.s_loads] = 1.0
        self.hi_G = hi_G
        self.zero_loads = zero_loads.astype(int)
        self.basis, self.binv, self.basic = basis, binv, basic
        self.x0 = x0[:n]
        self.xE_cols = E_cols
        self.xE_loads = E_loads
        self.shed_h = float(self.h[s_rows].sum())
        self.shed_g = self.G[s_rows].sum(axis=0)
        self.shed_g[self.xE_loads] += 1.0

    def basics(self, d):
        return self.h + self.G @ d

    def contains(self, d, xb, ftol):
        if self.zero_loads.size and np.any(d[self.zero_loads] > ftol):
            return False
        if np.any(xb < self.lo - ftol):
            return False
        hi = self.hi_c.copy()
        hi[self.s_rows] += d[self.s_loads]
        return not np.any(xb > hi + ftol)

    def contains_many(self, D, ftol):
        """Boolean mask over rows of ``D`` (shape ``(k, n_loads)``)."""
        XB = D @ self.G.T + self.h
        ok = np.all(XB >= self.lo - ftol, axis=1)
        ok &= np.all(XB <= self.hi_c + D @ self.hi_G.T + ftol, axis=1)
        if self.zero_loads.size:
            ok &= np.all(D[:, self.zero_loads] <= ftol, axis=1)
        return ok

    def full_x(self, d, xb):
        x = self.x0.copy()
        x[self.xE_cols] = d[self.xE_loads]
        n = x.size
        inside = self.basic < n
        x[self.basic[inside]] = xb[inside]
        return x


class ShedEvaluator:
    """Repeated load-shedding solves on one grid.

    Not thread-safe: each search run should own its evaluator.
    """

    def __init__(self, grid: Grid, tol: Tolerances | None = None, max_regions=48,
                 reference=None, dc_coupling=True):
        self.grid = grid
        self.tol = tol or Tolerances()
        self.layout = LPDCLayout(grid, reference, dc_coupling)
        self.shed_tol = shed_tolerance(grid)
        self.max_regions = max_regions
        self._regions: list[_Region] = []
        self.n_solves = 0
        self.n_hits = 0

    def _lookup(self, d):
        ftol = self.tol.feas_tol
        for pos, reg in enumerate(self._regions):
            xb = reg.basics(d)
            if reg.contains(d, xb, ftol):
                if pos:
                    self._regions.insert(0, self._regions.pop(pos))
                self.n_hits += 1
                return reg, xb
        return None, None

    def _solve(self, d):
        warm = self._regions[0] if self._regions else None
        try:
            if warm is None:
                res = solve(self.layout.problem(d), self.tol)
            else:
                res = solve(self.layout.problem(d), self.tol, basis=warm.basis,
                            basis_inverse=warm.binv, inverse_age=warm.age)
        except Exception as exc:
            exc.demand = d.copy()
            raise
        self.n_solves += 1
        if res.status is not LPStatus.OPTIMAL:  # pragma: no cover - LP_DC is always feasible and bounded
            raise RuntimeError(f"load-shedding LP returned {res.status.value}")
        if _result_hooks:
            _make_result(self.grid, self.layout, d, res.x, self.shed_tol)
        reg = _Region(self.layout, res.basis, res.basis_inverse, self.tol, res.inverse_age)
        self._regions.insert(0, reg)
        del self._regions[self.max_regions:]
        return res.x

    def solve_x(self, demand):
        d = _check_demand(self.grid, demand)
        reg, xb = self._lookup(d)
        if reg is not None:
            return d, reg.full_x(d, xb)
        return d, self._solve(d)

    def total_shed(self, demand) -> float:
        d = _check_demand(self.grid, demand)
        reg, _ = self._lookup(d)
        if reg is not None:
            return float(d @ reg.shed_g + reg.shed_h)
        return float(np.sum(self._solve(d)[self.layout.s]))

    def shed_affine(self, demand):
        """Total shed at ``demand`` and its gradient with respect to demand.

        Shed is convex and piecewise linear in demand; the gradient is that of
        the linear piece (optimal basis) containing ``demand``.
        """
        d = _check_demand(self.grid, demand)
        reg, _ = self._lookup(d)
        if reg is None:
            self._solve(d)
            reg = self._regions[0]
        return float(d @ reg.shed_g + reg.shed_h), reg.shed_g

    def is_sat(self, demand) -> SatStatus:
        shed = self.total_shed(demand)
        return SatStatus(shed <= self.shed_tol, shed)

    def classify_many(self, D):
        """Total shed for each row of ``D``; regions are matched in bulk."""
        D = np.atleast_2d(np.asarray(D, dtype=float))
        out = np.full(D.shape[0], np.nan)
        todo = np.arange(D.shape[0])
        s = self.layout.s
        while todo.size:
            for reg in list(self._regions):
                if not todo.size:
                    break
                sub = D[todo]
                mask = reg.contains_many(sub, self.tol.feas_tol)
                if mask.any():
                    out[todo[mask]] = sub[mask] @ reg.shed_g + reg.shed_h
                    todo = todo[~mask]
            if todo.size:
                d = _check_demand(self.grid, D[todo[0]])
                x = self._solve(d)
                out[todo[0]] = x[s].sum()
                todo = todo[1:]
        return out

    def evaluate(self, demand) -> ShedResult:
        d, x = self.solve_x(demand)
        return _make_result(self.grid, self.layout, d, x, self.shed_tol)


def _make_result(grid, layout, d, x, shed_tol):
    flows = x[layout.f].copy()
    gen = x[layout.p].copy()
    shed = x[layout.s].copy()
    total = float(shed.sum())
    u = grid.line_capacity
    sat_tol = SAT_TOL_REL * np.maximum(1.0, u)
    saturated = tuple(int(k) for k in np.flatnonzero(np.abs(flows) >= u - sat_tol))
    status = []
    for g, P in zip(gen, grid.gen_capacity):
        gtol = GEN_TOL_REL * max(1.0, P if math.isfinite(P) else 1.0)
        if g <= gtol:
            status.append(GenStatus.IDLE)
        elif not math.isfinite(P):
            status.append(GenStatus.UNBOUNDED)
        elif g >= P - gtol:
            status.append(GenStatus.AT_CAPACITY)
        else:
            status.append(GenStatus.NORMAL)
    res = ShedResult(
        demand=d.copy(),
        total_shed=total,
        shed=shed,
        flows=flows,
        phases=layout.phases(x),
        generation=gen,
        saturated_lines=saturated,
        generator_status=tuple(status),
        is_sat=total <= shed_tol,
    )
    for hook in _result_hooks:
        hook(grid, res)
    return res


# test instrumentation: callables ``hook(grid, result)`` run on every result
# and on every fresh LP solve
_result_hooks: list = []


def evaluate(grid: Grid, demand, tol: Tolerances | None = None, reference=None, dc_coupling=True) -> ShedResult:
    """Solve the load-shedding LP from scratch at ``demand``."""
    return ShedEvaluator(grid, tol, reference=reference, dc_coupling=dc_coupling).evaluate(demand)


def is_sat(grid: Grid, demand, tol: Tolerances | None = None) -> SatStatus:
    return ShedEvaluator(grid, tol).is_sat(demand)


def residuals(grid: Grid, res: ShedResult):
    """(relative power-balance residual, max phase/flow coupling residual)."""
    served = float(np.sum(res.demand - res.shed))
    bal = abs(float(np.sum(res.generation)) - served) / max(1.0, abs(served))
    if grid.n_lines and not np.any(np.isnan(res.phases)):
        fi = [grid.bus_index(a) for a, _ in grid.lines]
        ti = [grid.bus_index(b) for _, b in grid.lines]
        dc = float(np.max(np.abs(res.phases[fi] - res.phases[ti] - grid.reactance * res.flows)))
    else:
        dc = 0.0
    return bal, dc
