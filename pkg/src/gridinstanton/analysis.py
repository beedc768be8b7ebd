"""Reports built on top of a search: probability estimate, stress, 2-D scans.

Also holds the nominal-reduction step of the iterative hardening workflow:
find the instantons, relieve the loads they push on, search again.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .demand import DemandModel, log_prob
from .feasibility import GenStatus, ShedEvaluator, evaluate
from .grid import Grid
from .search import InstantonSpectrum, NominalUnsatError

__all__ = [
    "DEVIATION_THRESHOLD",
    "InstantonStress",
    "PshedEstimate",
    "PshedTerm",
    "Raster2D",
    "StressReport",
    "deviated_loads",
    "p_shed_estimate",
    "reduce_nominal",
    "scan_2d",
    "spectrum_rows",
    "spectrum_to_csv",
    "spectrum_to_dict",
    "stress_report",
]

DEVIATION_THRESHOLD = 0.1


# -- probability estimate --------------------------------------------------------


@dataclass(frozen=True)
class PshedTerm:
    rank: int
    value: float
    mu: float
    log_prob: float
    log_term: float

    @property
    def term(self):
        return math.exp(self.log_term)


@dataclass(frozen=True)
class PshedEstimate:
    """Sum over instantons of frequency times density at the instanton."""

    T: float
    terms: tuple
    log_total: float
    total_runs: int
    failed_runs: int

    @property
    def total(self):
        return math.exp(self.log_total)

    def to_dict(self):
        return {
            "T": self.T,
            "total": self.total,
            "log_total": self.log_total,
            "total_runs": self.total_runs,
            "failed_runs": self.failed_runs,
            "terms": [
                {"rank": t.rank, "V": t.value, "mu": t.mu, "log_prob": t.log_prob,
                 "term": t.term, "log_term": t.log_term}
                for t in self.terms
            ],
        }


def p_shed_estimate(spectrum: InstantonSpectrum, model: DemandModel) -> PshedEstimate:
    """Multi-instanton estimate of the shedding probability.

    The weight of each instanton is its share of all runs, a stand-in for
    the probability mass of its basin.  Terms are kept in log space so that
    small ``T`` does not underflow them to zero.
    """
    if not len(spectrum):
        raise ValueError("cannot estimate shedding probability from an empty spectrum")
    terms = []
    for inst in spectrum:
        mu = inst.count / spectrum.total_runs
        lp = log_prob(inst.demand, model)
        terms.append((math.log(mu) + lp, inst.value, mu, lp))
    # most probable instanton first: ascending V is descending density
    terms.sort(key=lambda t: (t[1], -t[0]))
    out = tuple(
        PshedTerm(rank=k + 1, value=v, mu=mu, log_prob=lp, log_term=lt)
        for k, (lt, v, mu, lp) in enumerate(terms)
    )
    log_total = float(logsumexp([t.log_term for t in out]))
    return PshedEstimate(model.T, out, log_total, spectrum.total_runs, spectrum.failed_runs)


# -- spectrum tables ---------------------------------------------------------------


def spectrum_rows(spectrum: InstantonSpectrum, model: DemandModel):
    """(rank, V, -T log P, count) per instanton, best first."""
    rows = []
    for k, inst in enumerate(spectrum):
        rows.append((k + 1, inst.value, -model.T * log_prob(inst.demand, model), inst.count))
    return rows


def spectrum_to_csv(spectrum: InstantonSpectrum, model: DemandModel) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "V", "minus_T_log_P", "count"])
    for rank, v, mtl, count in spectrum_rows(spectrum, model):
        w.writerow([rank, repr(float(v)), repr(float(mtl)), count])
    return buf.getvalue()


def spectrum_to_dict(spectrum: InstantonSpectrum, model: DemandModel, grid: Grid) -> dict:
    loads = [str(b) for b in grid.load_buses]
    items = []
    for (rank, v, mtl, count), inst in zip(spectrum_rows(spectrum, model), spectrum):
        items.append({
            "rank": rank,
            "V": v,
            "minus_T_log_P": mtl,
            "count": count,
            "runs": list(inst.runs),
            "demand": dict(zip(loads, map(float, inst.demand))),
            "surface_witness": dict(zip(loads, map(float, inst.surface_witness))),
        })
    return {
        "T": model.T,
        "total_runs": spectrum.total_runs,
        "failed_runs": spectrum.failed_runs,
        "dedup_delta": spectrum.dedup_delta,
        "instantons": items,
    }


# -- stress report -------------------------------------------------------------------


def deviated_loads(demand, model: DemandModel, grid: Grid, threshold=DEVIATION_THRESHOLD):
    """Load buses whose relative deviation from nominal exceeds ``threshold``."""
    act = model.active
    rel = np.zeros(model.dbar.size)
    rel[act] = np.asarray(demand, dtype=float)[act] / model.dbar[act] - 1.0
    idx = np.flatnonzero(np.abs(rel) > threshold)
    return tuple(int(grid.load_buses[i]) for i in idx), {int(grid.load_buses[i]): float(rel[i]) for i in idx}


@dataclass(frozen=True)
class InstantonStress:
    rank: int
    value: float
    deviated_buses: tuple
    deviations: dict
    saturated_lines: tuple
    newly_saturated: tuple
    generator_tally: dict

    def to_dict(self):
        return {
            "rank": self.rank,
            "V": self.value,
            "deviated_buses": list(self.deviated_buses),
            "deviations": {str(k): v for k, v in self.deviations.items()},
            "saturated_lines": list(self.saturated_lines),
            "newly_saturated": list(self.newly_saturated),
            "generator_tally": dict(self.generator_tally),
        }


@dataclass(frozen=True)
class StressReport:
    threshold: float
    baseline_saturated: tuple
    baseline_tally: dict
    instantons: tuple

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "baseline_saturated": list(self.baseline_saturated),
            "baseline_generator_tally": dict(self.baseline_tally),
            "instantons": [s.to_dict() for s in self.instantons],
        }


def _tally(statuses):
    c = Counter(s.value for s in statuses)
    return {st.value: c.get(st.value, 0) for st in GenStatus}


def stress_report(grid: Grid, model: DemandModel, spectrum: InstantonSpectrum | None = None,
                  top_k=None, threshold=DEVIATION_THRESHOLD) -> StressReport:
    """Deviated loads, saturated lines and generator states per instanton.

    Lines already saturated at the nominal point are reported once as the
    baseline and left out of each instanton's ``newly_saturated`` set.
    """
    insts = tuple(spectrum) if spectrum is not None else ()
    if top_k is None:
        top_k = len(insts)
    if top_k < 0 or top_k > len(insts):
        raise ValueError(f"top_k={top_k} outside 0..{len(insts)}")
    g = grid.with_nominal(model.dbar)
    base = evaluate(g, model.dbar)
    base_sat = tuple(g.line_label(k) for k in base.saturated_lines)
    entries = []
    for k, inst in enumerate(insts[:top_k]):
        res = inst.shed_profile if inst.shed_profile is not None else evaluate(g, inst.demand)
        sat = tuple(g.line_label(j) for j in res.saturated_lines)
        buses, dev = deviated_loads(inst.demand, model, grid, threshold)
        entries.append(InstantonStress(
            rank=k + 1,
            value=inst.value,
            deviated_buses=buses,
            deviations=dev,
            saturated_lines=sat,
            newly_saturated=tuple(s for s in sat if s not in base_sat),
            generator_tally=_tally(res.generator_status),
        ))
    return StressReport(threshold, base_sat, _tally(base.generator_status), tuple(entries))


# -- nominal reduction ---------------------------------------------------------------


def reduce_nominal(grid: Grid, model: DemandModel, buses, factor) -> DemandModel:
    """Scale the nominal demand of ``buses`` by ``factor`` and re-check it is SAT."""
    if not 0 < factor < 1:
        raise ValueError(f"reduction factor must lie in (0, 1), got {factor}")
    dbar = model.dbar.copy()
    for b in buses:
        dbar[grid.load_index(b)] *= factor
    new = DemandModel(dbar, model.T)
    res = evaluate(grid.with_nominal(dbar), dbar)
    if not res.is_sat:
        raise NominalUnsatError(
            f"reduced nominal demand requires shedding {res.total_shed:g} MW"
        )
    return new


# -- 2-D scan ----------------------------------------------------------------------------

SAT, UNSAT, EXCLUDED = 1, 0, -1


@dataclass(frozen=True, eq=False)
class Raster2D:
    """SAT/UNSAT flags over a grid of cell centres in the (d_i, d_j) plane.

    ``flags[r, c]`` belongs to ``(xs[c], ys[r])``: 1 SAT, 0 UNSAT, -1 for
    cells with a negative demand.  With ``bus_j=None`` the second axis is a
    dummy that does not touch the grid.
    """

    bus_i: int
    bus_j: int | None
    xs: np.ndarray
    ys: np.ndarray
    flags: np.ndarray
    boundary: tuple

    @property
    def cell_size(self):
        dx = self.xs[1] - self.xs[0]
        dy = self.ys[1] - self.ys[0]
        return dx, dy

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["d_i", "d_j", "sat"])
        for r, y in enumerate(self.ys):
            for c, x in enumerate(self.xs):
                w.writerow([repr(float(x)), repr(float(y)), int(self.flags[r, c])])
        return buf.getvalue()

    def to_dict(self):
        return {
            "bus_i": self.bus_i,
            "bus_j": self.bus_j,
            "xs": [float(v) for v in self.xs],
            "ys": [float(v) for v in self.ys],
            "flags": self.flags.tolist(),
            "boundary": [[[float(a), float(b)] for a, b in line] for line in self.boundary],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True) + "\n"


def _centres(lo, hi, n):
    step = (hi - lo) / n
    return lo + step * (np.arange(n) + 0.5)


def _boundary(flags, xs, ys):
    """Chain the cell edges between SAT and non-SAT neighbours into polylines."""
    ny, nx = flags.shape
    dx = xs[1] - xs[0] if nx > 1 else 1.0
    dy = ys[1] - ys[0] if ny > 1 else 1.0
    sat = flags == SAT
    segs = []
    # vertical edges between columns c and c+1 sit on lattice x = c+1
    for r, c in zip(*np.nonzero(sat[:, 1:] != sat[:, :-1])):
        segs.append(((c + 1, r), (c + 1, r + 1)))
    for r, c in zip(*np.nonzero(sat[1:, :] != sat[:-1, :])):
        segs.append(((c, r + 1), (c + 1, r + 1)))
    adj = defaultdict(list)
    for k, (a, b) in enumerate(segs):
        adj[a].append(k)
        adj[b].append(k)
    used = np.zeros(len(segs), dtype=bool)
    lines = []

    def walk(start, k):
        path = [start]
        node = start
        while k is not None:
            used[k] = True
            a, b = segs[k]
            node = b if a == node else a
            path.append(node)
            k = next((e for e in adj[node] if not used[e]), None)
        return path

    # open chains start at lattice points with one edge, closed ones anywhere
    ends = sorted(p for p, es in adj.items() if len(es) == 1)
    for p in ends:
        free = [e for e in adj[p] if not used[e]]
        if free:
            lines.append(walk(p, free[0]))
    for k in range(len(segs)):
        if not used[k]:
            lines.append(walk(segs[k][0], k))
    x0 = xs[0] - dx / 2
    y0 = ys[0] - dy / 2
    return tuple(tuple((x0 + i * dx, y0 + j * dy) for i, j in line) for line in lines)


def scan_2d(grid: Grid, load_i, load_j=None, frozen=None, ranges=None, resolution=100,
            evaluator: ShedEvaluator | None = None) -> Raster2D:
    """Classify a ``resolution`` grid of demand pairs at loads ``load_i``/``load_j``.

    Other loads stay at ``frozen`` (default: the grid's nominal demand).
    ``ranges`` is ``((lo_i, hi_i), (lo_j, hi_j))``; the default spans zero to
    three times the nominal value of each load.
    """
    ri, rj = (resolution, resolution) if np.ndim(resolution) == 0 else resolution
    if int(ri) != ri or int(rj) != rj or ri < 2 or rj < 2:
        raise ValueError("scan resolution must be an integer >= 2 on each axis")
    ri, rj = int(ri), int(rj)
    i = grid.load_index(load_i)
    j = grid.load_index(load_j) if load_j is not None else None
    if j is not None and j == i:
        raise ValueError("scan needs two distinct load buses")
    base = np.array(grid.nominal_demand if frozen is None else frozen, dtype=float)
    if base.size != grid.n_loads:
        raise ValueError(f"frozen demand has {base.size} entries, grid has {grid.n_loads} loads")
    if ranges is None:
        hi_i = 3.0 * max(grid.nominal_demand[i], 1.0)
        hi_j = 3.0 * max(grid.nominal_demand[j], 1.0) if j is not None else 1.0
        ranges = ((0.0, hi_i), (0.0, hi_j))
    (lo_x, hi_x), (lo_y, hi_y) = ranges
    if not (hi_x > lo_x and hi_y > lo_y):
        raise ValueError("scan ranges must have hi > lo")
    xs = _centres(lo_x, hi_x, ri)
    ys = _centres(lo_y, hi_y, rj)
    ev = evaluator or ShedEvaluator(grid)
    X, Y = np.meshgrid(xs, ys)
    D = np.repeat(base[None, :], X.size, axis=0)
    D[:, i] = X.ravel()
    if j is not None:
        D[:, j] = Y.ravel()
    ok = np.all(D >= 0, axis=1)
    flags = np.full(X.size, EXCLUDED, dtype=np.int8)
    if ok.any():
        shed = ev.classify_many(D[ok])
        flags[ok] = np.where(shed <= ev.shed_tol, SAT, UNSAT)
    flags = flags.reshape(X.shape)
    return Raster2D(
        bus_i=int(grid.load_buses[i]),
        bus_j=int(grid.load_buses[j]) if j is not None else None,
        xs=xs,
        ys=ys,
        flags=flags,
        boundary=_boundary(flags, xs, ys),
    )
