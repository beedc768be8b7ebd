"""Instanton search: downhill simplex over the UNSAT side of the error surface.

Demands are handled in relative coordinates ``y_i = d_i / dbar_i`` over the
active loads, so ``V = |y - 1|**2 / 2``.

Two objectives are available.  ``"sentinel"`` runs the simplex on ``y``
itself: vertices in the SAT region carry no value, rank below every finite
vertex, and among themselves the one closer to the best finite vertex ranks
higher.  ``"radial"`` runs the simplex on ray directions ``w`` from the
nominal point.  Each direction is scored by V at the point where its ray
leaves the SAT region; because shed is convex and piecewise linear along a
ray, that exit point is found exactly by a few Newton steps.  The SAT region
is convex and contains the nominal point, so every local minimum of V on the
UNSAT side sits on the surface and is reached this way.  The radial score is
continuous, which keeps the simplex from flattening against the SAT barrier
when many loads are searched.  Directions are parametrised on the tangent
plane at a centre direction, giving one coordinate fewer than there are
loads.

Either way the result is bisected toward the nominal point until it
brackets the error surface.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .demand import DemandModel, instanton_value
from .feasibility import ShedEvaluator, ShedResult, evaluate
from .grid import Grid

log = logging.getLogger(__name__)

__all__ = [
    "AmoebaNotConverged",
    "Instanton",
    "InstantonSpectrum",
    "NoUnsatPointError",
    "NominalUnsatError",
    "RunOutcome",
    "SearchConfig",
    "find_unsat_seed",
    "make_evaluator",
    "multi_start",
    "refine_to_surface",
    "run_amoeba",
]


class NoUnsatPointError(RuntimeError):
    """Scaling and perturbing the nominal demand never forced shedding."""


class NominalUnsatError(ValueError):
    """The nominal operating point already requires load shedding."""


class AmoebaNotConverged(RuntimeError):
    def __init__(self, message, stats):
        super().__init__(message)
        self.stats = stats


OBJECTIVES = ("radial", "sentinel")
COEFFICIENTS = ("adaptive", "standard")
# narrow radial simplices stay in the basin of the near-uniform seed direction
DEFAULT_SPREAD = {"sentinel": 0.2, "radial": 2.0}


@dataclass(frozen=True)
class SearchConfig:
    """Search settings.

    With ``coefficients="adaptive"`` expansion, contraction and shrink follow
    the dimension ``n`` of the simplex (``1 + 2/n``, ``3/4 - 1/(2n)``,
    ``1 - 1/n``); ``"standard"`` uses ``gamma``, ``rho`` and ``sigma`` as given.

    ``spread`` sizes the initial simplex.  For the sentinel objective it is
    relative to each load's demand; for the radial objective it is in chart
    units, where 1 tilts the ray by 45 degrees.  ``None`` picks
    ``DEFAULT_SPREAD[objective]``.
    """

    alpha: float = 1.0
    gamma: float = 2.0
    rho: float = 0.5
    sigma: float = 0.5
    objective: str = "radial"
    coefficients: str = "adaptive"
    spread: float | None = None
    max_iter: int | None = None  # default 2000 * number of searched loads
    stall_iter: int | None = None  # default 400 * number of searched directions
    tol: float = 1e-6
    dedup_delta: float = 1e-3
    surface_eps: float = 1e-6
    seed: int = 0
    runs: int = 10
    restarts: int = 3
    seed_perturbation: float = 0.2
    max_scale: float = 2.0 ** 16
    jobs: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("reflection coefficient must be positive")
        if not self.gamma > 1:
            raise ValueError("expansion coefficient must exceed 1")
        if not 0 < self.rho < 1:
            raise ValueError("contraction coefficient must lie in (0, 1)")
        if not 0 < self.sigma < 1:
            raise ValueError("shrink coefficient must lie in (0, 1)")
        if self.spread is not None and not self.spread > 0:
            raise ValueError("spread must be positive")
        if not self.tol > 0 or not self.surface_eps > 0:
            raise ValueError("tolerances must be positive")
        if not self.dedup_delta > 0:
            raise ValueError("dedup threshold must be positive")
        if self.runs < 1:
            raise ValueError("run count must be at least 1")
        if self.stall_iter is not None and self.stall_iter < 1:
            raise ValueError("stall_iter must be at least 1")
        if self.restarts < 0 or self.jobs < 1:
            raise ValueError("restarts must be >= 0 and jobs >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.coefficients not in COEFFICIENTS:
            raise ValueError(f"coefficients must be one of {COEFFICIENTS}, got {self.coefficients!r}")
        if not self.max_scale > 1:
            raise ValueError("max_scale must exceed 1")

    @property
    def initial_spread(self):
        return DEFAULT_SPREAD[self.objective] if self.spread is None else self.spread

    def simplex_coefficients(self, n):
        """``(alpha, gamma, rho, sigma)`` for a simplex over ``n`` coordinates."""
        if self.coefficients == "standard" or n < 2:
            return self.alpha, self.gamma, self.rho, self.sigma
        return self.alpha, 1.0 + 2.0 / n, 0.75 - 0.5 / n, 1.0 - 1.0 / n

    def iteration_cap(self, n):
        return self.max_iter if self.max_iter is not None else 2000 * max(n, 1)

    def stall_cap(self, n):
        """Iterations one radial simplex may take before it is rebuilt."""
        return self.stall_iter if self.stall_iter is not None else 400 * max(n, 1)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown search config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class Instanton:
    demand: np.ndarray
    value: float
    surface_witness: np.ndarray
    count: int = 1
    shed_profile: ShedResult | None = None
    runs: tuple = ()

    def relative(self, model: DemandModel):
        out = np.ones_like(self.demand)
        act = model.active
        out[act] = self.demand[act] / model.dbar[act]
        return out


@dataclass(frozen=True)
class RunOutcome:
    index: int
    converged: bool
    demand: np.ndarray | None = None
    witness: np.ndarray | None = None
    value: float | None = None
    iterations: int = 0
    evaluations: int = 0
    lp_solves: int = 0
    restarts: int = 0
    message: str = ""

    def stats(self):
        return {
            "run": self.index,
            "converged": self.converged,
            "value": self.value,
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "lp_solves": self.lp_solves,
            "restarts": self.restarts,
            "message": self.message,
        }


@dataclass(frozen=True, eq=False)
class InstantonSpectrum:
    instantons: tuple
    total_runs: int
    failed_runs: int
    dedup_delta: float
    runs: tuple = field(default=(), repr=False)

    def __len__(self):
        return len(self.instantons)

    def __iter__(self):
        return iter(self.instantons)

    def __getitem__(self, k):
        return self.instantons[k]

    @property
    def top(self):
        return self.instantons[0] if self.instantons else None


# -- evaluation helpers --------------------------------------------------------


def make_evaluator(grid: Grid, model: DemandModel) -> ShedEvaluator:
    """Evaluator whose SAT threshold follows the model's nominal demand."""
    return ShedEvaluator(grid.with_nominal(model.dbar))


class _Objective:
    """F(y) over relative coordinates of the active loads, with clamping."""

    def __init__(self, ev: ShedEvaluator, model: DemandModel):
        self.ev = ev
        self.model = model
        self.act = model.active
        self.dbar_act = model.dbar[self.act]
        self.n_evals = 0

    def demand(self, y):
        d = np.zeros(self.model.dbar.size)
        d[self.act] = np.maximum(y, 0.0) * self.dbar_act
        return d

    def __call__(self, y):
        self.n_evals += 1
        if self.ev.is_sat(self.demand(y)).is_sat:
            return None
        return 0.5 * float(np.sum((y - 1.0) ** 2))


_MIN_STEP = 1e-12
_MIN_HINT = 1e-3


class _RayObjective:
    """V where the ray ``y = 1 + t w`` leaves the SAT region, over chart coordinates.

    The chart maps ``z`` to ``w = centre + Q z`` with ``Q`` an orthonormal basis
    of the complement of ``centre``.  A ray that stays SAT until it would
    need a negative demand (or until ``max_scale``) scores as SAT.
    """

    def __init__(self, ev: ShedEvaluator, model: DemandModel, max_scale):
        self.ev = ev
        self.model = model
        self.act = model.active
        self.dbar_act = model.dbar[self.act]
        self.max_scale = max_scale
        self.n_evals = 0
        self._hint = 1.0
        self.centre = None
        self.Q = None

    def recentre(self, w, rng):
        n = w.size
        u = w / np.linalg.norm(w)
        q, _ = np.linalg.qr(np.column_stack([u, rng.standard_normal((n, n - 1))]))
        self.centre = u
        self.Q = q[:, 1:]

    def direction(self, z):
        return self.centre + self.Q @ z

    def demand(self, w, t):
        d = np.zeros(self.model.dbar.size)
        d[self.act] = np.maximum(1.0 + t * w, 0.0) * self.dbar_act
        return d

    def _shed(self, w, t):
        return self.ev.shed_affine(self.demand(w, t))

    def exit(self, w):
        """``(t_sat, t_unsat)`` bracketing the exit along ``w``, or None if the ray stays SAT."""
        neg = w < 0
        t_lim = self.max_scale
        if neg.any():
            t_lim = min(t_lim, float(np.min(-1.0 / w[neg])))
        tol = self.ev.shed_tol
        t = min(self._hint, t_lim)
        s, g = self._shed(w, t)
        while s <= tol:
            if t >= t_lim:
                return None
            # a nominal point on the surface leaves t = 0, which doubling never moves
            t = min(max(2.0 * t, _MIN_STEP), t_lim)
            s, g = self._shed(w, t)
        wd = np.zeros(self.model.dbar.size)
        wd[self.act] = w * self.dbar_act
        for _ in range(200):
            # shed is convex along the ray and zero near t = 0, so the root of
            # the current linear piece never overshoots the exit
            slope = float(g @ wd)
            t_new = t - s / slope if slope > 0 else 0.5 * t
            if not 0.0 <= t_new < t:
                t_new = 0.5 * t
            s_new, g_new = self._shed(w, t_new)
            if s_new <= tol:
                self._hint = max(1.25 * t_new, _MIN_HINT)
                return t_new, t
            t, s, g = t_new, s_new, g_new
        return 0.0, t  # pragma: no cover - a piecewise-linear shed has finitely many pieces

    def __call__(self, z):
        self.n_evals += 1
        w = self.direction(z)
        hit = self.exit(w)
        if hit is None:
            return None
        return 0.5 * hit[0] ** 2 * float(w @ w)


def _is_unsat(ev, d):
    return not ev.is_sat(d).is_sat


# -- seeding -------------------------------------------------------------------


def find_unsat_seed(grid: Grid, model: DemandModel, rng, config: SearchConfig | None = None,
                    evaluator: ShedEvaluator | None = None, max_tries=200):
    """Random UNSAT demand: scale the nominal point up, then jitter each load."""
    config = config or SearchConfig()
    ev = evaluator or make_evaluator(grid, model)
    dbar = model.dbar
    lam = 2.0
    while lam <= config.max_scale:
        if _is_unsat(ev, lam * dbar):
            for _ in range(max_tries):
                jitter = 1.0 + config.seed_perturbation * rng.uniform(-1.0, 1.0, dbar.size)
                d = lam * dbar * jitter
                if _is_unsat(ev, d):
                    return d
        lam *= 2.0
    raise NoUnsatPointError(
        f"no UNSAT point found up to {config.max_scale:g} x nominal demand; "
        "the grid can serve any demand along these directions"
    )


# -- surface refinement ----------------------------------------------------------


def refine_to_surface(grid: Grid, d_unsat, dbar, eps=1e-6, evaluator: ShedEvaluator | None = None):
    """Bisect the segment from ``dbar`` to ``d_unsat`` across the error surface.

    Returns ``(unsat_end, sat_end)`` with every component of the difference at
    most ``eps`` relative to the nominal demand.
    """
    d_unsat = np.asarray(d_unsat, dtype=float)
    dbar = np.asarray(dbar, dtype=float)
    if evaluator is None:
        evaluator = make_evaluator(grid, DemandModel(dbar))
    if _is_unsat(evaluator, dbar):
        raise NominalUnsatError("nominal demand is UNSAT; cannot bracket the error surface")
    if not _is_unsat(evaluator, d_unsat):
        raise ValueError("refine_to_surface needs an UNSAT starting point")
    act = dbar > 0
    span = np.abs(d_unsat - dbar)
    rel = np.max(span[act] / dbar[act]) if act.any() else 0.0
    rel = max(rel, float(np.max(span[~act]) if (~act).any() else 0.0))
    lo, hi = 0.0, 1.0
    while (hi - lo) * rel > eps:
        mid = 0.5 * (lo + hi)
        if _is_unsat(evaluator, dbar + mid * (d_unsat - dbar)):
            hi = mid
        else:
            lo = mid
    if hi == 1.0:
        unsat_end = d_unsat.copy()
    else:
        unsat_end = dbar + hi * (d_unsat - dbar)
    return unsat_end, dbar + lo * (d_unsat - dbar)


# -- Nelder-Mead -------------------------------------------------------------------


def _order(Y, vals):
    """Vertex order: finite values ascending, then SAT vertices nearest the best one."""
    finite = np.array([v is not None for v in vals])
    fv = np.array([v if v is not None else np.inf for v in vals])
    if finite.any():
        anchor = Y[int(np.argmin(fv))]
        dist = np.max(np.abs(Y - anchor), axis=1)
    else:
        dist = np.zeros(len(vals))
    # lexsort: last key is primary
    return np.lexsort((dist, fv, ~finite))


def _rank_key(v, y, anchor):
    if v is not None:
        return (0, v)
    return (1, float(np.max(np.abs(y - anchor))) if anchor is not None else 0.0)


def _nelder_mead(F, start, steps, coeffs, tol, max_iter, history=None, clamp=True):
    alpha, gamma, rho, sigma = coeffs
    fix = (lambda y: np.maximum(y, 0.0)) if clamp else (lambda y: y)
    n = start.size
    Y = np.repeat(start[None, :], n + 1, axis=0)
    Y[1:] += np.diag(steps)
    Y = fix(Y)
    vals = [F(y) for y in Y]
    it = 0
    converged = False
    while it < max_iter:
        order = _order(Y, vals)
        Y = Y[order]
        vals = [vals[i] for i in order]
        if history is not None:
            history.append(vals[0])
        diam = float(np.max(np.abs(Y[1:] - Y[0]))) if n else 0.0
        if diam < tol * max(1.0, float(np.max(np.abs(Y[0]))) if n else 1.0):
            converged = True
            break
        it += 1
        anchor = Y[0] if vals[0] is not None else None
        kb = _rank_key(vals[0], Y[0], anchor)
        ksw = _rank_key(vals[-2], Y[-2], anchor)
        kw = _rank_key(vals[-1], Y[-1], anchor)
        worst = Y[-1]
        centroid = Y[:-1].mean(axis=0)

        yr = fix(centroid + alpha * (centroid - worst))
        vr = F(yr)
        kr = _rank_key(vr, yr, anchor)
        if kr < kb:
            ye = fix(centroid + gamma * (yr - centroid))
            ve = F(ye)
            if _rank_key(ve, ye, anchor) < kr:
                Y[-1], vals[-1] = ye, ve
            else:
                Y[-1], vals[-1] = yr, vr
            continue
        if kr < ksw:
            Y[-1], vals[-1] = yr, vr
            continue
        if kr < kw:
            yc = fix(centroid + rho * (yr - centroid))
            vc = F(yc)
            if _rank_key(vc, yc, anchor) <= kr:
                Y[-1], vals[-1] = yc, vc
                continue
        else:
            yc = fix(centroid + rho * (worst - centroid))
            vc = F(yc)
            if _rank_key(vc, yc, anchor) < kw:
                Y[-1], vals[-1] = yc, vc
                continue
        Y[1:] = Y[0] + sigma * (Y[1:] - Y[0])
        for i in range(1, n + 1):
            vals[i] = F(Y[i])
    finite = [i for i, v in enumerate(vals) if v is not None]
    best = min(finite, key=lambda i: vals[i])
    diam = float(np.max(np.abs(Y - Y[best]))) if n else 0.0
    return Y[best].copy(), vals[best], it, converged, diam


def run_amoeba(grid: Grid, model: DemandModel, seed_demand, config: SearchConfig | None = None,
               rng=None, evaluator: ShedEvaluator | None = None, history=None):
    """One downhill-simplex run from an UNSAT seed; returns the refined instanton."""
    config = config or SearchConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    ev = evaluator or make_evaluator(grid, model)
    seed_demand = np.asarray(seed_demand, dtype=float)
    if _is_unsat(ev, model.dbar):
        raise NominalUnsatError("nominal demand is UNSAT")
    if not _is_unsat(ev, np.maximum(seed_demand, 0.0)):
        raise ValueError("run_amoeba needs an UNSAT seed demand")
    act = model.active
    y = np.maximum(seed_demand[act], 0.0) / model.dbar[act]
    if config.objective == "radial":
        d_end, stats = _radial_search(model, y, config, rng, ev, history)
    else:
        d_end, stats = _sentinel_search(model, y, config, rng, ev, history)
    d_unsat, d_sat = refine_to_surface(grid, d_end, model.dbar, config.surface_eps, ev)
    inst = Instanton(
        demand=d_unsat,
        value=instanton_value(d_unsat, model),
        surface_witness=d_sat,
        count=1,
    )
    return inst, stats


def _sentinel_search(model, y, config, rng, ev, history):
    F = _Objective(ev, model)
    n = y.size
    cap = config.iteration_cap(n)
    coeffs = config.simplex_coefficients(n)
    total_it = 0
    restarts = 0
    v_best = F(y)
    while True:
        signs = rng.choice([-1.0, 1.0], size=n)
        steps = signs * config.initial_spread * np.maximum(y, 1.0)
        y_new, v_new, it, converged, _ = _nelder_mead(F, y, steps, coeffs, config.tol, cap - total_it, history)
        total_it += it
        improved = v_new < v_best - config.tol * max(1.0, v_best)
        y, v_best = y_new, v_new
        if not converged or not improved or restarts >= config.restarts:
            break
        restarts += 1
    stats = {"iterations": total_it, "evaluations": F.n_evals, "restarts": restarts}
    if not converged:
        raise AmoebaNotConverged(f"simplex did not converge within {cap} iterations", stats)
    return F.demand(y), stats


def _radial_search(model, y, config, rng, ev, history):
    F = _RayObjective(ev, model, config.max_scale)
    w = y - 1.0
    n = w.size
    if n == 1:
        # a single load has one outward direction; nothing to search over
        hit = F.exit(w)
        F.n_evals += 1
        return F.demand(w, hit[1]), {"iterations": 0, "evaluations": F.n_evals, "restarts": 0}
    cap = config.iteration_cap(n - 1)
    coeffs = config.simplex_coefficients(n - 1)
    stall = config.stall_cap(n - 1)
    total_it = 0
    restarts = stalls = 0
    v_best = None
    spread = config.initial_spread
    while True:
        F.recentre(w, rng)
        z0 = np.zeros(n - 1)
        if v_best is None:
            v_best = F(z0)
        steps = rng.choice([-1.0, 1.0], size=n - 1) * spread
        z, v_new, it, converged, diam = _nelder_mead(
            F, z0, steps, coeffs, config.tol, min(cap - total_it, stall), history, clamp=False
        )
        total_it += it
        improved = v_new < v_best - config.tol * max(1.0, v_best)
        w, v_best = F.direction(z), min(v_new, v_best)
        if not converged:
            # a degenerate simplex crawls; rebuild it at its best vertex and current size
            if total_it >= cap:
                break
            stalls += 1
            spread = min(config.initial_spread, max(diam, config.tol))
            continue
        spread = config.initial_spread
        if not improved or restarts >= config.restarts:
            break
        restarts += 1
    stats = {"iterations": total_it, "evaluations": F.n_evals, "restarts": restarts + stalls}
    if not converged:
        raise AmoebaNotConverged(f"simplex did not converge within {cap} iterations", stats)
    hit = F.exit(w)
    return F.demand(w, hit[1]), stats


# -- multi-start -----------------------------------------------------------------


def _one_run(args):
    grid, model, config, index, seed_seq = args
    rng = np.random.default_rng(seed_seq)
    ev = make_evaluator(grid, model)
    try:
        seed = find_unsat_seed(grid, model, rng, config, ev)
        inst, stats = run_amoeba(grid, model, seed, config, rng, ev)
    except AmoebaNotConverged as exc:
        return RunOutcome(index, False, lp_solves=ev.n_solves, message=str(exc), **exc.stats)
    return RunOutcome(
        index, True, inst.demand, inst.surface_witness, inst.value,
        lp_solves=ev.n_solves, **stats,
    )


def _same(a, b, dbar, delta):
    act = dbar > 0
    diff = np.abs(a - b)
    rel = diff[act] / dbar[act]
    if rel.size and rel.max() >= delta:
        return False
    return not np.any(diff[~act] >= delta)


def deduplicate(outcomes, model: DemandModel, delta):
    """Cluster converged runs; representative is the lowest-V member."""
    good = [o for o in outcomes if o.converged]
    good.sort(key=lambda o: (o.value, tuple(o.demand), o.index))
    clusters = []
    for o in good:
        for cl in clusters:
            if _same(o.demand, cl[0].demand, model.dbar, delta):
                cl.append(o)
                break
        else:
            clusters.append([o])
    return clusters


def multi_start(grid: Grid, model: DemandModel, config: SearchConfig | None = None,
                progress=None) -> InstantonSpectrum:
    """Run the amoeba from ``config.runs`` independent random seeds."""
    config = config or SearchConfig()
    ev = make_evaluator(grid, model)
    if _is_unsat(ev, model.dbar):
        raise NominalUnsatError(
            "nominal demand requires load shedding; the search assumes a normal "
            "operating point safely within the SAT region"
        )
    seqs = np.random.SeedSequence(config.seed).spawn(config.runs)
    tasks = [(grid, model, config, i, s) for i, s in enumerate(seqs)]
    outcomes = []
    if config.jobs > 1 and config.runs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            for out in pool.map(_one_run, tasks):
                outcomes.append(out)
                if progress:
                    progress(out)
    else:
        for t in tasks:
            out = _one_run(t)
            outcomes.append(out)
            if progress:
                progress(out)
    failed = sum(not o.converged for o in outcomes)
    if failed == len(outcomes):
        raise AmoebaNotConverged("every search run failed", {"runs": [o.stats() for o in outcomes]})
    clusters = deduplicate(outcomes, model, config.dedup_delta)
    instantons = []
    for cl in clusters:
        rep = cl[0]
        instantons.append(
            Instanton(
                demand=rep.demand,
                value=rep.value,
                surface_witness=rep.witness,
                count=len(cl),
                shed_profile=evaluate(grid.with_nominal(model.dbar), rep.demand),
                runs=tuple(sorted(o.index for o in cl)),
            )
        )
    return InstantonSpectrum(
        instantons=tuple(instantons),
        total_runs=len(outcomes),
        failed_runs=failed,
        dedup_delta=config.dedup_delta,
        runs=tuple(outcomes),
    )
