"""Gaussian demand model and the search objective built on it.

Demand at each load fluctuates independently around its nominal value with a
standard deviation proportional to that value; ``T`` sets the squared
relative width.  The instanton value

    V(d) = 1/2 * sum_i (d_i / dbar_i - 1)**2

is the exponent of the density, so ``-T log P(d) = V(d) + const``.  Loads
with zero nominal demand have no defined relative deviation; they are frozen
at zero and left out of ``V`` and of the normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feasibility import ShedEvaluator
from .grid import Grid

__all__ = [
    "DemandModel",
    "ObjectiveValue",
    "SAT_SENTINEL",
    "instanton_value",
    "log_prob",
    "objective",
]


@dataclass(frozen=True, eq=False)
class DemandModel:
    dbar: np.ndarray
    T: float = 1.0

    def __post_init__(self):
        dbar = np.array(self.dbar, dtype=float).ravel()
        if np.any(~np.isfinite(dbar)) or np.any(dbar < 0):
            raise ValueError("nominal demand must be finite and nonnegative")
        if not (self.T > 0):
            raise ValueError(f"dispersion T must be positive, got {self.T}")
        dbar.setflags(write=False)
        object.__setattr__(self, "dbar", dbar)
        object.__setattr__(self, "T", float(self.T))

    @classmethod
    def from_grid(cls, grid: Grid, T=1.0, scale=1.0):
        return cls(np.asarray(grid.nominal_demand) * scale, T)

    @property
    def active(self):
        """Mask of loads that take part in the model (``dbar > 0``)."""
        return self.dbar > 0

    @property
    def n_active(self):
        return int(np.count_nonzero(self.active))

    def relative(self, d):
        d = _check(d, self)
        act = self.active
        return d[act] / self.dbar[act]

    def with_T(self, T):
        return DemandModel(self.dbar, T)

    def __eq__(self, other):
        if not isinstance(other, DemandModel):
            return NotImplemented
        return self.T == other.T and np.array_equal(self.dbar, other.dbar)

    def __hash__(self):
        return hash((self.T, self.dbar.tobytes()))


def _check(d, model):
    d = np.asarray(d, dtype=float).ravel()
    if d.size != model.dbar.size:
        raise ValueError(f"demand has {d.size} entries, model has {model.dbar.size} loads")
    return d


def instanton_value(d, model: DemandModel) -> float:
    rel = model.relative(d)
    return 0.5 * float(np.sum((rel - 1.0) ** 2))


def log_prob(d, model: DemandModel) -> float:
    act = model.active
    norm = 0.5 * float(np.sum(np.log(2.0 * np.pi * model.T * model.dbar[act] ** 2)))
    return -instanton_value(d, model) / model.T - norm


@dataclass(frozen=True)
class ObjectiveValue:
    """``value`` is V for an UNSAT point and ``None`` for a SAT point."""

    value: float | None

    @property
    def is_sat(self):
        return self.value is None

    @property
    def is_finite(self):
        return self.value is not None

    def __repr__(self):
        return "SatSentinel" if self.value is None else f"Finite({self.value!r})"


SAT_SENTINEL = ObjectiveValue(None)


def objective(d, grid: Grid, model: DemandModel, evaluator: ShedEvaluator | None = None) -> ObjectiveValue:
    """V(d) where ``d`` forces shedding, the SAT sentinel otherwise."""
    d = _check(d, model)
    if np.any(d < 0):
        raise ValueError("objective expects clamped (nonnegative) demand")
    ev = evaluator or ShedEvaluator(grid)
    if ev.is_sat(d).is_sat:
        return SAT_SENTINEL
    return ObjectiveValue(instanton_value(d, model))
