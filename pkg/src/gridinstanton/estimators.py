"""scikit-learn style wrappers around the feasibility check and the search.

``DCFeasibility`` classifies demand rows as SAT (1) or UNSAT (0) and
transforms them into total shed.  ``InstantonSearch`` fits the Gaussian
demand model to observed demand rows (or takes the grid's nominal demand)
and runs the multi-start search; the spectrum and reports are stored on the
fitted estimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .analysis import p_shed_estimate, stress_report
from .demand import DemandModel, log_prob
from .feasibility import ShedEvaluator
from .grid import Grid
from .search import SearchConfig, multi_start

__all__ = ["DCFeasibility", "InstantonSearch"]


def _check_grid(grid):
    if not isinstance(grid, Grid):
        raise TypeError(f"grid must be a Grid, got {type(grid).__name__}")
    return grid


def _check_demand_rows(X, grid):
    X = check_array(X, dtype=float, ensure_all_finite=True)
    if X.shape[1] != grid.n_loads:
        raise ValueError(f"X has {X.shape[1]} columns, grid has {grid.n_loads} loads")
    if np.any(X < 0):
        raise ValueError("demand rows must be nonnegative")
    return X


class DCFeasibility(ClassifierMixin, TransformerMixin, BaseEstimator):
    """SAT/UNSAT classifier for demand rows on a fixed grid.

    ``fit`` only validates the grid; there is nothing to learn.
    """

    def __init__(self, grid=None):
        self.grid = grid

    def fit(self, X=None, y=None):
        grid = _check_grid(self.grid)
        if X is not None:
            _check_demand_rows(X, grid)
        self.evaluator_ = ShedEvaluator(grid)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = grid.n_loads
        return self

    def transform(self, X):
        """Total shed for each row."""
        check_is_fitted(self, "evaluator_")
        X = _check_demand_rows(X, self.grid)
        return self.evaluator_.classify_many(X).reshape(-1, 1)

    def predict(self, X):
        shed = self.transform(X).ravel()
        return (shed <= self.evaluator_.shed_tol).astype(int)


class InstantonSearch(BaseEstimator):
    """Multi-start instanton search as an estimator.

    With ``X`` given, ``fit`` sets the nominal demand to the column means of
    ``X`` and ``T`` to the mean squared relative deviation, unless ``T`` is
    set explicitly.  Without ``X`` the nominal demand is the grid's, times
    ``scale``.
    """

    def __init__(self, grid=None, T=None, scale=1.0, runs=10, seed=0, spread=None, tol=1e-6,
                 dedup_delta=1e-3, objective="radial", coefficients="adaptive", restarts=3,
                 jobs=1, top_k=None):
        self.grid = grid
        self.T = T
        self.scale = scale
        self.runs = runs
        self.seed = seed
        self.spread = spread
        self.tol = tol
        self.dedup_delta = dedup_delta
        self.objective = objective
        self.coefficients = coefficients
        self.restarts = restarts
        self.jobs = jobs
        self.top_k = top_k

    def _config(self):
        return SearchConfig(
            spread=self.spread, tol=self.tol, dedup_delta=self.dedup_delta, seed=self.seed,
            runs=self.runs, restarts=self.restarts, jobs=self.jobs, objective=self.objective,
            coefficients=self.coefficients,
        )

    def fit(self, X=None, y=None):
        grid = _check_grid(self.grid)
        if X is None:
            dbar = np.asarray(grid.nominal_demand, dtype=float) * self.scale
            T = 1.0 if self.T is None else self.T
        else:
            X = _check_demand_rows(X, grid)
            dbar = X.mean(axis=0)
            if self.T is None:
                act = dbar > 0
                if X.shape[0] < 2 or not act.any():
                    raise ValueError("need at least two rows and one nonzero load to estimate T")
                T = float(np.mean(((X[:, act] / dbar[act]) - 1.0) ** 2))
                if not T > 0:
                    raise ValueError("demand rows do not vary; cannot estimate T")
            else:
                T = self.T
        self.model_ = DemandModel(dbar, T)
        self.n_features_in_ = grid.n_loads
        self.spectrum_ = multi_start(grid, self.model_, self._config())
        self.pshed_ = p_shed_estimate(self.spectrum_, self.model_)
        self.stress_ = stress_report(grid, self.model_, self.spectrum_, self.top_k)
        return self

    def transform(self, X):
        """Instanton value V of each demand row under the fitted model."""
        check_is_fitted(self, "model_")
        X = _check_demand_rows(X, self.grid)
        m = self.model_
        act = m.active
        rel = X[:, act] / m.dbar[act] - 1.0
        return (0.5 * np.sum(rel**2, axis=1)).reshape(-1, 1)

    def score_samples(self, X):
        """Log density of each demand row under the fitted model."""
        check_is_fitted(self, "model_")
        X = _check_demand_rows(X, self.grid)
        return np.array([log_prob(row, self.model_) for row in X])
