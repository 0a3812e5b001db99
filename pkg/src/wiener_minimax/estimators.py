"""scikit-learn style wrappers around the solvers.

These give the numerical routines the familiar ``fit`` / ``predict`` shape:

* :class:`SequentialTestSolver` fits the value surface of a diffusion model
  and predicts, for query points ``(x, phi)``, whether to stop and which
  hypothesis to accept;
* :class:`ConstantSNRSolver` fits the closed-form constant-SNR solution;
* :class:`LeastFavorablePrior` fits the least favorable prior odds at a
  starting state by Monte Carlo.

The ``fit`` argument is a :class:`~wiener_minimax.model.DiffusionModel`
rather than a data matrix, since the problems have no training data.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import csnr as _csnr
from . import fbp as _fbp
from .decision import Decision
from .minimax import find_lfd, verify_saddle
from .model import DiffusionModel, check_assumptions, default_grid
from .simulate import MCSettings, RngSpec

__all__ = [
    "CONTINUE",
    "SequentialTestSolver",
    "ConstantSNRSolver",
    "LeastFavorablePrior",
]

CONTINUE = -1
"""Label returned by ``predict`` inside the continuation band."""


def _points(X) -> np.ndarray:
    X = check_array(X, ensure_2d=True, dtype=float)
    if X.shape[1] != 2:
        raise ValueError("expected query points as rows (x, phi)")
    if np.any(X[:, 1] <= 0):
        raise ValueError("phi must be positive")
    return X


def _label(phi: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    out = np.full(phi.shape, CONTINUE, dtype=int)
    out[phi <= lo] = int(Decision.NULL)
    out[phi >= hi] = int(Decision.ALT)
    return out


class SequentialTestSolver(BaseEstimator):
    """Free-boundary solver for the Bayesian sequential test.

    Parameters mirror :class:`~wiener_minimax.fbp.Grid2D` and
    :class:`~wiener_minimax.fbp.SolverParams`.  After ``fit`` the attributes
    ``surface_``, ``boundaries_``, ``regime_`` and ``report_`` are set.
    """

    def __init__(self, x_range=(0.5, 2.0), nx: int = 129, logphi_range=(-8.0, 8.0),
                 nu: int = 513, method: str = "policy", tol: float = 1e-8,
                 max_iters: int = 100_000, omega: float = 1.5,
                 contact_tol: Optional[float] = None):
        self.x_range = x_range
        self.nx = nx
        self.logphi_range = logphi_range
        self.nu = nu
        self.method = method
        self.tol = tol
        self.max_iters = max_iters
        self.omega = omega
        self.contact_tol = contact_tol

    def fit(self, model: DiffusionModel, y=None) -> "SequentialTestSolver":
        if not isinstance(model, DiffusionModel):
            raise TypeError("fit expects a DiffusionModel")
        grid = _fbp.Grid2D.uniform(self.x_range[0], self.x_range[1], self.nx,
                                   self.logphi_range[0], self.logphi_range[1], self.nu)
        params = _fbp.SolverParams(self.method, self.tol, self.max_iters, self.omega,
                                   self.contact_tol)
        self.surface_ = _fbp.solve_vi(model, grid, params)
        self.regime_ = self.surface_.meta["regime"]
        self.boundaries_ = _fbp.extract_boundaries(self.surface_, self.contact_tol)
        self.report_ = _fbp.validate_boundaries(self.boundaries_, self.regime_)
        self.model_ = model
        return self

    def predict(self, X) -> np.ndarray:
        """``CONTINUE`` inside the band, else the accepted hypothesis (0 or 1)."""
        check_is_fitted(self, "boundaries_")
        X = _points(X)
        lo, hi = (np.exp(v) for v in self.boundaries_.log_band(X[:, 0]))
        return _label(X[:, 1], lo, hi)

    def transform(self, X) -> np.ndarray:
        """Interpolated value ``V(x, phi)`` at each query row."""
        check_is_fitted(self, "surface_")
        X = _points(X)
        return np.array([self.surface_.value_at(x, p) for x, p in X])


class ConstantSNRSolver(BaseEstimator):
    """Closed-form solver for a constant signal-to-noise ratio ``rho0``.

    ``cost`` is a number (constant running cost) or a
    :class:`~wiener_minimax.csnr.RunningCostFn`.  ``rho0=None`` takes the
    ratio from the fitted model.
    """

    def __init__(self, rho0: Optional[float] = None, cost=1.0):
        self.rho0 = rho0
        self.cost = cost

    def fit(self, model: Optional[DiffusionModel] = None, y=None) -> "ConstantSNRSolver":
        rho0 = self.rho0
        if rho0 is None:
            if model is None:
                raise ValueError("either rho0 or a model is required")
            report = check_assumptions(model)
            if report.regime != "constant_snr":
                raise _fbp.RegimeError("model does not have a constant signal-to-noise ratio")
            x = default_grid(model)
            rho0 = abs(float(np.median(np.broadcast_to(model.rho(x), x.shape))))
        f = self.cost if isinstance(self.cost, _csnr.RunningCostFn) else _csnr.RunningCostFn.constant(self.cost)
        self.solution_ = _csnr.solve(rho0, f)
        self.l0_, self.l1_ = self.solution_.l0, self.solution_.l1
        self.phi0_ = self.solution_.phi0
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "solution_")
        X = _points(X)
        n = X.shape[0]
        return _label(X[:, 1], np.full(n, self.l0_), np.full(n, self.l1_))

    def risk(self, psi: Sequence[float]) -> np.ndarray:
        """Risk of the least-favorable rule at each prior odds in ``psi``."""
        check_is_fitted(self, "solution_")
        return np.array([_csnr.eval_Ubar(self.solution_, float(p)) for p in np.atleast_1d(psi)])


class LeastFavorablePrior(BaseEstimator):
    """Monte Carlo least favorable prior odds at a starting state.

    ``boundaries`` is any stopping rule (or fitted solver exposing
    ``boundaries_`` / ``solution_``).  ``fit`` runs the root search and, if
    ``psi_grid`` is given, the saddle check; ``phi0_`` is the first root.
    """

    def __init__(self, boundaries=None, x0: float = 1.0, tol: float = 1e-3,
                 n_paths: int = 200_000, n_batches: int = 20, dt: float = 1e-4,
                 horizon: Optional[float] = None, seed: int = 0, n_scan: int = 17,
                 psi_grid: Optional[Sequence[float]] = None):
        self.boundaries = boundaries
        self.x0 = x0
        self.tol = tol
        self.n_paths = n_paths
        self.n_batches = n_batches
        self.dt = dt
        self.horizon = horizon
        self.seed = seed
        self.n_scan = n_scan
        self.psi_grid = psi_grid

    def _rule(self):
        b = self.boundaries
        if hasattr(b, "boundaries_"):
            return b.boundaries_
        if hasattr(b, "solution_"):
            return b.solution_.rule()
        if b is None:
            raise ValueError("boundaries are required")
        return b

    def fit(self, model: DiffusionModel, y=None) -> "LeastFavorablePrior":
        mc = MCSettings(self.n_paths, self.n_batches, self.dt, self.horizon)
        rng = RngSpec(self.seed)
        rule = self._rule()
        self.result_ = find_lfd(model, self.x0, rule, self.tol, mc, rng, self.n_scan)
        self.phi0_ = self.result_.phi0
        self.roots_ = [r.phi0 for r in self.result_.roots]
        self.saddle_ = None
        if self.psi_grid is not None:
            self.saddle_ = verify_saddle(model, self.x0, self.phi0_, rule, self.psi_grid, mc, rng)
        return self

    def predict_proba(self, X=None) -> np.ndarray:
        """Least favorable prior probabilities ``(P(theta=0), P(theta=1))``."""
        check_is_fitted(self, "phi0_")
        return np.array([[1.0 / (1.0 + self.phi0_), self.phi0_ / (1.0 + self.phi0_)]])
