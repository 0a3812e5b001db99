"""Numerical tools for sequential testing of the drift of a diffusion.

Submodules:

* :mod:`~wiener_minimax.model` – diffusion models and structural checks;
* :mod:`~wiener_minimax.simulate` – path simulation and exit-time engine;
* :mod:`~wiener_minimax.fbp` – free-boundary (obstacle) grid solver;
* :mod:`~wiener_minimax.csnr` – closed-form constant-SNR solution;
* :mod:`~wiener_minimax.risk` – Monte Carlo risk estimators;
* :mod:`~wiener_minimax.minimax` – least favorable prior search and saddle check;
* :mod:`~wiener_minimax.estimators` – scikit-learn style wrappers;
* :mod:`~wiener_minimax.cli` – the ``wiener-minimax`` command.
"""

__version__ = "0.1.0"

from .csnr import CsnrSolution, RunningCostFn, eval_Ubar, solve_boundaries, solve_phi0
from .decision import Decision, decision_of
from .fbp import Grid2D, SolverParams, ValueSurface, extract_boundaries, solve_vi, validate_boundaries
from .minimax import find_lfd, verify_saddle, dJ_dpsi
from .model import (
    DiffusionModel,
    builtin_bessel,
    builtin_power,
    check_assumptions,
    constant_model,
    model_from_dict,
)
from .risk import RiskEstimate, estimate_Jbar, estimate_Jbar_mixture
from .rules import BoundaryPair, ConstantBand, ImmediateRule
from .simulate import MCSettings, RngSpec, simulate_exits, simulate_joint

__all__ = [
    "__version__",
    "BoundaryPair",
    "ConstantBand",
    "CsnrSolution",
    "Decision",
    "DiffusionModel",
    "Grid2D",
    "ImmediateRule",
    "MCSettings",
    "RiskEstimate",
    "RngSpec",
    "RunningCostFn",
    "SolverParams",
    "ValueSurface",
    "builtin_bessel",
    "builtin_power",
    "check_assumptions",
    "constant_model",
    "dJ_dpsi",
    "decision_of",
    "estimate_Jbar",
    "estimate_Jbar_mixture",
    "eval_Ubar",
    "extract_boundaries",
    "find_lfd",
    "model_from_dict",
    "simulate_exits",
    "simulate_joint",
    "solve_boundaries",
    "solve_phi0",
    "solve_vi",
    "validate_boundaries",
    "verify_saddle",
]
