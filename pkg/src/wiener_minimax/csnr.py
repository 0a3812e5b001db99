"""Semi-explicit solution of the testing problem when the SNR is constant.

With ``rho`` constant the likelihood ratio ``L`` is itself a diffusion,
``dL = rho0 L dB`` under the null, and the value of the weighted problem
with running cost ``f(L)`` is ``W(l) = M(l) + A l + B`` between two
boundaries, where ``M`` solves

    -(rho0^2 / 2) l^2 M''(l) = (1 + l) f(l),   M(1) = M'(1) = 0.

The four value-matching / smooth-fit conditions fix ``(A, B, l0, l1)``.  The
least favorable prior odds ``phi0`` make the risk of the rule
``phi0 L_t not in (l0, l1)`` flat in the prior; it is found by bisection.

All integrals are adaptive Gauss–Kronrod (``scipy.integrate.quad``) using
the one-dimensional Cauchy form of the double integral,
``M(l) = -(2/rho0^2) int_1^l (l - u) (1 + u) f(u) / u^2 du``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import integrate, optimize

from .expression import compile_expression

__all__ = [
    "CsnrError",
    "RunningCostFn",
    "CsnrSolution",
    "M_eval",
    "M_prime",
    "M_second",
    "M_closed_constant",
    "solve_boundaries",
    "solve_phi0",
    "case1_residual",
    "eval_Ubar",
    "symmetric_shortcut",
    "solve",
]

_QUAD_ABS = 1e-12
_L_FLOOR = 1e-12
_FIT_TOL = 1e-9


class CsnrError(RuntimeError):
    """Failure of the constant-SNR construction (no solution, bad signs, bad input)."""


@dataclass(frozen=True, eq=False)
class RunningCostFn:
    """Positive running cost ``f(l)`` of the likelihood ratio.

    ``symmetric`` asserts ``f(l) == f(1/l)``; it is checked on a 64-point
    log grid at construction.
    """

    eval: Callable
    symmetric: bool = False
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        grid = np.geomspace(1e-3, 1e3, 64)
        vals = np.asarray([float(self.eval(v)) for v in grid])
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise CsnrError("running cost must be finite and positive")
        if self.symmetric:
            refl = np.asarray([float(self.eval(1.0 / v)) for v in grid])
            if np.any(np.abs(vals - refl) > 1e-12 * (1.0 + np.abs(vals))):
                raise CsnrError("running cost flagged symmetric but f(l) != f(1/l)")

    def __call__(self, l):
        return self.eval(l)

    @property
    def constant_value(self) -> Optional[float]:
        if self.descriptor.get("type") == "constant":
            return float(self.descriptor["c"])
        return None

    def reflected(self) -> "RunningCostFn":
        """``l -> f(1/l)``."""
        f = self.eval
        desc = {"type": "reflected", "of": self.descriptor}
        if self.constant_value is not None:
            desc = dict(self.descriptor)
        return RunningCostFn(lambda l: f(1.0 / np.asarray(l, dtype=float)), self.symmetric, desc)

    def symmetrized(self) -> "RunningCostFn":
        """``l -> (f(l) + f(1/l)) / 2``."""
        if self.symmetric:
            return self
        f = self.eval
        return RunningCostFn(
            lambda l: 0.5 * (f(l) + f(1.0 / np.asarray(l, dtype=float))),
            True,
            {"type": "symmetrized", "of": self.descriptor},
        )

    def scaled(self, k: float) -> "RunningCostFn":
        f = self.eval
        if self.constant_value is not None:
            return RunningCostFn.constant(k * self.constant_value)
        return RunningCostFn(lambda l: k * f(l), self.symmetric,
                             {"type": "scaled", "k": k, "of": self.descriptor})

    @classmethod
    def constant(cls, c: float) -> "RunningCostFn":
        c = float(c)
        return cls(
            lambda l: np.full(np.shape(l), c) if np.ndim(l) else c,
            True,
            {"type": "constant", "c": c},
        )

    @classmethod
    def from_expression(cls, expr: str, symmetric: bool = False) -> "RunningCostFn":
        """Build from an expression in ``x`` (standing for the likelihood ratio)."""
        fn = compile_expression(expr)
        return cls(fn, bool(symmetric), {"type": "expr", "expr": expr, "symmetric": bool(symmetric)})

    @classmethod
    def from_dict(cls, doc: dict) -> "RunningCostFn":
        kind = doc.get("type")
        if kind == "constant":
            return cls.constant(doc["c"])
        if kind == "expr":
            return cls.from_expression(doc["expr"], doc.get("symmetric", False))
        raise CsnrError(f"unknown running cost type {kind!r}")


def _quad(fn, a, b):
    val, err = integrate.quad(fn, a, b, epsabs=_QUAD_ABS, epsrel=1e-13, limit=200)
    if not (math.isfinite(val) and math.isfinite(err)):
        raise CsnrError("quadrature failed: non-finite integrand on the integration path")
    return val


def _weight(f: RunningCostFn, full: bool):
    if full:
        return lambda u: (1.0 + u) * float(f(max(u, _L_FLOOR))) / max(u, _L_FLOOR) ** 2
    return lambda u: float(f(max(u, _L_FLOOR))) / max(u, _L_FLOOR) ** 2


def _vectorize(scalar_fn, l):
    arr = np.asarray(l, dtype=float)
    if np.any(arr <= 0):
        raise ValueError("l must be positive")
    if arr.ndim == 0:
        return scalar_fn(float(arr))
    return np.array([scalar_fn(float(v)) for v in arr.ravel()]).reshape(arr.shape)


def _M(rho0, f, l, full=True):
    g = _weight(f, full)

    def one(x):
        if x == 1.0:
            return 0.0
        return -2.0 / rho0**2 * _quad(lambda u: (x - u) * g(u), 1.0, x)

    return _vectorize(one, l)


def _Mp(rho0, f, l, full=True):
    g = _weight(f, full)

    def one(x):
        if x == 1.0:
            return 0.0
        return -2.0 / rho0**2 * _quad(g, 1.0, x)

    return _vectorize(one, l)


def M_eval(rho0: float, f: RunningCostFn, l):
    """``M(l)`` with ``M'' = -2 (1 + l) f(l) / (rho0^2 l^2)`` and ``M(1) = M'(1) = 0``."""
    return _M(rho0, f, l, True)


def M_prime(rho0: float, f: RunningCostFn, l):
    """``M'(l)``."""
    return _Mp(rho0, f, l, True)


def M_second(rho0: float, f: RunningCostFn, l):
    """``M''(l) = -2 (1 + l) f(l) / (rho0^2 l^2)``."""
    l = np.asarray(l, dtype=float)
    val = -2.0 * (1.0 + l) * np.asarray(f(l), dtype=float) / (rho0**2 * l * l)
    return float(val) if val.ndim == 0 else val


def M_closed_constant(rho0: float, c: float, l):
    """Closed form for ``f == c``: ``-(2c/rho0^2)(l - 1) log l``."""
    l = np.asarray(l, dtype=float)
    val = -2.0 * c / rho0**2 * (l - 1.0) * np.log(l)
    return float(val) if val.ndim == 0 else val


@dataclass(frozen=True, eq=False)
class CsnrSolution:
    """Boundaries and value coefficients of the constant-SNR problem.

    Between the boundaries the (unnormalized) value is ``M(l) + A l + B``.
    ``phi0`` is ``None`` until :func:`solve_phi0` has run.
    """

    rho0: float
    f: RunningCostFn
    A: float
    B: float
    l0: float
    l1: float
    phi0: Optional[float] = None
    residuals: dict = field(default_factory=dict)
    phi0_roots: tuple = ()

    def M(self, l):
        return M_eval(self.rho0, self.f, l)

    def M_prime(self, l):
        return M_prime(self.rho0, self.f, l)

    def W(self, l):
        """Value ``M(l) + A l + B`` inside the band."""
        l = np.asarray(l, dtype=float)
        val = np.asarray(self.M(l)) + self.A * l + self.B
        return float(val) if val.ndim == 0 else val

    def smooth_fit_residuals(self) -> np.ndarray:
        return _fit_system(self.rho0, self.f, self.A, self.B, self.l0, self.l1)

    def rule(self):
        """The band ``(l0, l1)`` as a stopping rule for the weighted likelihood."""
        from .rules import ConstantBand

        return ConstantBand(self.l0, self.l1)

    def to_dict(self) -> dict:
        return {
            "rho0": self.rho0,
            "f": dict(self.f.descriptor),
            "A": self.A,
            "B": self.B,
            "l0": self.l0,
            "l1": self.l1,
            "phi0": self.phi0,
            "phi0_roots": list(self.phi0_roots),
            "residuals": dict(self.residuals),
        }


def _fit_system(rho0, f, A, B, l0, l1) -> np.ndarray:
    M0, M1 = _M(rho0, f, l0), _M(rho0, f, l1)
    P0, P1 = _Mp(rho0, f, l0), _Mp(rho0, f, l1)
    return np.array([M0 + A * l0 + B - l0, M1 + A * l1 + B - 1.0, P0 + A - 1.0, P1 + A])


def _symmetric_s(rho0: float, fbar: RunningCostFn) -> float:
    """Half-width ``s`` of the symmetric band: ``M'(e^-s) - M'(e^s) = 1``."""

    def g(s):
        return _Mp(rho0, fbar, math.exp(-s)) - _Mp(rho0, fbar, math.exp(s)) - 1.0

    hi = 0.05
    while g(hi) < 0:
        hi *= 2.0
        if hi > 60:
            raise CsnrError("no symmetric band found")
    return optimize.brentq(g, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)


def _newton(rho0, f, A, B, a, b, max_iter=60):
    """Damped Newton on the smooth-fit system in ``(A, B, log l0, log l1)``."""
    z = np.array([A, B, a, b], dtype=float)

    def F(z):
        return _fit_system(rho0, f, z[0], z[1], math.exp(z[2]), math.exp(z[3]))

    r = F(z)
    for _ in range(max_iter):
        if np.max(np.abs(r)) <= 1e-14:
            break
        l0, l1 = math.exp(z[2]), math.exp(z[3])
        J = np.array([
            [l0, 1.0, r[2] * l0, 0.0],
            [l1, 1.0, 0.0, r[3] * l1],
            [1.0, 0.0, M_second(rho0, f, l0) * l0, 0.0],
            [1.0, 0.0, 0.0, M_second(rho0, f, l1) * l1],
        ])
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            return None
        lam, norm = 1.0, np.max(np.abs(r))
        while lam > 1e-6:
            cand = z + lam * step
            if cand[2] < 0 < cand[3]:
                rc = F(cand)
                if np.all(np.isfinite(rc)) and np.max(np.abs(rc)) < norm:
                    break
            lam *= 0.5
        else:
            # no descent left: accept if already at roundoff level
            if norm <= 1e-3 * _FIT_TOL:
                break
            return None
        z, r = cand, rc
        if np.max(np.abs(lam * step)) < 1e-15:
            break
    return z, r


def _obstacle_violation(sol: CsnrSolution, n: int = 256) -> float:
    grid = np.linspace(sol.l0, sol.l1, n)
    return float(np.max(sol.W(grid) - np.minimum(1.0, grid)))


def _finalize(rho0, f, A, B, l0, l1) -> CsnrSolution:
    sol = CsnrSolution(float(rho0), f, float(A), float(B), float(l0), float(l1))
    r = sol.smooth_fit_residuals()
    obstacle = _obstacle_violation(sol)
    residuals = {
        "value_l0": float(r[0]),
        "value_l1": float(r[1]),
        "slope_l0": float(r[2]),
        "slope_l1": float(r[3]),
        "obstacle": obstacle,
    }
    sol = replace(sol, residuals=residuals)
    if not 0 < l0 < 1 < l1:
        raise CsnrError(f"boundaries out of order: l0={l0}, l1={l1}")
    if np.max(np.abs(r)) > _FIT_TOL:
        raise CsnrError(f"smooth-fit residual {np.max(np.abs(r)):.3g} above tolerance")
    if obstacle > _FIT_TOL:
        raise CsnrError(f"obstacle inequality violated by {obstacle:.3g}")
    return sol


def _check_inputs(rho0, f):
    if not (rho0 > 0 and math.isfinite(rho0)):
        raise CsnrError("rho0 must be positive")
    if not isinstance(f, RunningCostFn):
        raise CsnrError("f must be a RunningCostFn")


def solve_boundaries(rho0: float, f: RunningCostFn) -> CsnrSolution:
    """Solve the four smooth-fit equations for ``(A, B, l0, l1)`` (``phi0`` unset)."""
    _check_inputs(rho0, f)
    fbar = f.symmetrized()
    s = _symmetric_s(rho0, fbar)
    last_error = None
    for scale in (1.0, 0.5, 2.0, 0.25, 4.0):
        ss = s * scale
        l0, l1 = math.exp(-ss), math.exp(ss)
        A = -_Mp(rho0, fbar, l1)
        B = l0 - _M(rho0, fbar, l0) - A * l0
        out = _newton(rho0, f, A, B, -ss, ss)
        if out is None:
            continue
        z, _ = out
        try:
            return _finalize(rho0, f, z[0], z[1], math.exp(z[2]), math.exp(z[3]))
        except CsnrError as exc:
            last_error = exc
    raise CsnrError(f"Newton failed from every starting point ({last_error})")


def _cost_terms(sol: CsnrSolution, phi0: float):
    """Mixing weights and running-cost terms of the rule ``phi0 L`` in ``(l0, l1)``.

    Returns ``(a, b, p_a, p_b, C0, C1)`` with ``a = l0/phi0``, ``b = l1/phi0``,
    ``p_b`` the null probability of leaving through ``b``, and ``C0``, ``C1``
    the null expectations of ``int f(L) dt`` and ``int L f(L) dt``.
    """
    a, b = sol.l0 / phi0, sol.l1 / phi0
    p_b = (phi0 - sol.l0) / (sol.l1 - sol.l0)
    p_a = 1.0 - p_b
    f, ft = sol.f, sol.f.reflected()
    Mf_a, Mf_b = _M(sol.rho0, f, a, False), _M(sol.rho0, f, b, False)
    Mt_a, Mt_b = _M(sol.rho0, ft, 1.0 / a, False), _M(sol.rho0, ft, 1.0 / b, False)
    C0 = -(p_b * Mf_b + p_a * Mf_a)
    C1 = -(b * p_b * Mt_b + a * p_a * Mt_a)
    return a, b, p_a, p_b, C0, C1


def case1_residual(sol: CsnrSolution, phi0: float) -> float:
    """Slope factor of the risk in the prior odds on the inner branch.

    Positive means the risk still increases with the prior; the least
    favorable ``phi0`` is a zero.  Equals +1 at ``l0`` and -1 at ``l1``.
    """
    a, b, p_a, p_b, C0, C1 = _cost_terms(sol, phi0)
    return (a * p_a + C1) - (p_b + C0)


def solve_phi0(sol: CsnrSolution) -> CsnrSolution:
    """Return ``sol`` with ``phi0`` set to the root of :func:`case1_residual` in ``(l0, l1)``.

    All sign changes found on a 64-point log scan are bisected and recorded
    in ``phi0_roots``; ``phi0`` is the first.
    """
    lo, hi = sol.l0, sol.l1
    d_lo, d_hi = case1_residual(sol, lo), case1_residual(sol, hi)
    if not (d_lo > 0 > d_hi):
        raise CsnrError(f"unexpected endpoint signs {d_lo:.3g}, {d_hi:.3g}")
    grid = np.geomspace(lo, hi, 65)
    vals = [d_lo] + [case1_residual(sol, p) for p in grid[1:-1]] + [d_hi]
    roots = []
    for i in range(len(grid) - 1):
        if vals[i] == 0.0:
            roots.append(float(grid[i]))
        elif vals[i] * vals[i + 1] < 0:
            roots.append(float(_bisect(lambda p: case1_residual(sol, p), grid[i], grid[i + 1], vals[i])))
    if not roots:
        raise CsnrError("no least favorable prior found")
    phi0 = roots[0]
    residuals = dict(sol.residuals)
    residuals["case1"] = float(case1_residual(sol, phi0))
    return replace(sol, phi0=phi0, phi0_roots=tuple(roots), residuals=residuals)


def _bisect(fn, a, b, fa, rel=1e-12):
    while b - a > rel * b:
        m = 0.5 * (a + b)
        fm = fn(m)
        if fm == 0.0:
            return m
        if (fm > 0) == (fa > 0):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)


def eval_Ubar(sol: CsnrSolution, psi: float, phi0: Optional[float] = None) -> float:
    """Risk at prior odds ``psi`` of the rule ``phi0 L_t not in (l0, l1)``.

    The risk is ``(1+psi)^-1 E[min(1, psi L_tau) + int (1 + psi L) f(L) dt]``
    under the null, which is linear in ``psi`` on each of the three ranges
    separated by ``phi0/l1`` and ``phi0/l0``.
    """
    if phi0 is None:
        phi0 = sol.phi0
    if phi0 is None:
        raise CsnrError("phi0 is not set; call solve_phi0 first")
    if not psi > 0:
        raise ValueError("psi must be positive")
    a, b, p_a, p_b, C0, C1 = _cost_terms(sol, phi0)
    error_term = p_b * min(1.0, psi * b) + p_a * min(1.0, psi * a)
    return (error_term + C0 + psi * C1) / (1.0 + psi)


def symmetric_shortcut(rho0: float, f: RunningCostFn) -> CsnrSolution:
    """Solve the symmetric case as one equation with ``l0 = 1/l1`` and ``phi0 = 1``.

    The full four-equation system and the prior condition are re-checked.
    """
    _check_inputs(rho0, f)
    if not f.symmetric:
        raise CsnrError("symmetric_shortcut requires a symmetric running cost")
    s = _symmetric_s(rho0, f)
    l0, l1 = math.exp(-s), math.exp(s)
    A = -_Mp(rho0, f, l1)
    B = l0 - _M(rho0, f, l0) - A * l0
    sol = _finalize(rho0, f, A, B, l0, l1)
    resid = case1_residual(sol, 1.0)
    if abs(resid) > _FIT_TOL:
        raise CsnrError(f"prior condition residual {resid:.3g} at phi0 = 1")
    residuals = dict(sol.residuals)
    residuals["case1"] = float(resid)
    return replace(sol, phi0=1.0, phi0_roots=(1.0,), residuals=residuals)


def solve(rho0: float, f: RunningCostFn) -> CsnrSolution:
    """Boundaries followed by the least favorable prior."""
    return solve_phi0(solve_boundaries(rho0, f))
