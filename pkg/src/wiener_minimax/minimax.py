"""Least favorable prior odds by Monte Carlo derivatives of the risk.

For the rule ``tau*(phi)`` (stop when ``phi L`` leaves the optimal band)
the right derivative of ``psi -> Jbar(x0, psi; tau*(phi))`` at ``psi = phi``
is ``B(phi) / (1 + phi)^2`` with

    B(phi) = E0[L_tau 1{phi L_tau < 1}] - P0(phi L_tau >= 1) - c E0 int_0^tau (1 - L_t) dt.

``B`` decreases from +1 at the lower end of the bracket ``(l0(x0), l1(x0))``
to -1 at the upper end; its zeros are the least favorable prior odds.
Every evaluation of ``B`` reuses the same random stream, so the estimated
curve inherits the smoothness of the exact one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import DiffusionModel
from .risk import as_rule, jbar_terms, simulate_rule
from .rules import StoppingRule
from .simulate import MCSettings, RngSpec, batch_mean_se

__all__ = [
    "MinimaxError",
    "BracketError",
    "NoSignChangeError",
    "DerivativeEstimate",
    "RootEstimate",
    "LfdResult",
    "SaddleReport",
    "dJ_dpsi",
    "find_lfd",
    "verify_saddle",
    "MASS_TOL",
]

MASS_TOL = 1e-9
_EDGE_MARGIN = 1e-6


class MinimaxError(RuntimeError):
    """Base class for failures of the least-favorable-prior search."""


class BracketError(MinimaxError, ValueError):
    """Prior odds outside the continuation bracket at ``x0``."""


class NoSignChangeError(MinimaxError):
    """The derivative keeps one sign over the whole bracket."""

    def __init__(self, message, scan=()):
        super().__init__(message)
        self.scan = list(scan)


@dataclass
class DerivativeEstimate:
    """Estimated derivative of the risk in the prior odds at ``psi = phi``.

    ``value`` / ``stderr`` refer to ``dJbar/dpsi``; ``bracket`` /
    ``bracket_stderr`` to the unscaled ``B(phi) = (1+phi)^2 dJbar/dpsi``
    whose endpoint values are +1 and -1.
    """

    phi: float
    value: float
    stderr: float
    n_paths: int
    mass_at_one: float
    bracket: float = float("nan")
    bracket_stderr: float = float("nan")
    bracket_nonstrict: float = float("nan")
    horizon_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {
            "phi": self.phi,
            "derivative": self.value,
            "stderr": self.stderr,
            "bracket": self.bracket,
            "bracket_stderr": self.bracket_stderr,
            "bracket_nonstrict": self.bracket_nonstrict,
            "mass_at_one": self.mass_at_one,
            "n_paths": self.n_paths,
            "horizon_fraction": self.horizon_fraction,
        }


@dataclass
class RootEstimate:
    phi0: float
    residual: float
    stderr: float
    root_stderr: float

    @property
    def consistent(self) -> bool:
        """``|residual| <= 3 stderr``."""
        return abs(self.residual) <= 3.0 * self.stderr

    def to_dict(self) -> dict:
        return {"phi0": self.phi0, "residual": self.residual, "stderr": self.stderr,
                "root_stderr": self.root_stderr, "consistent": self.consistent}


@dataclass
class LfdResult:
    """Roots of the derivative inside the bracket plus diagnostics."""

    x0: float
    roots: list[RootEstimate]
    bracket: tuple[float, float]
    endpoint_checks: tuple[DerivativeEstimate, DerivativeEstimate]
    scan: list[DerivativeEstimate] = field(default_factory=list)
    tol: float = 1e-3
    meta: dict = field(default_factory=dict)

    @property
    def phi0(self) -> float:
        return self.roots[0].phi0

    def to_dict(self) -> dict:
        return {
            "x0": self.x0,
            "bracket": list(self.bracket),
            "tol": self.tol,
            "roots": [r.to_dict() for r in self.roots],
            "endpoint_checks": {
                "lower": self.endpoint_checks[0].to_dict(),
                "upper": self.endpoint_checks[1].to_dict(),
            },
            "scan": [d.to_dict() for d in self.scan],
            **self.meta,
        }


@dataclass
class SaddleReport:
    """Risk of the rule ``tau*(phi0)`` over a grid of priors, and of perturbed rules."""

    phi0: float
    reference: float
    reference_stderr: float
    psi: list[float]
    values: list[float]
    stderrs: list[float]
    paired_stderrs: list[float]
    violations: list[float]
    rule_checks: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations and all(c["passed"] for c in self.rule_checks)

    def to_dict(self) -> dict:
        return {
            "phi0": self.phi0,
            "reference": self.reference,
            "reference_stderr": self.reference_stderr,
            "grid": [
                {"psi": p, "Jbar": v, "stderr": s, "paired_stderr": ps}
                for p, v, s, ps in zip(self.psi, self.values, self.stderrs, self.paired_stderrs)
            ],
            "violations": list(self.violations),
            "rule_checks": list(self.rule_checks),
            "passed": self.passed,
        }


def _bracket_at(rule: StoppingRule, x0: float) -> tuple[float, float]:
    return rule.band_at(x0)


def dJ_dpsi(
    model: DiffusionModel,
    x0: float,
    phi: float,
    boundaries,
    mc: MCSettings,
    rng: RngSpec = RngSpec(),
) -> DerivativeEstimate:
    """Right derivative of ``psi -> Jbar(x0, psi; tau*(phi))`` at ``psi = phi``."""
    rule = as_rule(boundaries)
    lo, hi = _bracket_at(rule, x0)
    if not lo < phi < hi:
        raise BracketError(f"phi={phi} outside the bracket ({lo}, {hi})")
    sample = simulate_rule(model, x0, phi, rule, mc, rng)
    L = sample.L_tau
    phiL = phi * L
    below = phiL < 1.0
    wait = model.cost_rate * (sample.tau - sample.int_L)
    term = np.where(below, L, -1.0) - wait
    term_ns = np.where(phiL <= 1.0, L, -1.0) - wait
    B, se = batch_mean_se(term, sample.batch, sample.n_batches)
    mass = float(np.mean(np.abs(phiL - 1.0) <= MASS_TOL))
    scale = 1.0 / (1.0 + phi) ** 2
    return DerivativeEstimate(
        phi=float(phi),
        value=B * scale,
        stderr=se * scale,
        n_paths=sample.n_paths,
        mass_at_one=mass,
        bracket=B,
        bracket_stderr=se,
        bracket_nonstrict=float(np.mean(term_ns)),
        horizon_fraction=sample.fraction("horizon"),
    )


def find_lfd(
    model: DiffusionModel,
    x0: float,
    boundaries,
    tol: float = 1e-3,
    mc: MCSettings = MCSettings(),
    rng: RngSpec = RngSpec(),
    n_scan: int = 17,
    bracket: Optional[tuple[float, float]] = None,
    estimator: Optional[Callable[[float], DerivativeEstimate]] = None,
) -> LfdResult:
    """Scan the bracket for sign changes of the derivative and bisect each one.

    The bracket is ``(l0(x0), l1(x0))`` shrunk by a relative margin of 1e-6
    at both ends; its two end points belong to the scan and double as the
    endpoint checks.  Each sign change is bisected to width
    ``tol * (bracket width)``, then closed with one secant step.
    ``estimator`` replaces the Monte Carlo derivative (useful for tests).
    """
    rule = as_rule(boundaries)
    lo_b, hi_b = _bracket_at(rule, x0)
    if bracket is not None:
        lo_o, hi_o = map(float, bracket)
        if not lo_b <= lo_o < hi_o <= hi_b:
            raise BracketError(f"bracket override ({lo_o}, {hi_o}) not inside ({lo_b}, {hi_b})")
        lo_b, hi_b = lo_o, hi_o
    if not 0 < lo_b < hi_b:
        raise BracketError("degenerate bracket")
    if n_scan < 2:
        raise ValueError("n_scan must be at least 2")
    lo, hi = lo_b * (1.0 + _EDGE_MARGIN), hi_b * (1.0 - _EDGE_MARGIN)
    if estimator is None:
        def estimator(p):
            return dJ_dpsi(model, x0, p, rule, mc, rng)

    grid = np.geomspace(lo, hi, n_scan)
    scan = [estimator(float(p)) for p in grid]
    vals = np.array([d.bracket for d in scan])
    ses = np.array([d.bracket_stderr for d in scan])

    roots: list[RootEstimate] = []
    width = tol * (hi_b - lo_b)
    for k in range(n_scan - 1):
        a, b = scan[k], scan[k + 1]
        if a.bracket == 0.0:
            roots.append(RootEstimate(a.phi, 0.0, a.bracket_stderr, 0.0))
            continue
        if a.bracket * b.bracket > 0:
            continue
        slope = (b.bracket - a.bracket) / (b.phi - a.phi)
        while b.phi - a.phi > width:
            m = estimator(0.5 * (a.phi + b.phi))
            if m.bracket == 0.0:
                a = b = m
                break
            if (m.bracket > 0) == (a.bracket > 0):
                a = m
            else:
                b = m
        if a is b:
            root = a.phi
        else:
            root = a.phi - a.bracket * (b.phi - a.phi) / (b.bracket - a.bracket)
            root = min(max(root, a.phi), b.phi)
        at = estimator(float(root))
        root_se = at.bracket_stderr / abs(slope) if slope != 0 else float("inf")
        roots.append(RootEstimate(float(root), at.bracket, at.bracket_stderr, root_se))
        scan.append(at)

    if not roots:
        if np.all(vals - 3 * ses > 0) or np.all(vals + 3 * ses < 0):
            raise NoSignChangeError("derivative keeps one sign over the bracket", scan)
        raise NoSignChangeError("no sign change resolved on the scan grid", scan)
    scan_sorted = sorted(scan, key=lambda d: d.phi)
    meta = {"n_scan": n_scan, "seed": int(rng.seed), "stream": int(rng.stream),
            "n_paths": mc.n_paths, "n_batches": mc.n_batches, "dt": mc.dt}
    return LfdResult(float(x0), roots, (lo_b, hi_b), (scan[0], scan[n_scan - 1]),
                     scan_sorted, tol, meta)


def _paired_se(diff, batch, n_batches):
    return batch_mean_se(diff, batch, n_batches)[1]


def verify_saddle(
    model: DiffusionModel,
    x0: float,
    phi0: float,
    boundaries,
    psi_grid: Sequence[float],
    mc: MCSettings,
    rng: RngSpec = RngSpec(),
    delta: Optional[float] = 0.05,
    n_se: float = 3.0,
) -> SaddleReport:
    """Check ``Jbar(psi; tau*(phi0)) <= Jbar(phi0; tau*(phi0)) + n_se * SE`` on ``psi_grid``.

    All priors are evaluated on one simulation of ``tau*(phi0)``.  The
    combined SE is ``sqrt(se_psi^2 + se_phi0^2)``; the paired SE of the
    difference is reported as well.  With ``delta`` the rules
    ``tau*(phi0 (1 +- delta))`` are also checked not to beat ``tau*(phi0)``
    at the prior ``phi0``.
    """
    if any(not p > 0 for p in psi_grid):
        raise ValueError("psi values must be positive")
    rule = as_rule(boundaries)
    c = model.cost_rate
    sample = simulate_rule(model, x0, phi0, rule, mc, rng)

    def per_path(s, psi):
        err, wait = jbar_terms(s, psi, c)
        return (err + wait) / (1.0 + psi)

    ref_path = per_path(sample, phi0)
    ref, ref_se = batch_mean_se(ref_path, sample.batch, sample.n_batches)
    values, ses, pses, bad = [], [], [], []
    for psi in psi_grid:
        vp = per_path(sample, float(psi))
        v, se = batch_mean_se(vp, sample.batch, sample.n_batches)
        pse = _paired_se(vp - ref_path, sample.batch, sample.n_batches)
        values.append(v)
        ses.append(se)
        pses.append(pse)
        if v > ref + n_se * math.hypot(se, ref_se):
            bad.append(float(psi))
    checks = []
    if delta:
        lo_b, hi_b = _bracket_at(rule, x0)
        for fac in (1.0 - delta, 1.0 + delta):
            phi_r = phi0 * fac
            if not lo_b < phi_r < hi_b:
                continue
            s2 = simulate_rule(model, x0, phi_r, rule, mc, rng)
            vp = per_path(s2, phi0)
            v, se = batch_mean_se(vp, s2.batch, s2.n_batches)
            passed = v >= ref - n_se * math.hypot(se, ref_se)
            checks.append({"phi_rule": phi_r, "Jbar": v, "stderr": se, "passed": bool(passed)})
    return SaddleReport(float(phi0), ref, ref_se, [float(p) for p in psi_grid], values, ses,
                        pses, bad, checks)
