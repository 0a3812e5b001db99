"""Diffusion models for the two-drift testing problem.

A model is the triple of coefficients ``mu0``, ``mu1``, ``sigma`` on an open
interval together with the observation cost rate ``c``.  The observed state
follows ``dX = mu_theta(X) dt + sigma(X) dB`` where ``theta`` is the unknown
hypothesis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .expression import compile_expression

__all__ = [
    "ModelError",
    "CoefficientFn",
    "DiffusionModel",
    "AssumptionReport",
    "snr",
    "K_fn",
    "check_assumptions",
    "default_grid",
    "builtin_bessel",
    "builtin_power",
    "constant_model",
    "model_from_dict",
    "REGIMES",
]

REGIMES = ("A31", "A32", "constant_snr", "none")


class ModelError(ValueError):
    """Invalid model construction or evaluation outside the model's domain."""


def _fd_step(x):
    return np.maximum(1e-6, 1e-6 * np.abs(x))


@dataclass(frozen=True)
class CoefficientFn:
    """A scalar coefficient ``x -> value`` with an optional exact derivative.

    Both callables must accept numpy arrays.  ``label`` is a human/JSON
    readable description used in manifests.
    """

    eval: Callable[[Any], Any]
    eval_d: Optional[Callable[[Any], Any]] = None
    label: str = ""

    def __call__(self, x):
        return self.eval(x)

    def derivative(self, x):
        if self.eval_d is not None:
            return self.eval_d(x)
        h = _fd_step(np.asarray(x, dtype=float))
        return (self.eval(x + h) - self.eval(x - h)) / (2.0 * h)

    @classmethod
    def constant(cls, value: float) -> "CoefficientFn":
        value = float(value)
        return cls(
            lambda x: np.full(np.shape(x), value) if np.ndim(x) else value,
            lambda x: np.zeros(np.shape(x)) if np.ndim(x) else 0.0,
            label=repr(value),
        )

    @classmethod
    def from_expression(cls, text: str) -> "CoefficientFn":
        return cls(compile_expression(text), None, label=text)


@dataclass(frozen=True)
class DiffusionModel:
    """Coefficients, state domain and cost rate of one testing problem."""

    domain: tuple[float, float]
    mu0: CoefficientFn
    mu1: CoefficientFn
    sigma: CoefficientFn
    cost_rate: float = 1.0
    name: str = "custom"
    descriptor: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        lo, hi = (float(v) for v in self.domain)
        if not lo < hi:
            raise ModelError(f"empty domain ({lo}, {hi})")
        if not (self.cost_rate > 0 and math.isfinite(self.cost_rate)):
            raise ModelError("cost_rate must be positive and finite")
        object.__setattr__(self, "domain", (lo, hi))

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x > self.domain[0]) & (x < self.domain[1])

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(self.contains(x)):
            raise ModelError(f"x outside the open domain {self.domain}")
        return x

    def rho(self, x):
        """Signal-to-noise ratio (mu1 - mu0) / sigma, no domain check."""
        return (self.mu1(x) - self.mu0(x)) / self.sigma(x)

    def rho2(self, x):
        r = self.rho(x)
        return r * r

    def K(self, x, analytic: Optional[bool] = None):
        return K_fn(self, x, analytic=analytic)

    def to_dict(self) -> dict:
        if self.descriptor:
            return dict(self.descriptor)
        return {
            "type": "custom",
            "domain": [_finite_or_none(v) for v in self.domain],
            "mu0": self.mu0.label,
            "mu1": self.mu1.label,
            "sigma": self.sigma.label,
            "cost_rate": self.cost_rate,
        }


def _finite_or_none(v: float):
    return v if math.isfinite(v) else None


def snr(model: DiffusionModel, x):
    """Return rho(x) = (mu1(x) - mu0(x)) / sigma(x) at interior ``x``."""
    x = model._check(x)
    s = model.sigma(x)
    if np.any(np.asarray(s) <= 0):
        raise ModelError("sigma must be positive")
    return (model.mu1(x) - model.mu0(x)) / s


def K_fn(model: DiffusionModel, x, analytic: Optional[bool] = None):
    """Return K(x) = mu0/(mu1-mu0) - 1/2 * d/dx[sigma^2/(mu1-mu0)].

    With ``analytic=None`` exact derivatives are used when all three
    coefficients carry one, otherwise a central difference of
    ``sigma^2/(mu1-mu0)`` with step ``max(1e-6, 1e-6|x|)``.
    """
    x = model._check(x)
    m0, m1, s = model.mu0(x), model.mu1(x), model.sigma(x)
    delta = m1 - m0
    if np.any(np.asarray(delta) == 0):
        raise ModelError("mu1(x) == mu0(x): signal-to-noise ratio vanishes")
    have_d = all(c.eval_d is not None for c in (model.mu0, model.mu1, model.sigma))
    if analytic is None:
        analytic = have_d
    if analytic:
        if not have_d:
            raise ModelError("analytic derivatives requested but not available")
        dd = model.mu1.derivative(x) - model.mu0.derivative(x)
        ds = model.sigma.derivative(x)
        dq = (2.0 * s * ds * delta - s * s * dd) / (delta * delta)
    else:
        h = _fd_step(x)
        lo, hi = model.domain
        # stay inside the domain near a finite endpoint
        h = np.minimum(h, 0.5 * np.minimum(x - lo, hi - x))

        def q(y):
            return model.sigma(y) ** 2 / (model.mu1(y) - model.mu0(y))

        dq = (q(x + h) - q(x - h)) / (2.0 * h)
    return m0 / delta - 0.5 * dq


@dataclass
class AssumptionReport:
    """Outcome of checking the monotonicity / K(x) assumptions on a grid."""

    rho2_direction: str
    K_samples: list[tuple[float, float]]
    regime: str
    violations: list[tuple[float, str]]
    plateaus: list[float] = field(default_factory=list)
    assumed: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.regime != "none"

    def to_dict(self) -> dict:
        return {
            "rho2_direction": self.rho2_direction,
            "regime": self.regime,
            "K_samples": [[x, k] for x, k in self.K_samples],
            "violations": [[x, msg] for x, msg in self.violations],
            "plateaus": list(self.plateaus),
            "assumed": list(self.assumed),
        }


def default_grid(model: DiffusionModel, n: int = 512) -> np.ndarray:
    """Interior sample points: log-spaced away from finite endpoints."""
    lo, hi = model.domain
    offsets = np.geomspace(1e-2, 1e2, n)
    if math.isfinite(lo) and math.isfinite(hi):
        return np.linspace(lo, hi, n + 2)[1:-1]
    if math.isfinite(lo):
        return lo + offsets
    if math.isfinite(hi):
        return (hi - offsets)[::-1]
    return np.sinh(np.linspace(-5.3, 5.3, n))


def check_assumptions(
    model: DiffusionModel, sample_grid: Optional[Sequence[float]] = None
) -> AssumptionReport:
    """Classify the model against the two structural assumptions on a grid.

    ``rho^2`` monotonicity is judged from consecutive grid points with a
    relative tolerance of 1e-12; flat stretches are accepted and reported
    as plateaus.
    """
    grid = default_grid(model) if sample_grid is None else np.asarray(sample_grid, float)
    if grid.size == 0:
        raise ModelError("sample_grid must be nonempty")
    assumed = ["integral of rho^2 along paths diverges (not checkable from coefficients)"]
    violations: list[tuple[float, str]] = []

    inside = model.contains(grid)
    for xv in grid[~inside]:
        violations.append((float(xv), "outside domain"))
    grid = grid[inside]
    with np.errstate(all="ignore"):
        sig = np.asarray(model.sigma(grid), dtype=float) * np.ones_like(grid)
        delta = np.asarray(model.mu1(grid) - model.mu0(grid), dtype=float) * np.ones_like(grid)
    bad = ~np.isfinite(sig) | (sig <= 0) | ~np.isfinite(delta) | (delta == 0)
    for xv in grid[bad]:
        violations.append((float(xv), "degenerate coefficients (sigma <= 0 or mu1 == mu0)"))
    if violations:
        return AssumptionReport("non_monotone", [], "none", violations, assumed=assumed)

    rho2 = (delta / sig) ** 2
    K = np.asarray(K_fn(model, grid), dtype=float) * np.ones_like(grid)
    samples = [(float(a), float(b)) for a, b in zip(grid, K)]
    d = np.diff(rho2)
    tol = 1e-12 * max(float(np.max(np.abs(rho2))), 1e-300)
    flat = np.abs(d) <= tol
    if d.size == 0 or np.all(flat):
        return AssumptionReport("constant", samples, "constant_snr", [], assumed=assumed)
    if np.all(d <= tol):
        direction = "decreasing"
    elif np.all(d >= -tol):
        direction = "increasing"
    else:
        direction = "non_monotone"
    plateaus = [float(v) for v in grid[:-1][flat]]

    if direction == "decreasing":
        for xv, kv in zip(grid, K):
            if not kv > -0.5:
                violations.append((float(xv), f"K={kv:.6g} <= -1/2 with rho^2 decreasing"))
        regime = "A31" if not violations else "none"
    elif direction == "increasing":
        for xv, kv in zip(grid, K):
            if not kv < -0.5:
                violations.append((float(xv), f"K={kv:.6g} >= -1/2 with rho^2 increasing"))
        regime = "A32" if not violations else "none"
    else:
        sign = np.sign(d[~flat])
        change = np.flatnonzero(sign[1:] != sign[:-1])
        xs = grid[:-1][~flat]
        for i in change:
            violations.append((float(xs[i + 1]), "rho^2 changes monotonicity"))
        regime = "none"
    return AssumptionReport(direction, samples, regime, violations, plateaus, assumed)


def builtin_bessel(delta0: float, delta1: float, cost_rate: float = 1.0) -> DiffusionModel:
    """Bessel process of dimension ``delta0`` (null) or ``delta1`` (alternative)."""
    delta0, delta1 = float(delta0), float(delta1)
    if not delta1 > delta0:
        raise ModelError("builtin_bessel requires delta1 > delta0")

    def drift(delta):
        a = (delta - 1.0) / 2.0
        return CoefficientFn(lambda x: a / x, lambda x: -a / (x * x), label=f"{a!r}/x")

    return DiffusionModel(
        domain=(0.0, math.inf),
        mu0=drift(delta0),
        mu1=drift(delta1),
        sigma=CoefficientFn.constant(1.0),
        cost_rate=cost_rate,
        name=f"bessel({delta0:g},{delta1:g})",
        descriptor={"type": "bessel", "delta0": delta0, "delta1": delta1, "cost_rate": cost_rate},
    )


def builtin_power(
    eta0: float,
    eta1: float,
    sigma: Optional[CoefficientFn] = None,
    cost_rate: float = 1.0,
) -> DiffusionModel:
    """Drifts ``mu_i(x) = eta_i sigma(x)^2 / x`` on (0, inf); ``sigma`` defaults to ``x``."""
    eta0, eta1 = float(eta0), float(eta1)
    if eta0 == eta1:
        raise ModelError("builtin_power requires eta0 != eta1")
    if sigma is None:
        sigma = CoefficientFn(lambda x: x * 1.0, lambda x: np.ones_like(x) * 1.0, label="x")

    def drift(eta):
        def f(x):
            return eta * sigma(x) ** 2 / x

        d = None
        if sigma.eval_d is not None:
            def d(x):
                s = sigma(x)
                return eta * (2.0 * s * sigma.derivative(x) * x - s * s) / (x * x)

        return CoefficientFn(f, d, label=f"{eta!r}*({sigma.label})^2/x")

    return DiffusionModel(
        domain=(0.0, math.inf),
        mu0=drift(eta0),
        mu1=drift(eta1),
        sigma=sigma,
        cost_rate=cost_rate,
        name=f"power({eta0:g},{eta1:g})",
        descriptor={
            "type": "power",
            "eta0": eta0,
            "eta1": eta1,
            "sigma": sigma.label or "x",
            "cost_rate": cost_rate,
        },
    )


def constant_model(
    mu0: float = 0.0, mu1: float = 1.0, sigma: float = 1.0, cost_rate: float = 1.0
) -> DiffusionModel:
    """Brownian motion with constant drifts on the real line (constant SNR)."""
    if sigma <= 0:
        raise ModelError("sigma must be positive")
    if mu0 == mu1:
        raise ModelError("mu0 == mu1")
    return DiffusionModel(
        domain=(-math.inf, math.inf),
        mu0=CoefficientFn.constant(mu0),
        mu1=CoefficientFn.constant(mu1),
        sigma=CoefficientFn.constant(sigma),
        cost_rate=cost_rate,
        name="constant",
        descriptor={
            "type": "constant",
            "mu0": float(mu0),
            "mu1": float(mu1),
            "sigma": float(sigma),
            "cost_rate": float(cost_rate),
        },
    )


def _domain_from(value) -> tuple[float, float]:
    if value is None:
        return (-math.inf, math.inf)
    if len(value) != 2:
        raise ModelError("domain must be a pair [lo, hi] (null for infinite)")
    lo = -math.inf if value[0] is None else float(value[0])
    hi = math.inf if value[1] is None else float(value[1])
    return lo, hi


def model_from_dict(doc: dict) -> DiffusionModel:
    """Build a model from its JSON descriptor.

    Recognized ``type`` values: ``bessel`` (delta0, delta1), ``power``
    (eta0, eta1, optional sigma expression), ``constant`` (mu0, mu1, sigma)
    and ``custom`` (domain, mu0, mu1, sigma expressions).  Every type takes
    ``cost_rate`` (default 1).
    """
    if not isinstance(doc, dict) or "type" not in doc:
        raise ModelError("model descriptor must be an object with a 'type'")
    kind = doc["type"]
    c = float(doc.get("cost_rate", 1.0))
    try:
        if kind == "bessel":
            return builtin_bessel(doc["delta0"], doc["delta1"], cost_rate=c)
        if kind == "power":
            sig = doc.get("sigma")
            sigma = None if sig in (None, "x") else CoefficientFn.from_expression(str(sig))
            return builtin_power(doc["eta0"], doc["eta1"], sigma, cost_rate=c)
        if kind == "constant":
            return constant_model(
                float(doc.get("mu0", 0.0)), float(doc.get("mu1", 1.0)),
                float(doc.get("sigma", 1.0)), cost_rate=c,
            )
        if kind == "custom":
            coeffs = {}
            for key in ("mu0", "mu1", "sigma"):
                val = doc[key]
                coeffs[key] = (
                    CoefficientFn.constant(val)
                    if isinstance(val, (int, float))
                    else CoefficientFn.from_expression(str(val))
                )
            descriptor = dict(doc)
            descriptor["cost_rate"] = c
            return DiffusionModel(
                domain=_domain_from(doc.get("domain")),
                cost_rate=c,
                name=str(doc.get("name", "custom")),
                descriptor=descriptor,
                **coeffs,
            )
    except KeyError as exc:
        raise ModelError(f"model descriptor missing field {exc.args[0]!r}") from None
    raise ModelError(f"unknown model type {kind!r}")
