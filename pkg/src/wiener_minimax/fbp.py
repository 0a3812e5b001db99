"""Grid solver for the optimal stopping problem in ``(x, u = log phi)``.

The value ``V(x, phi) = inf_tau E[G(Phi_tau) + int_0^tau H dt]`` with payoff
``G = min(1, phi)`` and running cost ``H = c (1 + phi)`` solves the obstacle
problem ``min(L V + H, G - V) = 0``.  Under the null

    dX = mu0 dt + sigma dB,     du = -rho^2/2 dt + rho dB,

so the diffusion matrix has rank one.  Along the curves ``u - F(x) = const``
with ``F' = rho / sigma`` (the noise direction) the generator becomes

    L V = sigma^2/2 g'' + mu0 g' - rho^2 (K + 1/2) V_u,

where ``g`` is ``V`` restricted to the curve through the node.  Second
differences are therefore taken between ``(x_i, u_j)`` and the points
``(x_{i+-1}, u_j + F(x_{i+-1}) - F(x_i))``, read off the neighbouring rows by
linear interpolation in ``u``; first-order terms are upwinded.  All weights
are nonnegative, so ``-L`` is an M-matrix and the scheme is monotone.

Rows at the ends of the ``u`` range carry ``V = G``; off-grid ``u`` values use
``G`` directly.  In ``x`` the ghost row beyond each end is the end row itself
(zero Neumann).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, sparse
from scipy.sparse import linalg as spla

from .model import DiffusionModel, K_fn, check_assumptions
from .rules import BoundaryPair

__all__ = [
    "FbpError",
    "RegimeError",
    "ConvergenceError",
    "ExtractionError",
    "Grid2D",
    "SolverParams",
    "ValueSurface",
    "BoundaryPair",
    "BoundaryReport",
    "build_operator",
    "solve_vi",
    "solve_finite_horizon",
    "extract_boundaries",
    "validate_boundaries",
    "complementarity_residual",
]


class FbpError(RuntimeError):
    """Base class for grid-solver failures."""


class RegimeError(FbpError):
    """The model does not satisfy a structural assumption the solver needs."""


class ConvergenceError(FbpError):
    """The iterative solver did not reach the requested tolerance."""


class ExtractionError(FbpError):
    """Boundaries could not be read off the surface (truncation too narrow)."""


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Tensor grid of ``x`` nodes and ``u = log phi`` nodes."""

    x_nodes: np.ndarray
    logphi_nodes: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_nodes, dtype=float)
        u = np.asarray(self.logphi_nodes, dtype=float)
        for name, arr in (("x_nodes", x), ("logphi_nodes", u)):
            if arr.ndim != 1 or arr.size < 16:
                raise ValueError(f"{name} needs at least 16 nodes")
            d = np.diff(arr)
            if np.any(d <= 0):
                raise ValueError(f"{name} must be strictly increasing")
            if d.max() / d.min() > 10.0 + 1e-12:
                raise ValueError(f"{name} spacing ratio exceeds 10")
        if not (u[0] < 0 < u[-1]):
            raise ValueError("logphi_nodes must bracket 0")
        object.__setattr__(self, "x_nodes", x)
        object.__setattr__(self, "logphi_nodes", u)

    @classmethod
    def uniform(cls, x_lo, x_hi, nx, u_lo=-8.0, u_hi=8.0, nu=513) -> "Grid2D":
        return cls(np.linspace(x_lo, x_hi, nx), np.linspace(u_lo, u_hi, nu))

    @property
    def shape(self) -> tuple[int, int]:
        return self.x_nodes.size, self.logphi_nodes.size

    @property
    def phi(self) -> np.ndarray:
        return np.exp(self.logphi_nodes)

    def to_dict(self) -> dict:
        x, u = self.x_nodes, self.logphi_nodes
        uniform = np.allclose(np.diff(x), x[1] - x[0]) and np.allclose(np.diff(u), u[1] - u[0])
        if uniform:
            return {"x": [float(x[0]), float(x[-1]), int(x.size)],
                    "logphi": [float(u[0]), float(u[-1]), int(u.size)]}
        return {"x_nodes": x.tolist(), "logphi_nodes": u.tolist()}


@dataclass(frozen=True)
class SolverParams:
    """Settings of the obstacle solver.

    ``method`` is ``"policy"`` (policy iteration, one sparse direct solve per
    iteration) or ``"psor"`` (projected SOR, intended for small grids).
    """

    method: str = "policy"
    tol: float = 1e-8
    max_iters: int = 100_000
    omega: float = 1.5
    contact_tol: Optional[float] = None

    def __post_init__(self):
        if self.method not in ("policy", "psor"):
            raise ValueError("method must be 'policy' or 'psor'")
        if not self.tol > 0 or self.max_iters < 1 or not 0 < self.omega < 2:
            raise ValueError("invalid solver settings")


@dataclass(eq=False)
class ValueSurface:
    """Grid values ``V[i, j] ~ V(x_i, exp(u_j))`` and solver diagnostics."""

    grid: Grid2D
    V: np.ndarray
    residual: float
    iterations: int
    cost_rate: float = 1.0
    horizon: Optional[float] = None
    method: str = "policy"
    meta: dict = field(default_factory=dict)

    @property
    def G(self) -> np.ndarray:
        return np.broadcast_to(np.minimum(1.0, self.grid.phi), self.V.shape)

    def value_at(self, x: float, phi: float) -> float:
        """Bilinear interpolation in ``(x, log phi)``."""
        xs, us = self.grid.x_nodes, self.grid.logphi_nodes
        u = math.log(phi)
        row = np.array([np.interp(u, us, self.V[i]) for i in range(xs.size)])
        return float(np.interp(x, xs, row))


@dataclass
class BoundaryReport:
    """Outcome of :func:`validate_boundaries`."""

    passed: bool
    first_violation: Optional[int] = None
    message: str = "ok"

    def to_dict(self) -> dict:
        return {"passed": self.passed, "first_violation": self.first_violation,
                "message": self.message}


def _antiderivative(fn, x: np.ndarray) -> np.ndarray:
    """``F(x_i) - F(x_0)`` for ``F' = fn`` by Gauss–Kronrod on each cell."""
    F = np.zeros_like(x)
    for i in range(1, x.size):
        F[i] = F[i - 1] + integrate.quad(lambda s: float(fn(s)), x[i - 1], x[i],
                                         epsabs=1e-14, epsrel=1e-12)[0]
    return F


def build_operator(model: DiffusionModel, grid: Grid2D):
    """Return ``(A, known)`` with ``-L V = A V - known`` on interior rows.

    ``A`` is a sparse M-matrix of size ``nx*nu``; Dirichlet rows (first and
    last ``u`` node) are identity rows and ``known`` collects the weights
    multiplying ``G`` at off-grid points.
    """
    x, u = grid.x_nodes, grid.logphi_nodes
    nx, nu = grid.shape
    N = nx * nu
    sig = np.asarray(model.sigma(x), dtype=float) * np.ones(nx)
    m0 = np.asarray(model.mu0(x), dtype=float) * np.ones(nx)
    rho = np.asarray(model.rho(x), dtype=float) * np.ones(nx)
    if np.any(sig <= 0) or not np.all(np.isfinite(rho)) or np.any(rho == 0):
        raise RegimeError("degenerate coefficients on the grid")
    kappa = rho**2 * (np.asarray(K_fn(model, x), dtype=float) * np.ones(nx) + 0.5)

    F = _antiderivative(lambda s: model.rho(s) / model.sigma(s), x)
    dF = rho / sig
    # neighbour rows, spacings and u-shifts along the noise direction (ghosts mirror)
    h_up = np.empty(nx)
    h_dn = np.empty(nx)
    sh_up = np.empty(nx)
    sh_dn = np.empty(nx)
    h_up[:-1] = np.diff(x)
    h_dn[1:] = np.diff(x)
    h_up[-1], h_dn[0] = h_dn[-1], h_up[0]
    sh_up[:-1] = F[1:] - F[:-1]
    sh_dn[1:] = F[:-1] - F[1:]
    sh_up[-1] = dF[-1] * h_up[-1]
    sh_dn[0] = -dF[0] * h_dn[0]
    row_up = np.minimum(np.arange(nx) + 1, nx - 1)
    row_dn = np.maximum(np.arange(nx) - 1, 0)

    a_up = sig**2 / ((h_up + h_dn) * h_up)
    a_dn = sig**2 / ((h_up + h_dn) * h_dn)
    a_up = a_up + np.where(m0 > 0, m0 / h_up, 0.0)
    a_dn = a_dn + np.where(m0 < 0, -m0 / h_dn, 0.0)

    hu = np.diff(u)
    j_in = np.arange(1, nu - 1)
    b = -kappa  # coefficient of V_u
    rows, cols, vals = [], [], []
    known = np.zeros(N)
    diag = np.zeros(N)

    G_of = lambda uu: np.minimum(1.0, np.exp(uu))  # noqa: E731

    for i in range(nx):
        base = i * nu
        rid = base + j_in
        # characteristic neighbours
        for coef, r, sh in ((a_up[i], row_up[i], sh_up[i]), (a_dn[i], row_dn[i], sh_dn[i])):
            if coef == 0:
                continue
            tgt = u[j_in] + sh
            inside = (tgt >= u[0]) & (tgt <= u[-1])
            pos = np.clip(np.searchsorted(u, tgt, side="right") - 1, 0, nu - 2)
            w_hi = np.where(inside, (tgt - u[pos]) / hu[pos], 0.0)
            w_lo = np.where(inside, 1.0 - w_hi, 0.0)
            for w, jj in ((w_lo, pos), (w_hi, pos + 1)):
                m = w != 0
                rows.append(rid[m])
                cols.append(r * nu + jj[m])
                vals.append(-coef * w[m])
            known[rid[~inside]] += coef * G_of(tgt[~inside])
            diag[rid] += coef
        # transport in u, upwinded
        if b[i] > 0:
            c = b[i] / hu[j_in]
            rows.append(rid)
            cols.append(rid + 1)
        else:
            c = -b[i] / hu[j_in - 1]
            rows.append(rid)
            cols.append(rid - 1)
        vals.append(-c)
        diag[rid] += c

    dirichlet = np.zeros(N, dtype=bool)
    dirichlet[0::nu] = True
    dirichlet[nu - 1::nu] = True
    diag[dirichlet] = 1.0
    rows.append(np.arange(N))
    cols.append(np.arange(N))
    vals.append(diag)
    A = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    ).tocsr()
    A.sum_duplicates()
    return A, known, dirichlet


def _payoff_and_cost(model: DiffusionModel, grid: Grid2D):
    nx, nu = grid.shape
    phi = grid.phi
    G = np.tile(np.minimum(1.0, phi), nx)
    H = np.tile(model.cost_rate * (1.0 + phi), nx)
    return G, H


def _require_regime(model: DiffusionModel, grid: Grid2D) -> str:
    report = check_assumptions(model, grid.x_nodes)
    if report.regime == "none":
        raise RegimeError("model fails the structural assumptions on the grid: "
                          + "; ".join(v[1] for v in report.violations[:3]))
    return report.regime


def complementarity_residual(A, Hf, G, V, dirichlet) -> float:
    """``max |min(Hf - A V, G - V)|`` over interior rows."""
    r = np.minimum(Hf - A @ V, G - V)
    return float(np.max(np.abs(r[~dirichlet]))) if np.any(~dirichlet) else 0.0


def _policy_iteration(A, Hf, G, dirichlet, max_iters):
    N = G.size
    V = G.copy()
    stop = dirichlet | ((A @ V - Hf) <= 0)
    eye = sparse.identity(N, format="csr")
    for it in range(1, max_iters + 1):
        s = stop.astype(float)
        M = sparse.diags(s) @ eye + sparse.diags(1.0 - s) @ A
        rhs = s * G + (1.0 - s) * Hf
        lu = spla.splu(M.tocsc())
        V = lu.solve(rhs)
        new_stop = dirichlet | ((V - G) >= (A @ V - Hf))
        if np.array_equal(new_stop, stop):
            # one step of iterative refinement: A has entries of order 1/h^2
            V += lu.solve(rhs - M @ V)
            return V, it
        stop = new_stop
    raise ConvergenceError(f"policy iteration did not settle in {max_iters} iterations")


def _psor(A, Hf, G, dirichlet, tol, max_iters, omega):
    A = A.tocsr()
    indptr, indices, data = A.indptr, A.indices, A.data
    N = G.size
    V = G.copy()
    diag = A.diagonal()
    for sweep in range(1, max_iters + 1):
        change = 0.0
        for k in range(N):
            if dirichlet[k]:
                continue
            acc = Hf[k]
            for p in range(indptr[k], indptr[k + 1]):
                j = indices[p]
                if j != k:
                    acc -= data[p] * V[j]
            gs = acc / diag[k]
            new = min(G[k], V[k] + omega * (gs - V[k]))
            change = max(change, abs(new - V[k]))
            V[k] = new
        if change < tol:
            return V, sweep
    raise ConvergenceError(f"PSOR did not converge in {max_iters} sweeps")


def solve_vi(model: DiffusionModel, grid: Grid2D, params: SolverParams = SolverParams()) -> ValueSurface:
    """Solve the discrete obstacle problem ``max(A V - H, V - G) = 0``."""
    regime = _require_regime(model, grid)
    A, known, dirichlet = build_operator(model, grid)
    G, H = _payoff_and_cost(model, grid)
    Hf = H + known
    if params.method == "policy":
        V, iters = _policy_iteration(A, Hf, G, dirichlet, min(params.max_iters, 500))
    else:
        V, iters = _psor(A, Hf, G, dirichlet, params.tol, params.max_iters, params.omega)
    V = np.minimum(V, G)
    res = complementarity_residual(A, Hf, G, V, dirichlet)
    scale = max(1.0, model.cost_rate)
    if res > params.tol * scale * 100 and params.method == "policy":
        raise ConvergenceError(f"complementarity residual {res:.3g} too large")
    nx, nu = grid.shape
    return ValueSurface(grid, V.reshape(nx, nu), res, iters, model.cost_rate, None,
                        params.method, {"regime": regime})


def solve_finite_horizon(model: DiffusionModel, grid: Grid2D, T: float, nt: int) -> ValueSurface:
    """Finite-horizon value on the intrinsic clock, ``V^T(0; x, phi)``.

    Backward recursion ``V <- min(G, (I + dt rho^-2 A)^-1 (V + dt rho^-2 H))``
    from ``V = G``, with ``dt = T / nt``.
    """
    if not (T > 0 and nt >= 1):
        raise ValueError("need T > 0 and nt >= 1")
    regime = _require_regime(model, grid)
    A, known, dirichlet = build_operator(model, grid)
    G, H = _payoff_and_cost(model, grid)
    nx, nu = grid.shape
    rho2 = np.repeat(np.asarray(model.rho2(grid.x_nodes), dtype=float) * np.ones(nx), nu)
    w = np.where(dirichlet, 0.0, 1.0 / rho2)
    dt = T / nt
    step = (sparse.identity(nx * nu, format="csr") + dt * (sparse.diags(w) @ A)).tocsc()
    lu = spla.splu(step)
    Hhat = w * (H + known)
    V = G.copy()
    for _ in range(nt):
        V = np.minimum(G, lu.solve(V + dt * Hhat))
        V[dirichlet] = G[dirichlet]
    return ValueSurface(grid, V.reshape(nx, nu), float("nan"), nt, model.cost_rate, float(T),
                        "implicit", {"regime": regime, "dt": dt})


def _edge(us, gap, tol, lower: bool):
    """Locate one free boundary on a row; returns ``log`` of the boundary."""
    n = us.size
    order = range(n) if lower else range(n - 1, -1, -1)
    last = None
    for j in order:
        if gap[j] <= tol and (us[j] <= 0 if lower else us[j] >= 0):
            last = j
        else:
            break
    if last is None or last == (0 if lower else n - 1):
        raise ExtractionError("no contact region away from the truncation edge")
    step = 1 if lower else -1
    j1, j2 = last + step, last + 2 * step
    if not 0 <= j2 < n:
        raise ExtractionError("continuation region too thin to refine the boundary")
    q1, q2 = math.sqrt(max(gap[j1], 0.0)), math.sqrt(max(gap[j2], 0.0))
    if q2 > q1:
        # sqrt(gap) grows linearly away from a smooth-fit boundary; extrapolate to 0
        pos = us[j1] - q1 * (us[j2] - us[j1]) / (q2 - q1)
    else:
        pos = us[last]
    lo_b, hi_b = sorted((us[last], us[j1]))
    return min(max(pos, lo_b), hi_b)


def extract_boundaries(surface: ValueSurface, contact_tol: Optional[float] = None) -> BoundaryPair:
    """Read ``l0(x)``, ``l1(x)`` off the contact set of each row.

    The contact run is followed inward from each truncation edge; the
    boundary is then refined inside the first continuation cell by
    extrapolating ``sqrt(G - V)`` linearly to zero from the two nearest
    continuation nodes.
    """
    if contact_tol is None:
        contact_tol = 1e-7 * (1.0 + surface.cost_rate)
    us = surface.grid.logphi_nodes
    gap = surface.G - surface.V
    l0 = np.empty(surface.grid.shape[0])
    l1 = np.empty_like(l0)
    for i in range(l0.size):
        try:
            l0[i] = math.exp(_edge(us, gap[i], contact_tol, True))
            l1[i] = math.exp(_edge(us, gap[i], contact_tol, False))
        except ExtractionError as exc:
            raise ExtractionError(f"row {i}: {exc}") from None
    return BoundaryPair(surface.grid.x_nodes.copy(), l0, l1)


def validate_boundaries(pair: BoundaryPair, regime: str, tol: float = 1e-9) -> BoundaryReport:
    """Check ``0 < l0 < 1 < l1`` and the regime's monotonicity in ``x``."""
    l0, l1 = pair.l0, pair.l1
    bad = np.flatnonzero(~((l0 > 0) & (l0 < 1) & (l1 > 1)))
    if bad.size:
        return BoundaryReport(False, int(bad[0]), "boundaries not ordered as 0 < l0 < 1 < l1")
    if regime in ("A31", "A32"):
        sign = 1.0 if regime == "A31" else -1.0
        d0 = sign * np.diff(l0)
        d1 = -sign * np.diff(l1)
        v0 = np.flatnonzero(d0 < -tol)
        v1 = np.flatnonzero(d1 < -tol)
        first = min([int(v[0]) + 1 for v in (v0, v1) if v.size], default=None)
        if first is not None:
            which = "l0" if v0.size and int(v0[0]) + 1 == first else "l1"
            expected = ("nondecreasing" if (regime == "A31") == (which == "l0") else "nonincreasing")
            return BoundaryReport(False, first, f"{which} is not {expected} in x")
    elif regime not in ("constant_snr",):
        return BoundaryReport(False, None, f"no boundary theory for regime {regime!r}")
    return BoundaryReport(True)
