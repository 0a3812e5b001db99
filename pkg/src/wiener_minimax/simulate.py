"""Path simulation of the observed diffusion and its likelihood ratio.

Two layers live here:

* single-path simulators returning a :class:`PathSample` (used for dumps,
  diagnostics and the time change), and
* :func:`simulate_exits`, a batched engine that runs many paths until they
  leave a stopping band.  It is the workhorse of the risk and minimax
  estimators.

State ``X`` uses Euler–Maruyama; ``log L`` is advanced with the exact
exponential update for the frozen coefficients, so ``L`` stays positive and
the discrete chain keeps ``E[L_t] = 1``.

Randomness is organised so that every path owns its noise: path ``p`` of
stream ``s`` reads its Gaussian increments from block ``p // block_size``
and chunk ``step // chunk_steps``, each block/chunk pair having its own
``SeedSequence(seed, spawn_key=(s, block, chunk))``.  Two runs with the
same seed and stream therefore see identical increments path by path,
whatever the starting point or the band, which gives common random numbers
across stopping rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .decision import Decision, decision_of
from .model import DiffusionModel, ModelError, default_grid
from .rules import StoppingRule

__all__ = [
    "SimulationError",
    "RngSpec",
    "MCSettings",
    "PathSample",
    "StoppedOutcome",
    "ExitSample",
    "SIDES",
    "default_horizon",
    "simulate_joint",
    "simulate_under_pinf",
    "simulate_terminal",
    "simulate_exits",
    "run_until_exit",
    "time_change_grid",
    "time_change_inverse",
    "simulate_time_changed",
    "sample_sup_log_phi_hat",
    "h_exact",
    "gamma_T",
    "gamma_T_closed",
    "batch_mean_se",
]

SIDES = ("lower", "upper", "horizon", "domain")
LOWER, UPPER, HORIZON, DOMAIN = range(4)
_MAX_U64 = 2**64 - 1


class SimulationError(RuntimeError):
    """Non-finite coefficients or an otherwise failed simulation step."""


@dataclass(frozen=True)
class RngSpec:
    """Seed and sub-stream index; together they fix every random draw."""

    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        for name in ("seed", "stream"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= int(v) <= _MAX_U64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer")

    def generator(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream), *map(int, key)))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class MCSettings:
    """Monte Carlo budget and discretization.

    ``horizon=None`` means :func:`default_horizon` of the model.
    """

    n_paths: int = 200_000
    n_batches: int = 20
    dt: float = 1e-4
    horizon: Optional[float] = None
    block_size: int = 1024
    chunk_steps: int = 64

    def __post_init__(self):
        if self.n_paths < 1 or self.n_batches < 1 or self.n_batches > self.n_paths:
            raise ValueError("need 1 <= n_batches <= n_paths")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon is not None and not self.horizon >= self.dt:
            raise ValueError("horizon must be at least dt")
        if self.block_size < 1 or self.chunk_steps < 1:
            raise ValueError("block_size and chunk_steps must be positive")

    def resolved_horizon(self, model: DiffusionModel) -> float:
        return float(self.horizon) if self.horizon is not None else default_horizon(model)


def default_horizon(model: DiffusionModel, grid=None) -> float:
    """50 / (smallest sampled rho^2): a generous cap on exit times."""
    grid = default_grid(model) if grid is None else np.asarray(grid, dtype=float)
    rho2 = np.asarray(model.rho2(grid), dtype=float) * np.ones_like(grid)
    return 50.0 / float(np.min(rho2))


@dataclass
class PathSample:
    """One simulated path on a uniform time grid.

    ``exit_index`` is the last valid index when the state left the domain
    (arrays are truncated there), ``None`` otherwise.  For time-changed
    samples ``logL`` holds ``log(Phi_hat / phi0)`` and ``clock`` is
    ``"changed"``.
    """

    times: np.ndarray
    X: np.ndarray
    logL: np.ndarray
    measure: str = "P0"
    exit_index: Optional[int] = None
    clock: str = "natural"

    def __post_init__(self):
        if not (len(self.times) == len(self.X) == len(self.logL)):
            raise ValueError("PathSample arrays must share one length")


@dataclass(frozen=True)
class StoppedOutcome:
    """Result of running one path until the band is left."""

    tau: float
    L_tau: float
    decision: Decision
    cost_integral: float
    exited_side: str
    psi: float = 1.0

    @property
    def phi_tau(self) -> float:
        return self.psi * self.L_tau


def _check_x0(model: DiffusionModel, x0: float) -> float:
    x0 = float(x0)
    if not model.contains(x0):
        raise ModelError(f"x0={x0} outside the open domain {model.domain}")
    return x0


def _coefficients(model: DiffusionModel, x):
    m0 = np.asarray(model.mu0(x), dtype=float)
    m1 = np.asarray(model.mu1(x), dtype=float)
    s = np.asarray(model.sigma(x), dtype=float)
    if not (np.all(np.isfinite(m0)) and np.all(np.isfinite(m1)) and np.all(np.isfinite(s))):
        raise SimulationError("coefficients evaluated to a non-finite value")
    return m0, m1, s


def _single_path(model, x0, dt, horizon, rng, measure, increments):
    x0 = _check_x0(model, x0)
    if not (dt > 0 and horizon >= dt):
        raise ValueError("need 0 < dt <= horizon")
    n = int(math.ceil(horizon / dt - 1e-9))
    if increments is None:
        dB = math.sqrt(dt) * rng.generator().standard_normal(n)
    else:
        dB = np.asarray(increments, dtype=float)
        if dB.shape != (n,):
            raise ValueError(f"increments must have shape ({n},)")
    X = np.empty(n + 1)
    logL = np.empty(n + 1)
    X[0], logL[0] = x0, 0.0
    sign = -0.5 if measure == "P0" else 0.5
    exit_index = None
    for k in range(n):
        x = X[k]
        m0, m1, s = (float(v) for v in _coefficients(model, x))
        r = (m1 - m0) / s
        drift = m0 if measure == "P0" else m1
        xn = x + drift * dt + s * dB[k]
        X[k + 1] = xn
        logL[k + 1] = logL[k] + sign * r * r * dt + r * dB[k]
        if not model.contains(xn):
            exit_index = k
            break
    last = n if exit_index is None else exit_index
    times = dt * np.arange(last + 1)
    return PathSample(times, X[: last + 1].copy(), logL[: last + 1].copy(), measure, exit_index)


def simulate_joint(model, x0, dt, horizon, rng: RngSpec = RngSpec(), increments=None) -> PathSample:
    """Simulate ``(X, log L)`` under the null drift, sharing one Brownian increment.

    ``increments`` optionally replaces the Gaussian increments ``dB``
    (length ``ceil(horizon/dt)``), which is handy for deterministic checks.
    """
    return _single_path(model, x0, dt, horizon, rng, "P0", increments)


def simulate_under_pinf(model, x0, dt, horizon, rng: RngSpec = RngSpec(), increments=None) -> PathSample:
    """As :func:`simulate_joint` but with ``X`` driven by the alternative drift."""
    return _single_path(model, x0, dt, horizon, rng, "Pinf", increments)


def simulate_terminal(model, x0, T, dt, n_paths, rng: RngSpec = RngSpec(), measure="P0"):
    """Vectorized terminal values ``(X_T, logL_T, alive)`` for ``n_paths`` paths.

    Paths leaving the domain are frozen at their last interior state and
    marked ``alive=False``.
    """
    x0 = _check_x0(model, x0)
    if measure not in ("P0", "Pinf"):
        raise ValueError("measure must be 'P0' or 'Pinf'")
    n_steps = int(math.ceil(T / dt - 1e-9))
    gen = rng.generator()
    x = np.full(n_paths, x0)
    logL = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    sq = math.sqrt(dt)
    sign = -0.5 if measure == "P0" else 0.5
    for _ in range(n_steps):
        dB = sq * gen.standard_normal(n_paths)
        idx = np.flatnonzero(alive)
        xa = x[idx]
        m0, m1, s = _coefficients(model, xa)
        r = (m1 - m0) / s
        drift = m0 if measure == "P0" else m1
        xn = xa + drift * dt + s * dB[idx]
        ok = model.contains(xn)
        x[idx[ok]] = xn[ok]
        logL[idx[ok]] += (sign * r * r * dt + r * dB[idx])[ok]
        alive[idx[~ok]] = False
    return x, logL, alive


@dataclass
class ExitSample:
    """Per-path results of :func:`simulate_exits`.

    ``logL_tau`` and ``int_L`` refer to the likelihood ratio started at 1,
    so the weighted likelihood of any prior odds ``psi`` at exit is
    ``psi * exp(logL_tau)``.  ``side`` holds indices into :data:`SIDES`.
    """

    tau: np.ndarray
    logL_tau: np.ndarray
    int_L: np.ndarray
    side: np.ndarray
    x_tau: np.ndarray
    batch: np.ndarray
    n_batches: int
    log_phi_rule: float
    dt: float
    horizon: float
    measure: str = "P0"
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return int(self.tau.size)

    @property
    def L_tau(self) -> np.ndarray:
        return np.exp(self.logL_tau)

    def count(self, side: str) -> int:
        return int(np.count_nonzero(self.side == SIDES.index(side)))

    def fraction(self, side: str) -> float:
        return self.count(side) / self.n_paths


def _chunk_noise(rng, idx, n, block, K, chunk):
    blocks = idx // block
    ub, starts = np.unique(blocks, return_index=True)
    ends = np.append(starts[1:], idx.size)
    zs, us = [], []
    for b, a, e in zip(ub.tolist(), starts.tolist(), ends.tolist()):
        width = min(block, n - b * block)
        gen = rng.generator(b, chunk)
        Z = gen.standard_normal((K, width))
        U = gen.random((K, width))
        local = idx[a:e] - b * block
        zs.append(Z[:, local])
        us.append(U[:, local])
    return np.concatenate(zs, axis=1), np.concatenate(us, axis=1)


def simulate_exits(
    model: DiffusionModel,
    x0: float,
    log_phi_rule: float,
    rule: StoppingRule,
    mc: MCSettings,
    rng: RngSpec = RngSpec(),
    measure: str = "P0",
    bridge: bool = True,
) -> ExitSample:
    """Run ``mc.n_paths`` paths until ``log_phi_rule + log L`` leaves the band.

    A path exits at the first step whose end point lies on or beyond a
    boundary; the crossing time is located by linear interpolation of the
    distance to the boundary in log coordinates and the exit value is put on
    the boundary.  With ``bridge=True`` a path whose two end points are both
    inside still exits with the Brownian-bridge probability of an unseen
    excursion, ``exp(-2 d_k d_{k+1} / (v^2 dt))``, where ``v`` is the
    volatility of the distance process; such exits are placed at the step
    midpoint.  The running integral of ``L`` uses the trapezoid rule, with a
    partial last step.
    """
    x0 = _check_x0(model, x0)
    if measure not in ("P0", "Pinf"):
        raise ValueError("measure must be 'P0' or 'Pinf'")
    n, dt = mc.n_paths, mc.dt
    horizon = mc.resolved_horizon(model)
    n_steps = max(1, int(math.ceil(horizon / dt - 1e-9)))
    lphi = float(log_phi_rule)

    tau = np.zeros(n)
    logL_tau = np.zeros(n)
    int_L = np.zeros(n)
    side = np.full(n, HORIZON, dtype=np.int8)
    x_tau = np.full(n, x0)
    batch = (np.arange(n) * mc.n_batches) // n
    out = ExitSample(tau, logL_tau, int_L, side, x_tau, batch, mc.n_batches, lphi, dt,
                     n_steps * dt, measure)

    lo0, hi0 = (float(v[0]) for v in rule.log_band(np.array([x0])))
    if rule.immediate or lphi <= lo0 or lphi >= hi0:
        if rule.immediate:
            side[:] = LOWER if lphi < 0 else UPPER
        else:
            side[:] = LOWER if lphi <= lo0 else UPPER
        return out

    idx = np.arange(n)
    x = np.full(n, x0)
    logL = np.zeros(n)
    L = np.ones(n)
    lo = np.full(n, lo0)
    hi = np.full(n, hi0)
    sq = math.sqrt(dt)
    sign = -0.5 if measure == "P0" else 0.5
    K = mc.chunk_steps
    cols = Z = U = None

    for step in range(n_steps):
        if idx.size == 0:
            break
        k = step % K
        if k == 0:
            Z, U = _chunk_noise(rng, idx, n, mc.block_size, K, step // K)
            cols = np.arange(idx.size)
        t = step * dt
        m0, m1, s = _coefficients(model, x)
        r = (m1 - m0) / s
        dB = sq * Z[k, cols]
        xn = x + (m0 if measure == "P0" else m1) * dt + s * dB
        ln = logL + sign * r * r * dt + r * dB
        u = lphi + logL
        un = lphi + ln
        indom = model.contains(xn)
        lo_n, hi_n = rule.log_band(np.where(indom, xn, x))
        d_lo, d_hi = u - lo, hi - u
        d_lo_n, d_hi_n = un - lo_n, hi_n - un

        cross_lo = indom & (d_lo_n <= 0)
        cross_hi = indom & (d_hi_n <= 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            th_lo = d_lo / (d_lo - d_lo_n)
            th_hi = d_hi / (d_hi - d_hi_n)
        both = cross_lo & cross_hi
        cross_lo &= ~both | (th_lo <= th_hi)
        cross_hi &= ~cross_lo
        exit_lo, exit_hi = cross_lo, cross_hi
        mid_lo = np.zeros(idx.size, dtype=bool)
        mid_hi = mid_lo.copy()
        if bridge:
            inside = indom & ~cross_lo & ~cross_hi
            s_lo, s_hi = rule.log_band_slope(x)
            v_lo = (r - s_lo * s) ** 2 * dt
            v_hi = (r - s_hi * s) ** 2 * dt
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                p_lo = np.where(v_lo > 0, np.exp(-2.0 * d_lo * d_lo_n / v_lo), 0.0)
                p_hi = np.where(v_hi > 0, np.exp(-2.0 * d_hi * d_hi_n / v_hi), 0.0)
            w = U[k, cols]
            mid_lo = inside & (w < p_lo)
            mid_hi = inside & ~mid_lo & (w < p_lo + p_hi)
        gone = ~indom

        for mask, is_lo, mid in ((exit_lo, True, False), (exit_hi, False, False),
                                 (mid_lo, True, True), (mid_hi, False, True)):
            if not mask.any():
                continue
            th = np.full(np.count_nonzero(mask), 0.5) if mid else (th_lo if is_lo else th_hi)[mask]
            b_old = (lo if is_lo else hi)[mask]
            b_new = (lo_n if is_lo else hi_n)[mask]
            u_tau = b_old + th * (b_new - b_old)
            lt = u_tau - lphi
            p = idx[mask]
            tau[p] = t + th * dt
            logL_tau[p] = lt
            int_L[p] += th * dt * 0.5 * (L[mask] + np.exp(lt))
            side[p] = LOWER if is_lo else UPPER
            x_tau[p] = x[mask] + th * (xn[mask] - x[mask])
        if gone.any():
            p = idx[gone]
            tau[p] = t
            logL_tau[p] = logL[gone]
            side[p] = DOMAIN
            x_tau[p] = x[gone]

        keep = ~(exit_lo | exit_hi | mid_lo | mid_hi | gone)
        Ln = np.exp(ln[keep])
        int_L[idx[keep]] += dt * 0.5 * (L[keep] + Ln)
        idx, cols = idx[keep], cols[keep]
        x, logL, L = xn[keep], ln[keep], Ln
        lo, hi = lo_n[keep], hi_n[keep]

    if idx.size:
        tau[idx] = n_steps * dt
        logL_tau[idx] = logL
        x_tau[idx] = x
    return out


def run_until_exit(
    model: DiffusionModel,
    x0: float,
    psi: float,
    boundaries: StoppingRule,
    dt: float,
    horizon: float,
    rng: RngSpec = RngSpec(),
    logL0: float = 0.0,
    bridge: bool = True,
) -> StoppedOutcome:
    """Run one path under the null until ``psi * L`` leaves the band.

    ``logL0`` initializes ``log L``; only ``psi * L`` matters for the
    outcome.
    """
    if not psi > 0:
        raise ValueError("psi must be positive")
    mc = MCSettings(n_paths=1, n_batches=1, dt=dt, horizon=horizon)
    log_phi = math.log(psi) + logL0
    ex = simulate_exits(model, x0, log_phi, boundaries, mc, rng, "P0", bridge)
    phi_tau = math.exp(log_phi + float(ex.logL_tau[0]))
    L_tau = phi_tau / psi
    tau = float(ex.tau[0])
    cost = tau + math.exp(log_phi) * float(ex.int_L[0])
    return StoppedOutcome(tau, L_tau, decision_of(phi_tau), cost, SIDES[int(ex.side[0])], psi)


def time_change_grid(model: DiffusionModel, path: PathSample) -> np.ndarray:
    """Cumulative ``A_s = int_0^s rho^2(X_u) du`` on the path grid (trapezoid)."""
    rho2 = np.asarray(model.rho2(path.X), dtype=float) * np.ones_like(path.X)
    A = np.zeros_like(path.times)
    A[1:] = np.cumsum(0.5 * (rho2[1:] + rho2[:-1]) * np.diff(path.times))
    return A


def time_change_inverse(A: np.ndarray, times: np.ndarray, t):
    """Return ``T_t``, the natural time at which the clock ``A`` reaches ``t``."""
    return np.interp(t, A, times)


def simulate_time_changed(model, x0, phi0, dt, horizon, rng: RngSpec = RngSpec(), increments=None) -> PathSample:
    """Simulate the state and weighted likelihood on the intrinsic clock.

    On this clock the state moves with drift ``mu0 / rho^2`` and volatility
    ``sigma / rho`` while ``log Phi_hat = log phi0 - t/2 + B_hat_t`` is
    advanced exactly.  ``logL`` of the result holds ``log(Phi_hat/phi0)``.
    """
    x0 = _check_x0(model, x0)
    if not phi0 > 0:
        raise ValueError("phi0 must be positive")
    n = int(math.ceil(horizon / dt - 1e-9))
    if increments is None:
        dB = math.sqrt(dt) * rng.generator().standard_normal(n)
    else:
        dB = np.asarray(increments, dtype=float)
    X = np.empty(n + 1)
    X[0] = x0
    exit_index = None
    for k in range(n):
        m0, m1, s = (float(v) for v in _coefficients(model, X[k]))
        r = (m1 - m0) / s
        if not abs(r) > 1e-150:
            raise SimulationError("signal-to-noise ratio underflow")
        X[k + 1] = X[k] + m0 / (r * r) * dt + s / abs(r) * dB[k]
        if not model.contains(X[k + 1]):
            exit_index = k
            break
    last = n if exit_index is None else exit_index
    times = dt * np.arange(last + 1)
    logL = np.concatenate([[0.0], np.cumsum(dB[:last] - 0.5 * dt)])
    return PathSample(times, X[: last + 1].copy(), logL, "P0", exit_index, clock="changed")


def sample_sup_log_phi_hat(
    phi0: float,
    horizon: float,
    dt: float,
    n_paths: int,
    rng: RngSpec = RngSpec(),
    truncation_correction: bool = True,
) -> np.ndarray:
    """Samples of ``log(sup_t Phi_hat_t / phi0)`` for the unit-volatility martingale.

    Within each step the maximum of the Brownian bridge between the grid
    values is drawn exactly, so the supremum over ``[0, horizon]`` carries
    no discretization error.  With ``truncation_correction`` the supremum
    over ``[horizon, inf)`` is added exactly as ``Y_T + E``, ``E ~ Exp(1)``.
    """
    if not phi0 > 0:
        raise ValueError("phi0 must be positive")
    n_steps = int(math.ceil(horizon / dt - 1e-9))
    gen = rng.generator()
    y = np.zeros(n_paths)
    sup = np.zeros(n_paths)
    sq = math.sqrt(dt)
    for _ in range(n_steps):
        yn = y - 0.5 * dt + sq * gen.standard_normal(n_paths)
        u = gen.random(n_paths)
        dy = yn - y
        bridge_max = 0.5 * (y + yn + np.sqrt(dy * dy - 2.0 * dt * np.log1p(-u)))
        np.maximum(sup, bridge_max, out=sup)
        y = yn
    if truncation_correction:
        np.maximum(sup, y + gen.standard_exponential(n_paths), out=sup)
    return sup


def h_exact(phi):
    """``E sup_t min(1, Phi_hat_t)`` started at ``phi``: 1 above 1, else ``phi(1 - log phi)``."""
    phi = np.asarray(phi, dtype=float)
    if np.any(phi < 0):
        raise ValueError("phi must be nonnegative")
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(phi >= 1.0, 1.0, phi * (1.0 - np.log(phi)))
    val = np.where(phi == 0.0, 0.0, val)
    return float(val) if val.ndim == 0 else val


def gamma_T(phi, T: float):
    """``E h(Phi_hat_T)`` for ``Phi_hat_T = phi exp(-T/2 + sqrt(T) Z)`` by adaptive quadrature.

    The integrand has a kink where ``Phi_hat_T = 1``; the Gaussian integral
    is split there.  Above the kink ``h = 1`` and the contribution is a
    normal tail probability; below it the smooth part is integrated with
    ``scipy.integrate.quad``.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    phi = np.asarray(phi, dtype=float)
    if np.any(phi <= 0):
        raise ValueError("phi must be positive")
    sT = math.sqrt(T)
    out = np.empty(phi.shape)
    for k, p in np.ndenumerate(phi):
        lp = math.log(p)
        z_star = (0.5 * T - lp) / sT

        def smooth(z):
            ly = lp - 0.5 * T + sT * z
            return math.exp(ly) * (1.0 - ly) * math.exp(-0.5 * z * z)

        left = integrate.quad(smooth, -np.inf, z_star, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
        out[k] = left / math.sqrt(2.0 * math.pi) + float(ndtr(-z_star))
    return float(out) if out.ndim == 0 else out


def gamma_T_closed(phi, T: float):
    """Closed form of :func:`gamma_T` via lognormal partial moments."""
    phi = np.asarray(phi, dtype=float)
    sT = math.sqrt(T)
    lp = np.log(phi)
    d = (-lp - 0.5 * T) / sT
    pdf = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
    val = ndtr((lp - 0.5 * T) / sT) + phi * ndtr(d) * (1.0 - lp - 0.5 * T) + phi * sT * pdf
    return float(val) if np.ndim(val) == 0 else val


def batch_mean_se(values, batch, n_batches: int) -> tuple[float, float]:
    """Overall mean and batch-means standard error."""
    values = np.asarray(values, dtype=float)
    counts = np.bincount(batch, minlength=n_batches)
    sums = np.bincount(batch, weights=values, minlength=n_batches)
    mean = float(values.mean())
    if n_batches < 2:
        return mean, float("nan")
    means = sums / counts
    return mean, float(np.std(means, ddof=1) / math.sqrt(n_batches))
