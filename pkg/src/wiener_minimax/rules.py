"""Stopping rules expressed as a band for the weighted likelihood.

A rule stops the first time ``Phi = phi * L`` leaves ``(l0(X), l1(X))``.
All rules expose the band in log coordinates, ``(log l0(x), log l1(x))``,
together with its x-derivative (needed by the bridge crossing correction of
the path simulator).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["StoppingRule", "BoundaryPair", "ConstantBand", "ImmediateRule"]


class StoppingRule:
    """Interface shared by every band rule."""

    immediate = False

    def log_band(self, x):
        raise NotImplementedError

    def log_band_slope(self, x):
        raise NotImplementedError

    def band_at(self, x: float) -> tuple[float, float]:
        lo, hi = self.log_band(np.array([float(x)]))
        return float(np.exp(lo[0])), float(np.exp(hi[0]))


@dataclass(frozen=True, eq=False)
class BoundaryPair(StoppingRule):
    """Boundaries ``l0(x) < 1 < l1(x)`` sampled on increasing ``x_nodes``.

    Between nodes the boundaries are interpolated linearly in ``log l``;
    outside the sampled range they are held constant.
    """

    x_nodes: np.ndarray
    l0: np.ndarray
    l1: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x_nodes, dtype=float))
        l0 = np.atleast_1d(np.asarray(self.l0, dtype=float))
        l1 = np.atleast_1d(np.asarray(self.l1, dtype=float))
        if not (x.shape == l0.shape == l1.shape) or x.ndim != 1 or x.size == 0:
            raise ValueError("x_nodes, l0 and l1 must be 1-D arrays of one length")
        if x.size > 1 and np.any(np.diff(x) <= 0):
            raise ValueError("x_nodes must be strictly increasing")
        if np.any(l0 <= 0) or np.any(l1 <= 0):
            raise ValueError("boundaries must be positive")
        object.__setattr__(self, "x_nodes", x)
        object.__setattr__(self, "l0", l0)
        object.__setattr__(self, "l1", l1)
        object.__setattr__(self, "_log0", np.log(l0))
        object.__setattr__(self, "_log1", np.log(l1))
        if x.size > 1:
            dx = np.diff(x)
            object.__setattr__(self, "_s0", np.diff(self._log0) / dx)
            object.__setattr__(self, "_s1", np.diff(self._log1) / dx)

    def log_band(self, x):
        x = np.asarray(x, dtype=float)
        if self.x_nodes.size == 1:
            return np.full(x.shape, self._log0[0]), np.full(x.shape, self._log1[0])
        return (
            np.interp(x, self.x_nodes, self._log0),
            np.interp(x, self.x_nodes, self._log1),
        )

    def log_band_slope(self, x):
        x = np.asarray(x, dtype=float)
        if self.x_nodes.size == 1:
            return np.zeros(x.shape), np.zeros(x.shape)
        seg = np.clip(np.searchsorted(self.x_nodes, x, side="right") - 1, 0, self.x_nodes.size - 2)
        outside = (x < self.x_nodes[0]) | (x > self.x_nodes[-1])
        s0 = np.where(outside, 0.0, self._s0[seg])
        s1 = np.where(outside, 0.0, self._s1[seg])
        return s0, s1

    def scaled(self, a: float) -> "BoundaryPair":
        """Boundaries for the rule written in ``a * phi`` coordinates."""
        return BoundaryPair(self.x_nodes, a * self.l0, a * self.l1)

    def to_rows(self):
        return list(zip(self.x_nodes.tolist(), self.l0.tolist(), self.l1.tolist()))


@dataclass(frozen=True, eq=False)
class ConstantBand(StoppingRule):
    """x-independent band ``(l0, l1)``; the optimal rule under constant SNR."""

    l0: float
    l1: float

    def __post_init__(self):
        if not 0 < self.l0 <= self.l1:
            raise ValueError("ConstantBand requires 0 < l0 <= l1")

    def log_band(self, x):
        shape = np.shape(x)
        return np.full(shape, np.log(self.l0)), np.full(shape, np.log(self.l1))

    def log_band_slope(self, x):
        shape = np.shape(x)
        return np.zeros(shape), np.zeros(shape)

    def scaled(self, a: float) -> "ConstantBand":
        return ConstantBand(a * self.l0, a * self.l1)


class ImmediateRule(StoppingRule):
    """tau = 0: stop before observing anything."""

    immediate = True

    def log_band(self, x):
        shape = np.shape(x)
        return np.zeros(shape), np.zeros(shape)

    def log_band_slope(self, x):
        shape = np.shape(x)
        return np.zeros(shape), np.zeros(shape)

    def scaled(self, a: float) -> "ImmediateRule":
        return self
