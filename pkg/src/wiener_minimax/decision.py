"""Terminal decision rule: accept the alternative when the posterior odds exceed 1."""

from __future__ import annotations

from enum import IntEnum

import numpy as np

__all__ = ["Decision", "TIE_TOL", "decision_of", "decisions_of"]

TIE_TOL = 1e-12


class Decision(IntEnum):
    NULL = 0
    ALT = 1
    TIE = 2

    def resolved(self) -> int:
        """Ties are reported as the alternative downstream."""
        return 0 if self is Decision.NULL else 1


def decision_of(psiL: float, tol: float = TIE_TOL) -> Decision:
    """0 if ``psiL < 1 - tol``, 1 if ``psiL > 1 + tol``, tie otherwise."""
    psiL = float(psiL)
    if not psiL > 0:
        raise ValueError("psiL must be positive")
    if psiL < 1.0 - tol:
        return Decision.NULL
    if psiL > 1.0 + tol:
        return Decision.ALT
    return Decision.TIE


def decisions_of(psiL, tol: float = TIE_TOL) -> np.ndarray:
    """Vectorized :func:`decision_of` returning integer codes."""
    psiL = np.asarray(psiL, dtype=float)
    out = np.full(psiL.shape, int(Decision.TIE), dtype=np.int8)
    out[psiL < 1.0 - tol] = int(Decision.NULL)
    out[psiL > 1.0 + tol] = int(Decision.ALT)
    return out
