"""1-D Poisson problem ``-y'' = eta`` on ``(a, b)`` with ``y(a) = y(b) = 0``.

Unknowns sit at the cell centers; the Dirichlet condition is imposed through
the ghost values ``y_0 = -y_1`` and ``y_{m+1} = -y_m``, which places the zero
exactly on the boundary under linear interpolation.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import InvalidExponent
from .measure_core import DiscreteMeasure, Grid, check_same_grid


class PoissonOperator:
    """Factorized cell-centered Dirichlet Laplacian on ``grid``."""

    def __init__(self, grid: Grid):
        self.grid = grid
        m, h = grid.m, grid.h
        A = np.zeros((m, m))
        idx = np.arange(m)
        A[idx, idx] = 2.0
        A[idx[:-1], idx[:-1] + 1] = -1.0
        A[idx[1:], idx[1:] - 1] = -1.0
        A[0, 0] += 1.0
        A[-1, -1] += 1.0
        A /= h * h
        A.setflags(write=False)
        self.matrix = A
        self._chol = cho_factor(A)

    def apply(self, y) -> np.ndarray:
        """Discrete ``-y''`` (a density)."""
        return self.matrix @ np.asarray(y, float)

    def solve_density(self, f) -> np.ndarray:
        return cho_solve(self._chol, np.asarray(f, float))

    def __repr__(self):
        return f"PoissonOperator({self.grid!r})"


def _masses(op: PoissonOperator, eta) -> np.ndarray:
    if isinstance(eta, DiscreteMeasure):
        check_same_grid(op.grid, eta.grid)
        return np.asarray(eta.w)
    w = np.asarray(eta, float)
    if w.shape != (op.grid.m,):
        raise ValueError(f"expected {op.grid.m} cell masses, got shape {w.shape}")
    return w


def solve_poisson(op: PoissonOperator, eta) -> np.ndarray:
    """Potential at the cell centers for (signed) cell masses ``eta``."""
    return op.solve_density(_masses(op, eta) / op.grid.h)


def gradient(op: PoissonOperator, y) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise constant slope of the interpolant through ``(a, 0), (x_i, y_i), (b, 0)``.

    Returns ``(slopes, lengths)`` of the ``m + 1`` pieces.
    """
    h = op.grid.h
    nodes = np.concatenate([[0.0], y, [0.0]])
    lengths = np.full(op.grid.m + 1, h)
    lengths[0] = lengths[-1] = h / 2
    return np.diff(nodes) / lengths, lengths


def dual_norm(op: PoissonOperator, eta, p_prime: float = 2.0) -> float:
    """``|| grad G eta ||_{L^p'}`` with ``G`` the discrete solution operator."""
    if not 1.0 < p_prime <= 2.0:
        raise InvalidExponent(f"p' must lie in (1, 2], got {p_prime}")
    slopes, lengths = gradient(op, solve_poisson(op, eta))
    return float((np.abs(slopes) ** p_prime @ lengths) ** (1.0 / p_prime))
