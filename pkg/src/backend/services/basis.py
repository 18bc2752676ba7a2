from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict

import numpy as np
from scipy.interpolate import BSpline

from src.backend.services.empdist import Grid
from src.backend.services.errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class BSplineBasis:
    """
    Clamped B-spline system of degree q on [0, d_max] with L equally spaced
    interior knots, i.e. kappa = L + q + 1 functions.

    Evaluation goes through scipy's BSpline with the identity coefficient
    matrix, which yields every basis function at once; the right endpoint
    d_max is evaluated as a right limit so the partition of unity holds there.
    """

    degree: int = 3
    n_interior: int = 8
    d_max: float = 9.6

    def __post_init__(self):
        if self.degree < 0 or self.n_interior < 0:
            raise ConfigurationError(f"Invalid basis (q={self.degree}, L={self.n_interior})")
        if not self.d_max > 0:
            raise ConfigurationError(f"Basis domain needs d_max > 0, got {self.d_max}")

    @property
    def kappa(self) -> int:
        return self.n_interior + self.degree + 1

    @cached_property
    def knots(self) -> np.ndarray:
        interior = np.linspace(0.0, self.d_max, self.n_interior + 2)[1:-1]
        return np.concatenate(
            (np.zeros(self.degree + 1), interior, np.full(self.degree + 1, float(self.d_max)))
        )

    @cached_property
    def _spline(self) -> BSpline:
        return BSpline(self.knots, np.eye(self.kappa), self.degree, extrapolate=False)

    def integrals(self) -> np.ndarray:
        """Exact ∫ B_k = (t_{k+q+1} - t_k) / (q + 1)."""
        t, q = self.knots, self.degree
        return (t[q + 1:q + 1 + self.kappa] - t[:self.kappa]) / (q + 1)

    def greville(self) -> np.ndarray:
        """Greville abscissae: sum_k greville[k] * B_k(u) = u (for q >= 1)."""
        t, q = self.knots, self.degree
        if q == 0:
            return 0.5 * (t[:-1] + t[1:])[: self.kappa]
        return np.array([t[k + 1:k + q + 1].mean() for k in range(self.kappa)])

    def to_dict(self) -> Dict[str, Any]:
        return {"degree": self.degree, "n_interior": self.n_interior, "d_max": float(self.d_max), "kappa": self.kappa}


def eval_basis(basis: BSplineBasis, u) -> np.ndarray:
    """
    B_k(u) for every k. Scalar u gives a kappa-vector, an array gives (len(u), kappa).

    Raises:
        DomainError: u outside [0, d_max]
    """
    x = np.asarray(u, dtype=np.float64)
    flat = np.atleast_1d(x).ravel()
    if not np.all(np.isfinite(flat)) or np.any(flat < 0.0) or np.any(flat > basis.d_max):
        raise DomainError(f"basis evaluation points must lie in [0, {basis.d_max}]")
    values = basis._spline(flat)
    # nan never survives inside the closed domain, but keep the matrix clean
    values = np.nan_to_num(values, nan=0.0)
    return values[0] if x.ndim == 0 else values.reshape(x.shape + (basis.kappa,))


def basis_matrix(basis: BSplineBasis, grid: Grid) -> np.ndarray:
    """(G, kappa) matrix whose row g is eval_basis at u_g."""
    if grid.d_max > basis.d_max:
        raise DomainError(f"grid [0, {grid.d_max}] exceeds basis domain [0, {basis.d_max}]")
    return eval_basis(basis, grid.points)
