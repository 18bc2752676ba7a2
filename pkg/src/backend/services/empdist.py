from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Any, Dict, Optional

import numpy as np

from src.backend.services.errors import ConfigurationError, DegenerateInputError, DomainError
from src.backend.services.ingest import ObservationSet
from src.backend.services.logger import logger

if TYPE_CHECKING:
    from src.backend.services.odds import OddsPolicy


@dataclass(frozen=True)
class Grid:
    """
    Shared evaluation grid over [0, d_max].

    Cell g (1-based) is ((g-1)Δ, gΔ], cell 1 being the closed [0, Δ]; the grid
    point u_g is the right edge gΔ, so F(u_g) = P{X <= u_g} holds exactly.
    """

    d_max: float = 9.6
    n_points: int = 50

    def __post_init__(self):
        if self.n_points < 2:
            raise ConfigurationError(f"Grid needs n_points >= 2, got {self.n_points}")
        if not self.d_max > 0:
            raise ConfigurationError(f"Grid needs d_max > 0, got {self.d_max}")

    @property
    def cell_width(self) -> float:
        return self.d_max / self.n_points

    @cached_property
    def points(self) -> np.ndarray:
        pts = self.cell_width * np.arange(1, self.n_points + 1, dtype=np.float64)
        pts[-1] = self.d_max
        return pts

    def cell_index(self, values: np.ndarray) -> np.ndarray:
        """1-based cell of every value; values above d_max land in the top cell."""
        q = np.asarray(values, dtype=np.float64) / self.cell_width
        # values sitting on a cell edge up to rounding belong to the lower cell
        idx = np.ceil(q - 1e-9).astype(np.int64)
        return np.clip(idx, 1, self.n_points)

    def to_dict(self) -> Dict[str, Any]:
        return {"d_max": float(self.d_max), "n_points": int(self.n_points)}


@dataclass(frozen=True)
class EmpiricalDistribution:
    grid: Grid
    pmf: np.ndarray
    cdf: np.ndarray
    survival: np.ndarray
    n_obs: int
    n_clamped: int = 0
    subject_id: str = ""

    def _check_index(self, g: int) -> int:
        if not 1 <= int(g) <= self.grid.n_points:
            raise DomainError(f"grid index must be in [1, {self.grid.n_points}], got {g}")
        return int(g)

    @property
    def counts(self) -> np.ndarray:
        """Observations per cell."""
        return np.rint(self.pmf * self.n_obs).astype(np.int64)

    @classmethod
    def from_counts(
        cls, grid: Grid, counts: np.ndarray, n_clamped: int = 0, subject_id: str = ""
    ) -> "EmpiricalDistribution":
        """The single place PMF, CDF and survival are derived from cell counts."""
        counts = np.asarray(counts, dtype=np.float64)
        if counts.shape != (grid.n_points,):
            raise DomainError(f"{counts.shape[0] if counts.ndim else 0} cell counts for a grid of {grid.n_points} points")
        if np.any(counts < 0) or np.any(counts != np.floor(counts)):
            raise DomainError("cell counts must be nonnegative integers")
        m = float(counts.sum())
        if m == 0:
            raise DegenerateInputError(f"no observations to build a distribution from (subject '{subject_id}')")
        # cumulative counts / m keeps F(u_G) = 1 exact
        cdf = np.cumsum(counts) / m
        return cls(
            grid=grid,
            pmf=counts / m,
            cdf=cdf,
            survival=1.0 - cdf,
            n_obs=int(m),
            n_clamped=int(n_clamped),
            subject_id=str(subject_id),
        )

    def to_record(self) -> Dict[str, Any]:
        return {
            "subject_id": self.subject_id,
            "grid": self.grid.to_dict(),
            "counts": self.counts.tolist(),
            "n_clamped": self.n_clamped,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "EmpiricalDistribution":
        return cls.from_counts(
            Grid(**record["grid"]),
            record["counts"],
            n_clamped=int(record.get("n_clamped", 0)),
            subject_id=str(record.get("subject_id", "")),
        )


def build_empirical_distribution(
    obs: ObservationSet | np.ndarray,
    grid: Grid,
    drop_zeros: bool = False,
) -> EmpiricalDistribution:
    """
    Bins observations into the grid cells and derives PMF, CDF and survival.

    Values above d_max are clamped into the top cell (count kept in `n_clamped`).
    With `drop_zeros`, exact zeros are discarded first (the F(0) = 0 convention).
    """
    subject_id = obs.subject_id if isinstance(obs, ObservationSet) else ""
    values = np.asarray(obs.values if isinstance(obs, ObservationSet) else obs, dtype=np.float64).ravel()
    if drop_zeros:
        values = values[values != 0.0]
    if values.size == 0:
        raise DegenerateInputError(f"no observations to build a distribution from (subject '{subject_id}')")
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise DomainError(f"observations must be finite and >= 0 (subject '{subject_id}')")

    n_clamped = int(np.count_nonzero(values > grid.d_max))
    if n_clamped:
        logger.debug(f"[EMPDIST] subject {subject_id}: {n_clamped} value(s) above D={grid.d_max} clamped")

    counts = np.bincount(grid.cell_index(values) - 1, minlength=grid.n_points)
    return EmpiricalDistribution.from_counts(grid, counts, n_clamped=n_clamped, subject_id=subject_id)


def hazard(dist: EmpiricalDistribution, g: int, policy: Optional["OddsPolicy"] = None) -> float:
    """λ(u_g) = p(u_g) / S(u_g); capped (and counted) where S(u_g) < ε or the quotient exceeds h_max."""
    from src.backend.services.odds import OddsPolicy

    policy = policy if policy is not None else OddsPolicy()
    g = dist._check_index(g)
    return float(policy.ratio(dist.pmf[g - 1], dist.survival[g - 1], cap_when_floored=True))


def hazard_curve(dist: EmpiricalDistribution, policy: Optional["OddsPolicy"] = None) -> np.ndarray:
    from src.backend.services.odds import OddsPolicy

    policy = policy if policy is not None else OddsPolicy()
    return policy.ratio(dist.pmf, dist.survival, cap_when_floored=True)


def survival_curve(dist: EmpiricalDistribution) -> np.ndarray:
    """S(u_g) for g = 1..G."""
    return dist.survival.copy()
