from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Dict, Literal, Tuple, Union

import numpy as np

from src.backend.services.empdist import EmpiricalDistribution
from src.backend.services.errors import ConfigurationError, DomainError
from src.backend.services.logger import logger

DEFAULT_DENOM_FLOOR = 1e-12
DEFAULT_CAP = 1e3

IndexOrder = Literal[1, 2, 4]


@dataclass
class OddsPolicy:
    """
    Numerically safe quotient policy shared by every odds evaluation.

    value = min(cap, numer / max(denom, denom_floor)); `cap_count` counts the
    evaluations where the denominator was floored or the raw quotient exceeded
    the cap. Workers use `spawn()` and the parent `merge()`s their counters.
    """

    denom_floor: float = DEFAULT_DENOM_FLOOR
    cap: float = DEFAULT_CAP
    cap_count: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if not self.denom_floor > 0:
            raise ConfigurationError(f"denom_floor must be > 0, got {self.denom_floor}")
        if not self.cap > 1:
            raise ConfigurationError(f"cap must be > 1, got {self.cap}")

    def spawn(self) -> "OddsPolicy":
        return OddsPolicy(denom_floor=self.denom_floor, cap=self.cap)

    def merge(self, other: "OddsPolicy") -> "OddsPolicy":
        with self._lock:
            self.cap_count += other.cap_count
        return self

    def ratio(self, numer, denom, cap_when_floored: bool = False):
        """Capped quotient, scalar or elementwise.

        With `cap_when_floored`, a floored denominator returns the cap itself
        (hazard convention) instead of numer / ε.
        """
        numer = np.asarray(numer, dtype=np.float64)
        denom = np.asarray(denom, dtype=np.float64)
        floored = denom < self.denom_floor
        raw = numer / np.maximum(denom, self.denom_floor)
        over = raw > self.cap
        out = np.minimum(raw, self.cap)
        if cap_when_floored:
            out = np.where(floored, self.cap, out)
        n = int(np.count_nonzero(floored | over))
        if n:
            with self._lock:
                self.cap_count += n
        return out if out.ndim else float(out)

    def to_dict(self) -> Dict[str, Any]:
        return {"denom_floor": self.denom_floor, "cap": self.cap, "cap_count": self.cap_count}


@dataclass(frozen=True)
class OddsSurface:
    index_order: IndexOrder
    # 1: (G,) vector, 2: (G, G) matrix, 4: (A, C) pair of (G, G) matrices
    values: Union[np.ndarray, Tuple[np.ndarray, np.ndarray]]
    policy: OddsPolicy


def _cdf_ext(dist: EmpiricalDistribution) -> np.ndarray:
    """F over indices 0..G, index 0 being the virtual 0-boundary with F = 0."""
    return np.concatenate(([0.0], dist.cdf))


def _check(dist: EmpiricalDistribution, *indices: int) -> None:
    G = dist.grid.n_points
    for g in indices:
        if not 0 <= int(g) <= G:
            raise DomainError(f"odds index must be in [0, {G}] (0 = boundary), got {g}")


def odds1(dist: EmpiricalDistribution, g: int, policy: OddsPolicy | None = None) -> float:
    """h1(u_g) = S(u_g) / F(u_g)."""
    policy = policy if policy is not None else OddsPolicy()
    _check(dist, g)
    F = _cdf_ext(dist)
    return float(policy.ratio(1.0 - F[g], F[g]))


def odds2(dist: EmpiricalDistribution, g1: int, g2: int, policy: OddsPolicy | None = None) -> float:
    """h2(u_g1, u_g2) = S(u_g2) / F(u_g1)."""
    policy = policy if policy is not None else OddsPolicy()
    _check(dist, g1, g2)
    F = _cdf_ext(dist)
    return float(policy.ratio(1.0 - F[g2], F[g1]))


def odds4(
    dist: EmpiricalDistribution, g1: int, g2: int, g3: int, g4: int, policy: OddsPolicy | None = None
) -> float:
    """h4 = |F(u_g4) - F(u_g3)| / |F(u_g2) - F(u_g1)|, index 0 being the 0-boundary."""
    policy = policy if policy is not None else OddsPolicy()
    _check(dist, g1, g2, g3, g4)
    F = _cdf_ext(dist)
    return float(policy.ratio(abs(F[g4] - F[g3]), abs(F[g2] - F[g1])))


def odds1_curve(dist: EmpiricalDistribution, policy: OddsPolicy) -> np.ndarray:
    return policy.ratio(dist.survival, dist.cdf)


def odds2_surface(dist: EmpiricalDistribution, policy: OddsPolicy) -> np.ndarray:
    """(G, G) matrix H[g1, g2] = S(u_g2) / F(u_g1)."""
    return policy.ratio(dist.survival[None, :], dist.cdf[:, None])


def residual_life_surface(dist: EmpiricalDistribution, policy: OddsPolicy) -> np.ndarray:
    """
    (G+1, G+1) array R[t, u] = (F(u_{t+u}) - F(u_t)) / (1 - F(u_t)) over indices 0..G,
    t + u clamped to G. Row 0 (the 0-boundary) is F itself.
    """
    F = _cdf_ext(dist)
    G = dist.grid.n_points
    t = np.arange(G + 1)[:, None]
    u = np.arange(G + 1)[None, :]
    upper = np.minimum(t + u, G)
    numer = np.abs(F[upper] - F[t])
    denom = np.abs(F[G] - F[t]) * np.ones_like(numer)
    return policy.ratio(numer, denom)


def factor_odds4(dist: EmpiricalDistribution, policy: OddsPolicy) -> Tuple[np.ndarray, np.ndarray]:
    """
    Separable form of h4 on the (G, G) grid:
    A[g1, g2] = min(cap, 1 / max(|F(u_g2) - F(u_g1)|, ε)), C[g3, g4] = |F(u_g4) - F(u_g3)|,
    so that A[g1, g2] * C[g3, g4] = h4 wherever A is uncapped.
    """
    F = dist.cdf
    C = np.abs(F[None, :] - F[:, None])
    A = policy.ratio(np.ones_like(C), C)
    return A, C


def odds_surface(dist: EmpiricalDistribution, index_order: int, policy: OddsPolicy) -> OddsSurface:
    if index_order == 1:
        values = odds1_curve(dist, policy)
    elif index_order == 2:
        values = odds2_surface(dist, policy)
    elif index_order == 4:
        values = factor_odds4(dist, policy)
    else:
        raise ConfigurationError(f"index_order must be 1, 2 or 4, got {index_order}")
    logger.debug(f"[ODDS] subject {dist.subject_id}: {index_order}-index surface, cap_count={policy.cap_count}")
    return OddsSurface(index_order=index_order, values=values, policy=policy)
