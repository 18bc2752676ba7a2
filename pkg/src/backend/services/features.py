from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.backend.services.basis import BSplineBasis, eval_basis
from src.backend.services.empdist import EmpiricalDistribution, Grid
from src.backend.services.errors import ConfigurationError, DataError
from src.backend.services.logger import logger
from src.backend.services.odds import OddsPolicy, factor_odds4, odds1_curve, odds2_surface

MODEL_ORDERS = {"survival": 1, "odds1": 1, "odds2": 2, "odds4": 4}


@dataclass(frozen=True)
class FeatureMeta:
    """Everything two feature tensors must share to sit in one design."""

    model: str
    index_order: int
    grid: Dict[str, Any]
    basis: Dict[str, Any]
    cap: float
    denom_floor: float
    ordered_region: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "index_order": self.index_order,
            "grid": dict(self.grid),
            "basis": dict(self.basis),
            "cap": self.cap,
            "denom_floor": self.denom_floor,
            "ordered_region": self.ordered_region,
        }


@dataclass(frozen=True)
class FeatureTensor:
    """
    Per-subject feature coefficients W, flattened with the last index fastest
    (k4 fastest, k1 slowest). The 4-index tensor is kept factored as a ⊗ c.
    """

    subject_id: str
    index_order: int
    metadata: FeatureMeta
    dense: Optional[np.ndarray] = None
    factors: Optional[Tuple[np.ndarray, np.ndarray]] = None
    cap_count: int = 0

    @property
    def values(self) -> np.ndarray:
        if self.factors is not None:
            a, c = self.factors
            return np.kron(a, c)
        return self.dense

    @property
    def n_features(self) -> int:
        kappa = int(self.metadata.basis["kappa"])
        return kappa ** self.index_order


@lru_cache(maxsize=16)
def _quadrature(basis: BSplineBasis, grid: Grid) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Trapezoid rule on the nodes {0} ∪ {u_1..u_G}.

    Returns (node_to_grid, weights, weighted_basis). Node 0 reads grid point u_1:
    the first cell [0, Δ] carries the atom at zero, so the binned CDF is flat there.
    """
    if grid.d_max > basis.d_max:
        raise ConfigurationError(f"grid [0, {grid.d_max}] exceeds basis domain [0, {basis.d_max}]")
    nodes = np.concatenate(([0.0], grid.points))
    step = np.diff(nodes)
    weights = np.zeros(nodes.size)
    weights[:-1] += 0.5 * step
    weights[1:] += 0.5 * step
    node_to_grid = np.concatenate(([0], np.arange(grid.n_points)))
    weighted = weights[:, None] * eval_basis(basis, nodes)
    for arr in (node_to_grid, weights, weighted):
        arr.setflags(write=False)
    return node_to_grid, weights, weighted


def quadrature_nodes(grid: Grid) -> np.ndarray:
    return np.concatenate(([0.0], grid.points))


def quadrature_weights(basis: BSplineBasis, grid: Grid) -> np.ndarray:
    return _quadrature(basis, grid)[1]


def integrate_curve(values: np.ndarray, basis: BSplineBasis, grid: Grid) -> np.ndarray:
    """W_k = Σ_nodes w B_k(u) v(u) for a curve sampled on the grid points."""
    idx, _, Bw = _quadrature(basis, grid)
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (grid.n_points,):
        raise ConfigurationError(f"curve must have {grid.n_points} values, got {v.shape}")
    return Bw.T @ v[idx]


def _region_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def integrate_surface(
    surface: np.ndarray, basis: BSplineBasis, grid: Grid, ordered_region: bool = False
) -> np.ndarray:
    """W[k1, k2] = Σ Σ w B_k1(u1) w B_k2(u2) H(u1, u2), returned flat with k2 fastest."""
    idx, _, Bw = _quadrature(basis, grid)
    H = np.asarray(surface, dtype=np.float64)
    if H.shape != (grid.n_points, grid.n_points):
        raise ConfigurationError(f"surface must be {grid.n_points}x{grid.n_points}, got {H.shape}")
    H = H[np.ix_(idx, idx)]
    if ordered_region:
        H = np.where(_region_mask(H.shape[0]), H, 0.0)
    return (Bw.T @ H @ Bw).ravel()


def _meta(model: str, basis: BSplineBasis, grid: Grid, policy: OddsPolicy, ordered_region: bool) -> FeatureMeta:
    return FeatureMeta(
        model=model,
        index_order=MODEL_ORDERS[model],
        grid=grid.to_dict(),
        basis=basis.to_dict(),
        cap=float(policy.cap),
        denom_floor=float(policy.denom_floor),
        ordered_region=bool(ordered_region and MODEL_ORDERS[model] > 1),
    )


def features_1d(dist: EmpiricalDistribution, basis: BSplineBasis, grid: Grid, policy: OddsPolicy) -> np.ndarray:
    return integrate_curve(odds1_curve(dist, policy), basis, grid)


def features_2d(
    dist: EmpiricalDistribution, basis: BSplineBasis, grid: Grid, policy: OddsPolicy, ordered_region: bool = False
) -> np.ndarray:
    return integrate_surface(odds2_surface(dist, policy), basis, grid, ordered_region)


def features_4d_factored(
    dist: EmpiricalDistribution, basis: BSplineBasis, grid: Grid, policy: OddsPolicy, ordered_region: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    """
    a[(k1,k2)] = ∫∫ B_k1 B_k2 min(cap, 1/max(|F(u2) - F(u1)|, ε)),
    c[(k3,k4)] = ∫∫ B_k3 B_k4 |F(u4) - F(u3)|; the full W is kron(a, c).

    Capping is applied inside the denominator factor, never on the 4-D product.
    """
    A, C = factor_odds4(dist, policy)
    return (
        integrate_surface(A, basis, grid, ordered_region),
        integrate_surface(C, basis, grid, ordered_region),
    )


def features_survival(dist: EmpiricalDistribution, basis: BSplineBasis, grid: Grid) -> np.ndarray:
    """∫ B_k(u) S(u) du, the survival-covariate baseline."""
    return integrate_curve(dist.survival, basis, grid)


def compute_features(
    dist: EmpiricalDistribution,
    model: str,
    basis: BSplineBasis,
    grid: Grid,
    policy: OddsPolicy,
    ordered_region: bool = False,
) -> FeatureTensor:
    if model not in MODEL_ORDERS:
        raise ConfigurationError(f"Unknown feature model '{model}' (expected one of {sorted(MODEL_ORDERS)})")
    local = policy.spawn()
    meta = _meta(model, basis, grid, policy, ordered_region)
    dense, factors = None, None
    if model == "survival":
        dense = features_survival(dist, basis, grid)
    elif model == "odds1":
        dense = features_1d(dist, basis, grid, local)
    elif model == "odds2":
        dense = features_2d(dist, basis, grid, local, meta.ordered_region)
    else:
        factors = features_4d_factored(dist, basis, grid, local, meta.ordered_region)
    policy.merge(local)
    return FeatureTensor(
        subject_id=dist.subject_id,
        index_order=meta.index_order,
        metadata=meta,
        dense=dense,
        factors=factors,
        cap_count=local.cap_count,
    )


def build_feature_tensors(
    distributions: Sequence[EmpiricalDistribution],
    model: str,
    basis: BSplineBasis,
    grid: Grid,
    policy: OddsPolicy,
    ordered_region: bool = False,
    workers: int = 1,
) -> List[FeatureTensor]:
    """Per-subject features, in input order; the per-subject cap counts are merged into `policy`."""
    def _one(dist: EmpiricalDistribution) -> FeatureTensor:
        return compute_features(dist, model, basis, grid, policy, ordered_region)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tensors = list(pool.map(_one, distributions))
    else:
        tensors = [_one(d) for d in distributions]
    logger.info(
        f"[FEATURES] {len(tensors)} subject(s), model={model}, "
        f"p={tensors[0].n_features if tensors else 0}, cap_count={policy.cap_count}"
    )
    return tensors


@dataclass
class DesignMatrix:
    """
    Stacked raw feature rows plus the standardization statistics of exactly
    these rows. Columns with (numerically) zero spread are dropped from the
    standardized view and recorded in `dropped`.
    """

    X: np.ndarray
    y: np.ndarray
    subject_ids: List[str]
    metadata: Dict[str, Any] = field(default_factory=dict)
    means: np.ndarray = field(init=False)
    sds: np.ndarray = field(init=False)
    keep: np.ndarray = field(init=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0] or len(self.subject_ids) != self.y.shape[0]:
            raise ConfigurationError(
                f"design shape {self.X.shape} does not match {self.y.shape[0]} outcomes / {len(self.subject_ids)} ids"
            )
        self.means = self.X.mean(axis=0) if self.n else np.zeros(self.p)
        self.sds = self.X.std(axis=0) if self.n else np.zeros(self.p)
        tiny = 1e-10 * np.maximum(np.abs(self.means), np.finfo(np.float64).tiny)
        self.keep = self.sds > tiny

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def dropped(self) -> List[int]:
        return np.flatnonzero(~self.keep).tolist()

    def standardize(self, X: np.ndarray) -> np.ndarray:
        """Kept columns of X, centered and scaled with this design's statistics (Fortran order)."""
        X = np.asarray(X, dtype=np.float64)
        k = self.keep
        return np.asfortranarray((X[:, k] - self.means[k]) / self.sds[k])

    def destandardize(self, Xs: np.ndarray) -> np.ndarray:
        k = self.keep
        return np.asarray(Xs) * self.sds[k] + self.means[k]

    def standardized(self) -> np.ndarray:
        if not np.all(np.isfinite(self.X)):
            raise DataError("design contains NaN or infinite entries")
        return self.standardize(self.X)

    def subset(self, rows: Sequence[int] | np.ndarray) -> "DesignMatrix":
        """Rows `rows` only, with standardization recomputed on them alone."""
        rows = np.asarray(rows, dtype=np.int64)
        return DesignMatrix(
            X=self.X[rows],
            y=self.y[rows],
            subject_ids=[self.subject_ids[i] for i in rows],
            metadata=dict(self.metadata),
        )

    def standardization(self) -> Dict[str, Any]:
        return {"means": self.means.tolist(), "sds": self.sds.tolist(), "dropped": self.dropped}


def assemble_design(
    features: Sequence[FeatureTensor],
    outcomes: Union[Mapping[str, float], Sequence[float]],
) -> DesignMatrix:
    """
    Stacks feature tensors in the given (subject) order and attaches y.

    Raises:
        ConfigurationError: tensors built with different grid/basis/cap/model
    """
    if not features:
        raise ConfigurationError("no feature tensors to assemble")
    meta = features[0].metadata
    for t in features[1:]:
        if t.metadata != meta:
            raise ConfigurationError(
                f"feature metadata mismatch for subject {t.subject_id}: {t.metadata} != {meta}"
            )
    ids = [t.subject_id for t in features]
    if isinstance(outcomes, Mapping):
        missing = [s for s in ids if s not in outcomes]
        if missing:
            raise ConfigurationError(f"no outcome for subject(s) {missing[:5]}")
        y = np.array([outcomes[s] for s in ids], dtype=np.float64)
    else:
        y = np.asarray(outcomes, dtype=np.float64)
    X = np.vstack([t.values for t in features])
    design = DesignMatrix(
        X=X,
        y=y,
        subject_ids=ids,
        metadata={**meta.to_dict(), "cap_count": int(sum(t.cap_count for t in features))},
    )
    if design.dropped:
        logger.info(f"[FEATURES] {len(design.dropped)} constant column(s) dropped from the standardized design")
    if not design.keep.any():
        logger.warning("[FEATURES] every design column is constant; nothing left to fit")
    return design
