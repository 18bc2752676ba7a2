from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numba import njit
from scipy.special import expit

from src.backend.services.basis import BSplineBasis, eval_basis
from src.backend.services.errors import ConfigurationError, DataError, DegenerateInputError, DomainError
from src.backend.services.features import DesignMatrix
from src.backend.services.logger import logger

LASSO, ELASTIC_NET, SCAD, MCP = 0, 1, 2, 3
PENALTY_CODES = {"lasso": LASSO, "elastic_net": ELASTIC_NET, "scad": SCAD, "mcp": MCP}
PENALTY_ALIASES = {"elnet": "elastic_net", "enet": "elastic_net"}
CANONICAL_LINKS = {"gaussian": "identity", "bernoulli": "logit"}
MIN_IRLS_WEIGHT = 1e-5


@dataclass(frozen=True)
class GlmSpec:
    family: str = "gaussian"
    link: Optional[str] = None

    def __post_init__(self):
        if self.family not in CANONICAL_LINKS:
            raise ConfigurationError(f"Unknown GLM family '{self.family}'")
        link = self.link or CANONICAL_LINKS[self.family]
        if link != CANONICAL_LINKS[self.family]:
            raise ConfigurationError(f"Only canonical links are supported: {self.family} needs {CANONICAL_LINKS[self.family]}")
        object.__setattr__(self, "link", link)

    def to_dict(self) -> Dict[str, str]:
        return {"family": self.family, "link": self.link}


@dataclass(frozen=True)
class PenaltySpec:
    kind: str = "lasso"
    lam: float = 0.0
    alpha_mix: float = 0.5
    a_scad: float = 3.7
    gamma_mcp: float = 3.0

    def __post_init__(self):
        kind = PENALTY_ALIASES.get(self.kind, self.kind)
        if kind not in PENALTY_CODES:
            raise ConfigurationError(f"Unknown penalty '{self.kind}' (expected lasso, elastic_net, scad or mcp)")
        object.__setattr__(self, "kind", kind)
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.alpha_mix <= 1:
            raise ConfigurationError(f"alpha_mix must be in (0, 1], got {self.alpha_mix}")
        if not self.a_scad > 2:
            raise ConfigurationError(f"SCAD a must be > 2, got {self.a_scad}")
        if not self.gamma_mcp > 1:
            raise ConfigurationError(f"MCP gamma must be > 1, got {self.gamma_mcp}")

    @property
    def code(self) -> int:
        return PENALTY_CODES[self.kind]

    @property
    def nonconvex(self) -> bool:
        return self.kind in ("scad", "mcp")

    def with_lambda(self, lam: float) -> "PenaltySpec":
        return PenaltySpec(self.kind, float(lam), self.alpha_mix, self.a_scad, self.gamma_mcp)

    def args(self) -> Tuple[int, float, float, float, float]:
        return self.code, float(self.lam), float(self.alpha_mix), float(self.a_scad), float(self.gamma_mcp)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "lambda": self.lam,
            "alpha_mix": self.alpha_mix,
            "a_scad": self.a_scad,
            "gamma_mcp": self.gamma_mcp,
        }


######################################  penalties and thresholding  #######################################
@njit(cache=True, nogil=True)
def _penalty(kind, t, lam, alpha, a, gamma):
    if kind == LASSO:
        return lam * t
    if kind == ELASTIC_NET:
        return lam * ((1.0 - alpha) * t * t / 2.0 + alpha * t)
    if kind == SCAD:
        if t <= lam:
            return lam * t
        if t <= a * lam:
            return (2.0 * a * lam * t - t * t - lam * lam) / (2.0 * (a - 1.0))
        return (a + 1.0) * lam * lam / 2.0
    if t <= gamma * lam:
        return lam * t - t * t / (2.0 * gamma)
    return gamma * lam * lam / 2.0


@njit(cache=True, nogil=True)
def _surrogate(kind, t, az, s, lam, alpha, a, gamma):
    return 0.5 * s * (t - az) ** 2 + _penalty(kind, t, lam, alpha, a, gamma)


@njit(cache=True, nogil=True)
def _prox_search(kind, az, s, lam, alpha, a, gamma):
    """
    Minimizer over t >= 0 of s/2 (t - az)^2 + P(t) when the closed forms do not apply.
    The objective is quadratic on each penalty piece, so the minimum sits on a piece
    endpoint or a clipped stationary point: enumerate them all.
    """
    knee = a * lam if kind == SCAD else gamma * lam
    cand = np.empty(6)
    cand[0] = az
    cand[1] = min(max(az - lam / s, 0.0), lam)
    cand[2] = lam
    cand[3] = knee
    cand[4] = max(az, knee)
    # stationary point of the middle (concave penalty) piece
    if kind == SCAD:
        den = s * (a - 1.0) - 1.0
        mid = (s * (a - 1.0) * az - a * lam) / den if den != 0.0 else lam
        cand[5] = min(max(mid, lam), knee)
    else:
        den = s - 1.0 / gamma
        mid = (s * az - lam) / den if den != 0.0 else 0.0
        cand[5] = min(max(mid, 0.0), knee)
    best = 0.0
    best_val = _surrogate(kind, 0.0, az, s, lam, alpha, a, gamma)
    for i in range(cand.shape[0]):
        v = _surrogate(kind, cand[i], az, s, lam, alpha, a, gamma)
        if v < best_val:
            best_val = v
            best = cand[i]
    return best


@njit(cache=True, nogil=True)
def _prox(kind, z, s, lam, alpha, a, gamma):
    """argmin_t s/2 (t - z)^2 + P(|t|)."""
    az = abs(z)
    sg = 1.0 if z >= 0.0 else -1.0
    if kind == LASSO:
        return sg * max(az - lam / s, 0.0)
    if kind == ELASTIC_NET:
        return sg * max(s * az - lam * alpha, 0.0) / (s + lam * (1.0 - alpha))
    if lam == 0.0:
        return z
    if kind == SCAD and s * (a - 1.0) > 1.0:
        if az <= lam * (1.0 + 1.0 / s):
            return sg * max(az - lam / s, 0.0)
        if az <= a * lam:
            return sg * (s * (a - 1.0) * az - a * lam) / (s * (a - 1.0) - 1.0)
        return z
    if kind == MCP and s * gamma > 1.0:
        if az <= lam / s:
            return 0.0
        if az <= gamma * lam:
            return sg * (s * az - lam) / (s - 1.0 / gamma)
        return z
    return sg * _prox_search(kind, az, s, lam, alpha, a, gamma)


@njit(cache=True, nogil=True)
def _objective(r, w, theta, kind, lam, alpha, a, gamma):
    n = r.shape[0]
    loss = 0.0
    for i in range(n):
        loss += w[i] * r[i] * r[i]
    pen = 0.0
    for j in range(theta.shape[0]):
        if theta[j] != 0.0:
            pen += _penalty(kind, abs(theta[j]), lam, alpha, a, gamma)
    return 0.5 * loss / n + pen


@njit(cache=True, nogil=True)
def _sweep(X, w, r, theta, intercept, s, sw, kind, lam, alpha, a, gamma, active, full):
    """One cyclic pass (all columns, or the active ones only) then the intercept; returns (intercept, max change)."""
    n, p = X.shape
    maxd = 0.0
    for j in range(p):
        if (not full and not active[j]) or s[j] <= 0.0:
            continue
        old = theta[j]
        g = 0.0
        for i in range(n):
            g += w[i] * X[i, j] * r[i]
        new = _prox(kind, old + g / n / s[j], s[j], lam, alpha, a, gamma)
        d = new - old
        if d != 0.0:
            for i in range(n):
                r[i] -= d * X[i, j]
            theta[j] = new
            if abs(d) > maxd:
                maxd = abs(d)
        if new != 0.0:
            active[j] = True
    d0 = 0.0
    for i in range(n):
        d0 += w[i] * r[i]
    d0 /= sw
    if d0 != 0.0:
        intercept += d0
        for i in range(n):
            r[i] -= d0
        if abs(d0) > maxd:
            maxd = abs(d0)
    return intercept, maxd


@njit(cache=True, nogil=True)
def _cd_kernel(X, w, r, theta, intercept, s, kind, lam, alpha, a, gamma, tol, max_iter, history):
    """
    Weighted cyclic coordinate descent on (1/2n) sum w r^2 + sum P(|theta_j|), r the
    working residual (updated in place, as is theta).

    An iteration is one full sweep over every column. Between full sweeps the active
    set is cycled until its own changes drop below tol (at most max_iter passes).
    Convergence is only ever declared on a full sweep with every change below tol,
    so a run that stops at max_iter has just re-swept the whole design.
    """
    n, p = X.shape
    active = np.zeros(p, dtype=np.bool_)
    sw = 0.0
    for i in range(n):
        sw += w[i]
    converged = False
    it = 0
    while it < max_iter:
        intercept, maxd = _sweep(X, w, r, theta, intercept, s, sw, kind, lam, alpha, a, gamma, active, True)
        history[it] = _objective(r, w, theta, kind, lam, alpha, a, gamma)
        it += 1
        if maxd < tol:
            converged = True
            break
        if it == max_iter:
            break
        for _ in range(max_iter):
            intercept, maxd = _sweep(X, w, r, theta, intercept, s, sw, kind, lam, alpha, a, gamma, active, False)
            if maxd < tol:
                break
    return intercept, it, converged


###################################################  public API  ###################################################
def penalty_value(spec: PenaltySpec, t: float) -> float:
    if t < 0:
        raise DomainError(f"penalty argument must be >= 0, got {t}")
    code, lam, alpha, a, gamma = spec.args()
    return float(_penalty(code, float(t), lam, alpha, a, gamma))


def penalty_derivative(spec: PenaltySpec, t: np.ndarray) -> np.ndarray:
    """P'(t) for t > 0, elementwise."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    lam = spec.lam
    if spec.kind == "lasso":
        return np.full_like(t, lam)
    if spec.kind == "elastic_net":
        return lam * ((1.0 - spec.alpha_mix) * t + spec.alpha_mix)
    if spec.kind == "scad":
        a = spec.a_scad
        return np.where(t <= lam, lam, np.maximum(a * lam - t, 0.0) / (a - 1.0))
    return np.maximum(lam - t / spec.gamma_mcp, 0.0)


def prox(spec: PenaltySpec, z: float, step_scale: float = 1.0) -> float:
    """Exact minimizer of ½·step_scale·(θ − z)² + P(|θ|)."""
    if not step_scale > 0:
        raise DomainError(f"step_scale must be > 0, got {step_scale}")
    code, lam, alpha, a, gamma = spec.args()
    return float(_prox(code, float(z), float(step_scale), lam, alpha, a, gamma))


def _bernoulli_loss(y: np.ndarray, eta: np.ndarray) -> float:
    return float(np.sum(np.logaddexp(0.0, eta) - y * eta) / y.shape[0])


def _penalty_sum(spec: PenaltySpec, theta: np.ndarray) -> float:
    code, lam, alpha, a, gamma = spec.args()
    return float(sum(_penalty(code, abs(float(t)), lam, alpha, a, gamma) for t in theta[theta != 0.0]))


def kkt_residual(
    Xs: np.ndarray, y: np.ndarray, intercept: float, theta: np.ndarray, glm: GlmSpec, penalty: PenaltySpec
) -> float:
    """Largest violation of the stationarity conditions on the standardized scale."""
    n = Xs.shape[0]
    eta = intercept + Xs @ theta
    mu = eta if glm.family == "gaussian" else expit(eta)
    resid = y - mu
    g = Xs.T @ resid / n
    viol = abs(float(resid.mean()))
    if theta.size:
        on = theta != 0.0
        bound = penalty.lam * (penalty.alpha_mix if penalty.kind == "elastic_net" else 1.0)
        if np.any(on):
            viol = max(viol, float(np.max(np.abs(g[on] - np.sign(theta[on]) * penalty_derivative(penalty, theta[on])))))
        if np.any(~on):
            viol = max(viol, float(np.max(np.maximum(np.abs(g[~on]) - bound, 0.0))))
    return viol


@dataclass(frozen=True)
class FitResult:
    """
    Penalized GLM fit. `intercept`/`theta` live on the original feature scale
    (theta has one entry per design column, zero for dropped columns);
    `intercept_std`/`theta_std` are the standardized-scale solution.
    """

    intercept: float
    theta: np.ndarray
    intercept_std: float
    theta_std: np.ndarray
    dispersion: float
    lambda_used: float
    penalty: PenaltySpec
    glm: GlmSpec
    converged: bool
    iterations: int
    objective_history: List[float]
    kkt_residual: float
    active_set_size: int
    cap_count: int = 0
    dropped: List[int] = field(default_factory=list)
    nonconvex_init: Optional[str] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def objective(self) -> float:
        return self.objective_history[-1] if self.objective_history else float("nan")

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=np.float64) @ self.theta

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Fitted mean on the original scale (probabilities for bernoulli)."""
        eta = self.linear_predictor(X)
        return eta if self.glm.family == "gaussian" else expit(eta)

    def beta(self, query_points: np.ndarray) -> np.ndarray:
        basis = self.metadata.get("basis")
        if basis is None:
            raise ConfigurationError("fit carries no basis metadata to reconstruct β from")
        b = BSplineBasis(degree=basis["degree"], n_interior=basis["n_interior"], d_max=basis["d_max"])
        return reconstruct_beta(self, b, query_points)

    def to_dict(self) -> Dict[str, Any]:
        def _num(x: float):
            return None if not np.isfinite(x) else float(x)

        return {
            "intercept": self.intercept,
            "theta": self.theta.tolist(),
            "intercept_std": self.intercept_std,
            "theta_std": self.theta_std.tolist(),
            "dispersion": _num(self.dispersion),
            "lambda_used": self.lambda_used,
            "penalty": self.penalty.to_dict(),
            "glm": self.glm.to_dict(),
            "convergence": {
                "converged": self.converged,
                "iterations": self.iterations,
                "objective": _num(self.objective),
                "objective_history": [float(v) for v in self.objective_history],
                "kkt_residual": self.kkt_residual,
            },
            "diagnostics": {
                "active_set_size": self.active_set_size,
                "cap_count": self.cap_count,
                "dropped_columns": list(self.dropped),
                "nonconvex_init": self.nonconvex_init,
            },
            "metadata": self.metadata,
        }


def _check_inputs(Xs: np.ndarray, y: np.ndarray, glm: GlmSpec) -> None:
    if Xs.shape[0] < 2:
        raise DegenerateInputError(f"need at least 2 subjects to fit, got {Xs.shape[0]}")
    if not (np.all(np.isfinite(Xs)) and np.all(np.isfinite(y))):
        raise DataError("design or outcome contains NaN or infinite entries")
    if glm.family == "bernoulli" and not np.all((y == 0.0) | (y == 1.0)):
        raise DataError("bernoulli outcomes must be 0 or 1")


def _solve(
    Xs: np.ndarray,
    y: np.ndarray,
    glm: GlmSpec,
    penalty: PenaltySpec,
    tol: float,
    max_iter: int,
    init: Optional[Tuple[float, np.ndarray]] = None,
) -> Tuple[float, np.ndarray, List[float], int, bool]:
    """Standardized-scale solution: (intercept, theta, objective history, iterations, converged)."""
    n, p = Xs.shape
    code, lam, alpha, a, gamma = penalty.args()
    if init is None:
        ybar = float(y.mean())
        if glm.family == "gaussian":
            intercept = ybar
        else:
            ybar = min(max(ybar, 1e-6), 1 - 1e-6)
            intercept = float(np.log(ybar / (1 - ybar)))
        theta = np.zeros(p)
    else:
        intercept, theta = float(init[0]), np.array(init[1], dtype=np.float64)

    if glm.family == "gaussian":
        w = np.ones(n)
        r = y - intercept - Xs @ theta
        s = np.einsum("ij,ij->j", Xs, Xs) / n
        history = np.empty(max_iter)
        intercept, it, converged = _cd_kernel(Xs, w, r, theta, intercept, s, code, lam, alpha, a, gamma, tol, max_iter, history)
        return intercept, theta, history[:it].tolist(), int(it), bool(converged)

    # bernoulli: IRLS outer loop, coordinate descent on each weighted least squares problem
    def objective(b0: float, b: np.ndarray) -> float:
        return _bernoulli_loss(y, b0 + Xs @ b) + _penalty_sum(penalty, b)

    current = objective(intercept, theta)
    history = [current]
    total, converged = 0, False
    inner = np.empty(max_iter)
    while total < max_iter:
        eta = intercept + Xs @ theta
        mu = expit(eta)
        w = np.maximum(mu * (1 - mu), MIN_IRLS_WEIGHT)
        r = (y - mu) / w
        s = np.einsum("ij,ij,i->j", Xs, Xs, w) / n
        new_theta = theta.copy()
        new_intercept, it, _ = _cd_kernel(
            Xs, w, r, new_theta, intercept, s, code, lam, alpha, a, gamma, tol, max_iter - total, inner
        )
        total += max(int(it), 1)
        step = 1.0
        cand_b0, cand_b = new_intercept, new_theta
        value = objective(cand_b0, cand_b)
        # step-halving keeps the penalized likelihood monotone
        while value > current + 1e-12 * max(1.0, abs(current)) and step > 1e-10:
            step *= 0.5
            cand_b0 = intercept + step * (new_intercept - intercept)
            cand_b = theta + step * (new_theta - theta)
            value = objective(cand_b0, cand_b)
        if value > current:
            # no descent along the IRLS direction: keep the last accepted iterate, unconverged
            logger.warning(
                f"[FIT] bernoulli step-halving found no descent at lambda={penalty.lam:.4g} "
                f"after {total} iteration(s); keeping the last accepted iterate"
            )
            break
        change = max(abs(cand_b0 - intercept), float(np.max(np.abs(cand_b - theta))) if p else 0.0)
        intercept, theta, current = cand_b0, cand_b, value
        history.append(current)
        if change < tol:
            converged = True
            break
    return intercept, theta, history, total, converged


def _default_init_note(penalty: PenaltySpec, init) -> Optional[str]:
    if penalty.nonconvex and init is None:
        return "lasso_same_lambda"
    return None


def fit(
    design: DesignMatrix,
    glm: Optional[GlmSpec] = None,
    penalty: Optional[PenaltySpec] = None,
    tol: float = 1e-7,
    max_iter: int = 10000,
    init: Optional[Tuple[float, np.ndarray]] = None,
) -> FitResult:
    """
    Penalized GLM fit by cyclic coordinate descent on the standardized design.

    Objective: (1/2n)·RSS + ΣP(|θ_j|) for gaussian, (1/n)·(−log L) + ΣP(|θ_j|) for
    bernoulli. The intercept is never penalized. SCAD/MCP start from the lasso
    solution at the same λ unless `init` is given; their result is a stationary point.

    Args:
        design: raw design, standardized here with its own statistics
        init: warm start (intercept, theta) on the standardized scale, kept columns only

    Returns:
        FitResult, coefficients mapped back to the original feature scale.
        Non-convergence is flagged on the result, not raised.
    """
    glm = glm or GlmSpec()
    penalty = penalty or PenaltySpec()
    Xs = design.standardized()
    y = design.y
    _check_inputs(Xs, y, glm)

    note = _default_init_note(penalty, init)
    if note is not None:
        lasso = PenaltySpec("lasso", penalty.lam)
        b0, b, _, _, _ = _solve(Xs, y, glm, lasso, tol, max_iter)
        init = (b0, b)
    b0, b, history, iterations, converged = _solve(Xs, y, glm, penalty, tol, max_iter, init)
    return _result(design, Xs, glm, penalty, b0, b, history, iterations, converged, note)


def _result(
    design: DesignMatrix,
    Xs: np.ndarray,
    glm: GlmSpec,
    penalty: PenaltySpec,
    b0: float,
    b: np.ndarray,
    history: List[float],
    iterations: int,
    converged: bool,
    note: Optional[str],
) -> FitResult:
    n = design.n
    keep = design.keep
    theta = np.zeros(design.p)
    theta[keep] = b / design.sds[keep]
    intercept = float(b0 - design.means[keep] @ theta[keep])
    active = int(np.count_nonzero(b))
    if glm.family == "gaussian":
        rss = float(np.sum((design.y - b0 - Xs @ b) ** 2))
        df = active + 1
        dispersion = rss / (n - df) if n > df else float("nan")
    else:
        dispersion = 1.0
    kkt = kkt_residual(Xs, design.y, b0, b, glm, penalty)
    if not converged:
        logger.warning(
            f"[FIT] {penalty.kind} fit at lambda={penalty.lam:.4g} did not converge after {iterations} iteration(s)"
        )
    logger.debug(f"[FIT] {penalty.kind} lambda={penalty.lam:.4g}: active={active}, kkt={kkt:.2e}, iterations={iterations}")
    meta = {k: design.metadata[k] for k in ("model", "index_order", "grid", "basis") if k in design.metadata}
    return FitResult(
        intercept=intercept,
        theta=theta,
        intercept_std=float(b0),
        theta_std=np.asarray(b, dtype=np.float64),
        dispersion=dispersion,
        lambda_used=float(penalty.lam),
        penalty=penalty,
        glm=glm,
        converged=converged,
        iterations=int(iterations),
        objective_history=[float(v) for v in history],
        kkt_residual=float(kkt),
        active_set_size=active,
        cap_count=int(design.metadata.get("cap_count", 0)),
        dropped=design.dropped,
        nonconvex_init=note,
        metadata=meta,
    )


def lambda_path(
    design: DesignMatrix,
    glm: Optional[GlmSpec] = None,
    penalty: Union[PenaltySpec, str] = "lasso",
    n_lambda: int = 100,
    ratio: float = 1e-3,
) -> np.ndarray:
    """
    Log-spaced λ from λ_max = max_j |x_jᵀ(y − ȳ)|/n (divided by alpha_mix for the
    elastic net) down to λ_max·ratio.

    Raises:
        DegenerateInputError: zero gradient at the null model (e.g. constant y)
    """
    spec = penalty if isinstance(penalty, PenaltySpec) else PenaltySpec(kind=penalty)
    if n_lambda < 1 or not 0 < ratio < 1:
        raise ConfigurationError(f"invalid path settings n_lambda={n_lambda}, ratio={ratio}")
    Xs = design.standardized()
    y = design.y
    centered = y - y.mean()
    if Xs.shape[1] == 0 or np.ptp(y) == 0:
        raise DegenerateInputError("null-model gradient is zero: no λ path to build")
    lam_max = float(np.max(np.abs(Xs.T @ centered)) / y.shape[0])
    if not lam_max > 1e-12 * max(1.0, float(np.abs(y).max())):
        raise DegenerateInputError("null-model gradient is zero: no λ path to build")
    if spec.kind == "elastic_net":
        lam_max /= spec.alpha_mix
    # rounding guard so the first fit is exactly empty
    lam_max *= 1.0 + 1e-10
    if n_lambda == 1:
        return np.array([lam_max])
    return np.exp(np.linspace(np.log(lam_max), np.log(lam_max * ratio), n_lambda))


def fit_path(
    design: DesignMatrix,
    glm: Optional[GlmSpec] = None,
    penalty: Optional[PenaltySpec] = None,
    lambdas: Optional[Sequence[float]] = None,
    n_lambda: int = 100,
    ratio: float = 1e-3,
    tol: float = 1e-7,
    max_iter: int = 10000,
) -> List[FitResult]:
    """
    One FitResult per λ (decreasing), warm-started along the path. Nonconvex
    penalties follow a warm-started lasso chain and start each fit from the lasso
    solution at the same λ.
    """
    glm = glm or GlmSpec()
    penalty = penalty or PenaltySpec()
    if lambdas is None:
        lambdas = lambda_path(design, glm, penalty, n_lambda, ratio)
    lambdas = sorted((float(v) for v in lambdas), reverse=True)
    Xs = design.standardized()
    _check_inputs(Xs, design.y, glm)

    results: List[FitResult] = []
    warm: Optional[Tuple[float, np.ndarray]] = None
    lasso_warm: Optional[Tuple[float, np.ndarray]] = None
    for lam in lambdas:
        spec = penalty.with_lambda(lam)
        note = None
        if spec.nonconvex:
            b0, b, _, _, _ = _solve(Xs, design.y, glm, PenaltySpec("lasso", lam), tol, max_iter, lasso_warm)
            lasso_warm = (b0, b.copy())
            warm = (b0, b.copy())
            note = "lasso_same_lambda"
        b0, b, history, iterations, converged = _solve(Xs, design.y, glm, spec, tol, max_iter, warm)
        warm = (b0, b.copy())
        results.append(_result(design, Xs, glm, spec, b0, b, history, iterations, converged, note))
    logger.info(
        f"[FIT] {penalty.kind} path of {len(results)} λ value(s), "
        f"active set {results[0].active_set_size} → {results[-1].active_set_size}"
    )
    return results


def _tensor_basis(bases: Sequence[BSplineBasis], points: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product of the per-axis basis evaluations (last axis fastest)."""
    out = eval_basis(bases[0], points[:, 0])
    for d in range(1, len(bases)):
        Bd = eval_basis(bases[d], points[:, d])
        out = (out[:, :, None] * Bd[:, None, :]).reshape(points.shape[0], -1)
    return out


def reconstruct_beta(
    fit_result: FitResult,
    basis_per_axis: Union[BSplineBasis, Sequence[BSplineBasis]],
    query_points: np.ndarray,
    chunk: int = 256,
) -> np.ndarray:
    """
    β(u) = Σ θ_k Π_d B_{k_d}(u_d) at each query point (rows of `query_points`, one
    column per axis). A single basis is reused for every axis.

    Raises:
        ConfigurationError: θ length does not match the tensor-product basis
        DomainError: query point outside the basis domain
    """
    pts = np.asarray(query_points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if isinstance(basis_per_axis, BSplineBasis):
        bases = [basis_per_axis] * pts.shape[1]
    else:
        bases = list(basis_per_axis)
    if len(bases) != pts.shape[1]:
        raise ConfigurationError(f"{len(bases)} basis axes for {pts.shape[1]}-dimensional query points")
    expected = int(np.prod([b.kappa for b in bases]))
    theta = np.asarray(fit_result.theta, dtype=np.float64)
    if theta.shape[0] != expected:
        raise ConfigurationError(f"theta has {theta.shape[0]} entries, tensor basis has {expected}")
    values = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], chunk):
        block = pts[start:start + chunk]
        values[start:start + chunk] = _tensor_basis(bases, block) @ theta
    return values
