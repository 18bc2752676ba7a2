from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import truncnorm

from src.backend.services.basis import BSplineBasis
from src.backend.services.config import PipelineConfig
from src.backend.services.empdist import EmpiricalDistribution, Grid, build_empirical_distribution
from src.backend.services.errors import ConfigurationError, DataIntegrityError, DegenerateInputError
from src.backend.services.features import DesignMatrix, assemble_design, build_feature_tensors, features_survival
from src.backend.services.ingest import ObservationSet
from src.backend.services.logger import logger
from src.backend.services.odds import OddsPolicy
from src.backend.services.penreg import GlmSpec, PenaltySpec, fit, fit_path, lambda_path

MODELS = ("baseline_mean", "survival", "odds1", "odds2", "odds4")
MODEL_ALIASES = {"mean": "baseline_mean"}
PENALTIES = ("lasso", "elastic_net", "scad", "mcp")


@dataclass(frozen=True)
class CVConfig:
    model: str = "odds4"
    penalty: PenaltySpec = PenaltySpec()
    glm: GlmSpec = GlmSpec()
    n_folds: int = 5
    n_replications: int = 100
    inner_folds: int = 5
    seed: int = 2024
    lambda_rule: str = "min"
    n_lambda: int = 100
    lambda_ratio: float = 1e-3
    tol: float = 1e-7
    max_iter: int = 10000
    workers: int = 1

    def __post_init__(self):
        model = MODEL_ALIASES.get(self.model, self.model)
        if model not in MODELS:
            raise ConfigurationError(f"Unknown model '{self.model}' (expected one of {MODELS})")
        object.__setattr__(self, "model", model)
        if self.n_folds < 2 or self.inner_folds < 2:
            raise ConfigurationError("cross-validation needs at least 2 folds")
        if self.n_replications < 1:
            raise ConfigurationError("n_replications must be >= 1")
        if self.lambda_rule not in ("min", "1se"):
            raise ConfigurationError(f"lambda_rule must be 'min' or '1se', got {self.lambda_rule}")

    @classmethod
    def from_pipeline(cls, config: PipelineConfig, model: str, penalty_kind: Optional[str] = None) -> "CVConfig":
        pen = config.penalty
        return cls(
            model=model,
            penalty=PenaltySpec(
                kind=penalty_kind or pen.kind, alpha_mix=pen.alpha_mix, a_scad=pen.a_scad, gamma_mcp=pen.gamma_mcp
            ),
            glm=GlmSpec(family=config.glm.family),
            n_folds=config.cv.n_folds,
            n_replications=config.cv.n_replications,
            inner_folds=config.cv.inner_folds,
            seed=config.cv.seed,
            lambda_rule=config.cv.lambda_rule,
            n_lambda=pen.n_lambda,
            lambda_ratio=pen.lambda_ratio,
            tol=pen.tol,
            max_iter=pen.max_iter,
            workers=config.parallel.workers,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "penalty": {k: v for k, v in self.penalty.to_dict().items() if k != "lambda"},
            "glm": self.glm.to_dict(),
            "n_folds": self.n_folds,
            "n_replications": self.n_replications,
            "inner_folds": self.inner_folds,
            "seed": self.seed,
            "lambda_rule": self.lambda_rule,
            "n_lambda": self.n_lambda,
            "lambda_ratio": self.lambda_ratio,
            "tol": self.tol,
            "max_iter": self.max_iter,
        }


@dataclass(frozen=True)
class CVReport:
    model: str
    penalty: str
    r2: List[float]
    mean_r2: float
    ci_lower: float
    ci_upper: float
    folds: List[Dict[str, Any]] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        def _num(x):
            return None if x is None or not np.isfinite(x) else float(x)

        return {
            "model": self.model,
            "penalty": self.penalty,
            "r2": [_num(v) for v in self.r2],
            "mean_r2": _num(self.mean_r2),
            "ci_lower": _num(self.ci_lower),
            "ci_upper": _num(self.ci_upper),
            "folds": self.folds,
            "config": self.config,
        }


def summarize_r2(r2: Sequence[float]) -> Tuple[float, float, float]:
    """Mean and empirical 2.5% / 97.5% quantiles of the finite replication R²s."""
    values = np.asarray([v for v in r2 if v is not None and np.isfinite(v)], dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan"), float("nan")
    lo, hi = np.quantile(values, [0.025, 0.975])
    return float(values.mean()), float(lo), float(hi)


######################################  designs per model  #######################################
def _sorted(subjects: Sequence[ObservationSet]) -> List[ObservationSet]:
    return sorted(subjects, key=lambda s: s.subject_id)


def baseline_mean_model(subjects: Sequence[ObservationSet]) -> DesignMatrix:
    """One covariate per subject: the mean of its (log-transformed) observations."""
    if not subjects:
        raise DegenerateInputError("no subjects for the mean baseline")
    X = np.array([[float(np.mean(s.values)) if s.n_obs else 0.0] for s in subjects])
    return DesignMatrix(
        X=X,
        y=[s.outcome for s in subjects],
        subject_ids=[s.subject_id for s in subjects],
        metadata={"model": "baseline_mean", "index_order": 0},
    )


def _distributions(
    subjects: Sequence[Union[ObservationSet, EmpiricalDistribution]], grid: Grid, drop_zeros: bool = False
) -> List[EmpiricalDistribution]:
    return [
        s if isinstance(s, EmpiricalDistribution) else build_empirical_distribution(s, grid, drop_zeros)
        for s in subjects
    ]


def survival_model_features(
    subjects: Sequence[Union[ObservationSet, EmpiricalDistribution]],
    basis: BSplineBasis,
    grid: Grid,
    outcomes: Optional[Sequence[float]] = None,
    drop_zeros: bool = False,
) -> DesignMatrix:
    """κ columns ∫ B_k(u) S_i(u) du per subject (the survival-covariate baseline)."""
    dists = _distributions(subjects, grid, drop_zeros)
    if outcomes is None:
        outcomes = [getattr(s, "outcome", np.nan) for s in subjects]
    X = np.vstack([features_survival(d, basis, grid) for d in dists])
    return DesignMatrix(
        X=X,
        y=outcomes,
        subject_ids=[d.subject_id for d in dists],
        metadata={"model": "survival", "index_order": 1, "grid": grid.to_dict(), "basis": basis.to_dict()},
    )


def match_distributions(
    subjects: Sequence[ObservationSet], distributions: Mapping[str, EmpiricalDistribution], grid: Grid
) -> List[EmpiricalDistribution]:
    """Checkpointed distributions in subject order; every one must sit on `grid`."""
    missing = [s.subject_id for s in subjects if s.subject_id not in distributions]
    if missing:
        raise DataIntegrityError(f"no checkpointed distribution for subject(s) {missing[:5]}")
    dists = [distributions[s.subject_id] for s in subjects]
    for d in dists:
        if d.grid != grid:
            raise ConfigurationError(f"checkpoint grid {d.grid.to_dict()} differs from the configured {grid.to_dict()}")
    return dists


def model_design(
    subjects: Sequence[ObservationSet],
    model: str,
    config: Optional[PipelineConfig] = None,
    policy: Optional[OddsPolicy] = None,
    distributions: Optional[Mapping[str, EmpiricalDistribution]] = None,
) -> DesignMatrix:
    """
    Design for any model, rows sorted by subject_id so the input order never
    matters downstream.

    `distributions` (by subject_id) replaces binning the raw values, e.g. when
    they come from a distribution checkpoint.
    """
    config = config or PipelineConfig()
    model = MODEL_ALIASES.get(model, model)
    subjects = _sorted(subjects)
    if model == "baseline_mean":
        return baseline_mean_model(subjects)
    if model not in MODELS:
        raise ConfigurationError(f"Unknown model '{model}' (expected one of {MODELS})")
    grid = Grid(d_max=config.grid.d_max, n_points=config.grid.n_points)
    basis = BSplineBasis(degree=config.basis.degree, n_interior=config.basis.n_interior, d_max=config.grid.d_max)
    if distributions is not None:
        dists = match_distributions(subjects, distributions, grid)
    else:
        dists = _distributions(subjects, grid, config.distribution.drop_zeros)
    outcomes = [s.outcome for s in subjects]
    if model == "survival":
        return survival_model_features(dists, basis, grid, outcomes)
    policy = policy or OddsPolicy(denom_floor=config.odds.denom_floor, cap=config.odds.cap)
    tensors = build_feature_tensors(
        dists, model, basis, grid, policy, config.odds.ordered_region, config.parallel.workers
    )
    return assemble_design(tensors, outcomes)


######################################  cross-validation  #######################################
def _mse(y: np.ndarray, yhat: np.ndarray) -> float:
    return float(np.mean((y - yhat) ** 2))


def select_lambda(design: DesignMatrix, config: CVConfig, rng: np.random.Generator) -> Tuple[float, np.ndarray]:
    """
    Inner K-fold choice of λ on `design` (already training-only).
    Returns (λ, path); rule "min" takes the lowest mean MSE, "1se" the largest λ
    within one standard error of it.
    """
    path = lambda_path(design, config.glm, config.penalty, config.n_lambda, config.lambda_ratio)
    k = min(config.inner_folds, design.n)
    folds = np.array_split(rng.permutation(design.n), k)
    errors = np.full((k, path.size), np.nan)
    for f, test in enumerate(folds):
        train = np.setdiff1d(np.arange(design.n), test)
        fits = fit_path(design.subset(train), config.glm, config.penalty, path, tol=config.tol, max_iter=config.max_iter)
        for j, res in enumerate(fits):
            errors[f, j] = _mse(design.y[test], res.predict(design.X[test]))
    mean = errors.mean(axis=0)
    best = int(np.argmin(mean))
    if config.lambda_rule == "1se":
        se = errors[:, best].std(ddof=1) / np.sqrt(k) if k > 1 else 0.0
        best = int(np.flatnonzero(mean <= mean[best] + se)[0])
    return float(path[best]), path


def _fit_fold(design: DesignMatrix, train: np.ndarray, config: CVConfig, rng: np.random.Generator):
    """Training-only fit; returns (predict function, λ, fit diagnostics)."""
    train_design = design.subset(train)
    if config.model == "baseline_mean":
        res = fit(train_design, config.glm, PenaltySpec("lasso", 0.0), config.tol, config.max_iter)
        return res.predict, 0.0, res
    try:
        lam, path = select_lambda(train_design, config, rng)
    except DegenerateInputError as exc:
        logger.warning(f"[CV] no usable λ path on this training fold ({exc}); predicting the training mean")
        ybar = float(train_design.y.mean())
        return (lambda X: np.full(X.shape[0], ybar)), None, None
    chain = path[path >= lam]
    res = fit_path(train_design, config.glm, config.penalty, chain, tol=config.tol, max_iter=config.max_iter)[-1]
    return res.predict, lam, res


def _replication(design: DesignMatrix, config: CVConfig, rep: int) -> Tuple[float, List[Dict[str, Any]]]:
    n = design.n
    rng = np.random.default_rng([config.seed, rep])
    folds = np.array_split(rng.permutation(n), config.n_folds)
    sse, sst = 0.0, 0.0
    diags: List[Dict[str, Any]] = []
    for f, test in enumerate(folds):
        test = np.sort(test)
        train = np.setdiff1d(np.arange(n), test)
        diag: Dict[str, Any] = {"replication": rep, "fold": f, "n_train": int(train.size), "n_test": int(test.size)}
        y_train = design.y[train]
        if np.ptp(y_train) == 0:
            logger.warning(f"[CV] replication {rep} fold {f}: constant training outcome, fold skipped")
            diags.append({**diag, "skipped": True})
            continue
        predict, lam, res = _fit_fold(design, train, config, np.random.default_rng([config.seed, rep, f]))
        yhat = predict(design.X[test])
        sse += float(np.sum((design.y[test] - yhat) ** 2))
        sst += float(np.sum((design.y[test] - y_train.mean()) ** 2))
        diags.append({
            **diag,
            "skipped": False,
            "lambda": lam,
            "active_set_size": res.active_set_size if res is not None else 0,
            "converged": res.converged if res is not None else True,
        })
    r2 = 1.0 - sse / sst if sst > 0 else float("nan")
    return r2, diags


def cross_validate_design(design: DesignMatrix, config: CVConfig) -> CVReport:
    """
    Repeated K-fold CV on a prebuilt design. Standardization, λ and ȳ_train come
    from the training folds only; squared errors are pooled over the folds into
    one out-of-sample R² per replication.
    """
    if design.n < 2 * config.n_folds:
        raise DegenerateInputError(f"{design.n} subject(s) is too few for {config.n_folds}-fold CV")
    reps = range(config.n_replications)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(lambda r: _replication(design, config, r), reps))
    else:
        outcomes = [_replication(design, config, r) for r in reps]
    r2 = [o[0] for o in outcomes]
    folds = [d for o in outcomes for d in o[1]]
    mean, lo, hi = summarize_r2(r2)
    penalty = "none" if config.model == "baseline_mean" else config.penalty.kind
    logger.info(
        f"[CV] model={config.model} penalty={penalty}: mean R²={mean:.4f} "
        f"(95% CI {lo:.4f} .. {hi:.4f}) over {len(r2)} replication(s)"
    )
    return CVReport(
        model=config.model,
        penalty=penalty,
        r2=r2,
        mean_r2=mean,
        ci_lower=lo,
        ci_upper=hi,
        folds=folds,
        config=config.to_dict(),
    )


def cross_validate(
    subjects: Sequence[ObservationSet],
    config: CVConfig,
    settings: Optional[PipelineConfig] = None,
) -> CVReport:
    """
    Builds the model's design (features are per subject, so no fold can leak
    into them) and runs repeated K-fold CV with nested λ selection.
    """
    if len(subjects) < 2 * config.n_folds:
        raise DegenerateInputError(f"{len(subjects)} subject(s) is too few for {config.n_folds}-fold CV")
    design = model_design(subjects, config.model, settings)
    return cross_validate_design(design, config)


def run_table(
    subjects: Sequence[ObservationSet],
    settings: Optional[PipelineConfig] = None,
    models: Sequence[str] = MODELS,
    penalties: Sequence[str] = PENALTIES,
) -> Dict[str, Any]:
    """
    Every model × penalty cell (mean R² with its interval), designs built once per model.
    The mean baseline is unpenalized and fills a single "none" cell.
    """
    settings = settings or PipelineConfig()
    cells: Dict[str, Dict[str, Any]] = {}
    for model in models:
        design = model_design(subjects, model, settings)
        row: Dict[str, Any] = {}
        for kind in (["none"] if MODEL_ALIASES.get(model, model) == "baseline_mean" else penalties):
            cfg = CVConfig.from_pipeline(settings, model, None if kind == "none" else kind)
            rep = cross_validate_design(design, cfg).to_dict()
            row[kind] = {"mean_r2": rep["mean_r2"], "ci_lower": rep["ci_lower"], "ci_upper": rep["ci_upper"]}
        cells[MODEL_ALIASES.get(model, model)] = row
    return {"cells": cells, "models": list(cells), "penalties": list(penalties)}


######################################  synthetic benchmark  #######################################
class SyntheticScenario(BaseModel):
    """
    Two-component subject distributions on [0, d_max]: a low-activity bulk plus a
    high-activity tail holding a subject-specific share π_i of the non-zero mass,
    with a fixed share of exact zeros. The outcome is linear in one functional.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_subjects: int = Field(200, ge=2)
    m_per_subject: int = Field(1000, ge=1)
    d_max: float = Field(9.6, gt=0)
    zero_fraction: float = Field(0.2, ge=0, lt=1)
    bulk_mean: float = 1.5
    bulk_sd: float = Field(1.0, gt=0)
    tail_mean: float = 7.0
    tail_sd: float = Field(1.0, gt=0)
    tail_low: float = Field(5.0, ge=0)
    pi_low: float = Field(0.0, ge=0, le=1)
    pi_high: float = Field(0.3, ge=0, le=1)
    outcome: Literal["tail_weight", "tail_mass_above", "mean"] = "tail_weight"
    threshold: float = Field(5.0, ge=0)
    beta0: float = 2.0
    beta1: float = 10.0
    noise_sd: float = Field(0.5, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "SyntheticScenario":
        if self.pi_low > self.pi_high:
            raise ValueError("pi_low must not exceed pi_high")
        if self.tail_low >= self.d_max:
            raise ValueError("tail_low must lie below d_max")
        return self

    def outcome_rule(self) -> str:
        functional = {
            "tail_weight": "pi_i (latent tail share)",
            "tail_mass_above": f"P_i(X > {self.threshold})",
            "mean": "mean_i(X)",
        }[self.outcome]
        return f"y_i = {self.beta0} + {self.beta1} * {functional} + N(0, {self.noise_sd}^2)"


def _truncnorm(mean: float, sd: float, low: float, high: float, size: int, rng: np.random.Generator) -> np.ndarray:
    a, b = (low - mean) / sd, (high - mean) / sd
    return truncnorm.rvs(a, b, loc=mean, scale=sd, size=size, random_state=rng)


def generate_synthetic(scenario: SyntheticScenario, seed: int) -> Tuple[List[ObservationSet], Dict[str, Any]]:
    """Seeded synthetic cohort plus the ground-truth record (π_i, functional, outcome rule)."""
    rng = np.random.default_rng(seed)
    pis = rng.uniform(scenario.pi_low, scenario.pi_high, size=scenario.n_subjects)
    noise = rng.normal(0.0, scenario.noise_sd, size=scenario.n_subjects) if scenario.noise_sd > 0 else np.zeros(scenario.n_subjects)

    subjects: List[ObservationSet] = []
    functional: Dict[str, float] = {}
    for i, pi in enumerate(pis):
        sub = np.random.default_rng([seed, i])
        m = scenario.m_per_subject
        component = sub.uniform(size=m)
        is_zero = component < scenario.zero_fraction
        is_tail = ~is_zero & (sub.uniform(size=m) < pi)
        values = np.zeros(m)
        n_tail = int(is_tail.sum())
        n_bulk = int((~is_zero & ~is_tail).sum())
        values[is_tail] = _truncnorm(scenario.tail_mean, scenario.tail_sd, scenario.tail_low, scenario.d_max, n_tail, sub)
        values[~is_zero & ~is_tail] = _truncnorm(scenario.bulk_mean, scenario.bulk_sd, 0.0, scenario.d_max, n_bulk, sub)

        if scenario.outcome == "tail_weight":
            f = float(pi)
        elif scenario.outcome == "tail_mass_above":
            f = float(np.mean(values > scenario.threshold))
        else:
            f = float(values.mean())
        sid = f"S{i + 1:04d}"
        functional[sid] = f
        subjects.append(
            ObservationSet(subject_id=sid, values=values, outcome=float(scenario.beta0 + scenario.beta1 * f + noise[i]))
        )

    truth = {
        "scenario": scenario.model_dump(),
        "seed": int(seed),
        "outcome_rule": scenario.outcome_rule(),
        "pi": {s.subject_id: float(p) for s, p in zip(subjects, pis)},
        "functional": functional,
    }
    logger.info(f"[SYNTH] {len(subjects)} subject(s), m={scenario.m_per_subject}, outcome={scenario.outcome}")
    return subjects, truth
