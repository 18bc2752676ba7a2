from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.backend.services.basis import BSplineBasis
from src.backend.services.config import PipelineConfig, load_config, provenance
from src.backend.services.empdist import EmpiricalDistribution, Grid, build_empirical_distribution, hazard_curve
from src.backend.services.errors import ConfigurationError, GoregError, UsageError
from src.backend.services.evalcv import (
    CVConfig,
    SyntheticScenario,
    cross_validate_design,
    generate_synthetic,
    match_distributions,
    model_design,
    run_table,
)
from src.backend.services.features import assemble_design, build_feature_tensors
from src.backend.services.ingest import ObservationSet, ingest_subjects, read_minute_csv, read_outcomes_csv
from src.backend.services.logger import logger
from src.backend.services.odds import OddsPolicy, odds1_curve, odds2_surface, odds_surface, residual_life_surface
from src.backend.services.penreg import GlmSpec, PenaltySpec, fit, fit_path
from src.backend.services import storage

STAGES = ("ingest", "synth", "distributions", "odds", "features", "fit", "cv", "table", "plotdata")
PLOT_KINDS = ("density", "cdf", "survival", "hazard", "odds1", "odds2", "residual_life")
ODDS_MODELS = ("odds1", "odds2", "odds4")


@dataclass
class PipelineResult:
    stage: str
    artifacts: List[Path] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


def _require(*paths: Optional[Union[str, Path]]) -> None:
    for p in paths:
        if p is None:
            raise ConfigurationError("a required input path is missing")
        if not Path(p).exists():
            raise ConfigurationError(f"Input file not found: {p}")


def export_plotdata(
    kind: str,
    subjects: Sequence[Union[ObservationSet, EmpiricalDistribution]],
    out: Optional[Union[str, Path]] = None,
    config: Optional[PipelineConfig] = None,
) -> pd.DataFrame:
    """
    Long-format table (subject_id, u [, u2], value) for one kind of curve or surface.

    density/cdf/survival/hazard/odds1 give G rows per subject, odds2 gives G² rows;
    residual_life gives (G+1)·G rows, u = 0 being the boundary row where the value is F(u2).
    """
    if kind not in PLOT_KINDS:
        raise UsageError(f"Unknown plotdata kind '{kind}' (expected one of {', '.join(PLOT_KINDS)})")
    config = config or PipelineConfig()
    grid = Grid(d_max=config.grid.d_max, n_points=config.grid.n_points)
    policy = OddsPolicy(denom_floor=config.odds.denom_floor, cap=config.odds.cap)
    pts = grid.points
    frames: List[pd.DataFrame] = []
    for s in subjects:
        d = s if isinstance(s, EmpiricalDistribution) else build_empirical_distribution(
            s, grid, config.distribution.drop_zeros
        )
        if kind in ("odds2", "residual_life"):
            if kind == "odds2":
                surface, rows = odds2_surface(d, policy), pts
            else:
                surface, rows = residual_life_surface(d, policy)[:, 1:], np.concatenate(([0.0], pts))
            u, u2 = np.meshgrid(rows, pts, indexing="ij")
            frames.append(pd.DataFrame({
                "subject_id": d.subject_id, "u": u.ravel(), "u2": u2.ravel(), "value": surface.ravel(),
            }))
            continue
        curve = {
            "density": lambda: d.pmf,
            "cdf": lambda: d.cdf,
            "survival": lambda: d.survival,
            "hazard": lambda: hazard_curve(d, policy),
            "odds1": lambda: odds1_curve(d, policy),
        }[kind]()
        frames.append(pd.DataFrame({"subject_id": d.subject_id, "u": pts, "value": curve}))
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["subject_id", "u", "value"])
    if out is not None:
        storage.write_csv(out, table)
    logger.info(f"[PIPELINE] plotdata {kind}: {len(table)} row(s) for {len(subjects)} subject(s)")
    return table


class Pipeline:
    """
    Orchestrateur des étapes goreg: ingest → distributions → odds → features → fit/cv.

    Each stage reads its inputs from disk, writes its artifact atomically and stamps
    it with the provenance block (tool version, config hash, input hashes, config).

    Args:
        config: pipeline configuration (charge files/config.json par défaut)
    """

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.cfg = config or load_config()
        self.grid = Grid(d_max=self.cfg.grid.d_max, n_points=self.cfg.grid.n_points)
        self.basis = BSplineBasis(
            degree=self.cfg.basis.degree, n_interior=self.cfg.basis.n_interior, d_max=self.cfg.grid.d_max
        )

    def _policy(self) -> OddsPolicy:
        return OddsPolicy(denom_floor=self.cfg.odds.denom_floor, cap=self.cfg.odds.cap)

    def _provenance(self, **inputs: Union[str, Path]) -> Dict[str, Any]:
        return provenance(self.cfg, inputs)

    def _subjects(self, path: Union[str, Path]) -> List[ObservationSet]:
        _require(path)
        subjects, _ = storage.read_subjects(path)
        return subjects

    def _distributions(self, subjects: Sequence[ObservationSet]) -> List[EmpiricalDistribution]:
        return [build_empirical_distribution(s, self.grid, self.cfg.distribution.drop_zeros) for s in subjects]

    # ---------------------------
    # Stages
    # ---------------------------
    def ingest(self, minutes: str, outcomes: str, out: str, format: str = "wide") -> PipelineResult:
        _require(minutes, outcomes)
        series = read_minute_csv(minutes, format=format)
        accepted, rejected = ingest_subjects(series, read_outcomes_csv(outcomes), self.cfg.parallel.workers)
        prov = self._provenance(minutes=minutes, outcomes=outcomes)
        prov["rejections"] = [{"subject_id": r.subject_id, "reason": r.reason} for r in rejected]
        storage.write_subjects(out, accepted, prov)
        return PipelineResult("ingest", [Path(out)], {"accepted": len(accepted), "rejected": len(rejected)})

    def synth(self, out: str, seed: int, scenario: Optional[str] = None) -> PipelineResult:
        inputs: Dict[str, Union[str, Path]] = {}
        if scenario is not None:
            _require(scenario)
            inputs["scenario"] = scenario
            try:
                chosen = SyntheticScenario.model_validate(storage.read_json(scenario))
            except ValueError as exc:
                raise ConfigurationError(f"Invalid scenario {scenario}: {exc}") from exc
        else:
            chosen = SyntheticScenario(d_max=self.cfg.grid.d_max)
        subjects, truth = generate_synthetic(chosen, seed)
        prov = self._provenance(**inputs)
        prov["ground_truth"] = truth
        storage.write_subjects(out, subjects, prov)
        return PipelineResult("synth", [Path(out)], {"subjects": len(subjects)})

    def distributions(self, subjects: str, out: str) -> PipelineResult:
        dists = self._distributions(self._subjects(subjects))
        storage.write_distributions(out, dists, self._provenance(subjects=subjects))
        logger.info(f"[EMPDIST] {len(dists)} distribution(s) checkpointed → {out}")
        return PipelineResult("distributions", [Path(out)], {"subjects": len(dists)})

    def _checkpoint(self, path: Union[str, Path]) -> Dict[str, EmpiricalDistribution]:
        """Distribution checkpoint by subject_id, refused if it was binned differently."""
        _require(path)
        dists, prov = storage.read_distributions(path)
        saved = prov.get("config", {}).get("distribution", {}).get("drop_zeros")
        if saved is not None and saved != self.cfg.distribution.drop_zeros:
            raise ConfigurationError(f"{path} was built with drop_zeros={saved}, config says {self.cfg.distribution.drop_zeros}")
        for d in dists:
            if d.grid != self.grid:
                raise ConfigurationError(f"{path}: grid {d.grid.to_dict()} differs from the configured {self.grid.to_dict()}")
        return {d.subject_id: d for d in dists}

    def odds(
        self, index_order: int, out: str, subjects: Optional[str] = None, distributions: Optional[str] = None
    ) -> PipelineResult:
        if (subjects is None) == (distributions is None):
            raise UsageError("odds needs exactly one of --subjects or --distributions")
        if index_order not in (1, 2, 4):
            raise UsageError(f"--index must be 1, 2 or 4, got {index_order}")
        if distributions is not None:
            checkpoint = self._checkpoint(distributions)
            dists = [checkpoint[sid] for sid in sorted(checkpoint)]
            inputs = {"distributions": distributions}
        else:
            dists = self._distributions(self._subjects(subjects))
            inputs = {"subjects": subjects}
        policy = self._policy()
        values = [odds_surface(d, index_order, policy).values for d in dists]
        if index_order == 4:
            surfaces = {"A": np.stack([v[0] for v in values]), "C": np.stack([v[1] for v in values])}
        else:
            surfaces = {f"h{index_order}": np.stack(values)}
        meta = {
            "grid": self.grid.to_dict(),
            "policy": policy.to_dict(),
            "provenance": self._provenance(**inputs),
        }
        storage.save_odds(out, [d.subject_id for d in dists], index_order, surfaces, meta)
        logger.info(f"[ODDS] {len(dists)} subject(s), {index_order}-index, cap_count={policy.cap_count}")
        return PipelineResult("odds", [Path(out)], {"cap_count": policy.cap_count})

    def features(self, subjects: str, model: str, out: str, distributions: Optional[str] = None) -> PipelineResult:
        subs = sorted(self._subjects(subjects), key=lambda s: s.subject_id)
        inputs = {"subjects": subjects}
        checkpoint = None
        if distributions is not None:
            checkpoint = self._checkpoint(distributions)
            inputs["distributions"] = distributions
        factors = None
        if model in ODDS_MODELS:
            dists = (
                match_distributions(subs, checkpoint, self.grid) if checkpoint is not None else self._distributions(subs)
            )
            tensors = build_feature_tensors(
                dists, model, self.basis, self.grid,
                self._policy(), self.cfg.odds.ordered_region, self.cfg.parallel.workers,
            )
            design = assemble_design(tensors, [s.outcome for s in subs])
            if model == "odds4":
                factors = (np.stack([t.factors[0] for t in tensors]), np.stack([t.factors[1] for t in tensors]))
        else:
            design = model_design(subs, model, self.cfg, distributions=checkpoint)
        storage.save_design(out, design, self._provenance(**inputs), factors)
        return PipelineResult("features", [Path(out)], {"n": design.n, "p": design.p, "dropped": len(design.dropped)})

    def fit(self, design_path: str, out: str, lam: Union[float, str, None] = None) -> PipelineResult:
        _require(design_path)
        design, meta = storage.load_design(design_path)
        pen = self.cfg.penalty
        spec = PenaltySpec(kind=pen.kind, alpha_mix=pen.alpha_mix, a_scad=pen.a_scad, gamma_mcp=pen.gamma_mcp)
        glm = GlmSpec(family=self.cfg.glm.family)
        prov = self._provenance(design=design_path)
        if lam is None or lam == "path":
            fits = fit_path(design, glm, spec, None, pen.n_lambda, pen.lambda_ratio, pen.tol, pen.max_iter)
            payload: Dict[str, Any] = {"path": [f.to_dict() for f in fits]}
        else:
            try:
                value = float(lam)
            except ValueError as exc:
                raise UsageError(f"--lambda must be a number or 'path', got {lam}") from exc
            payload = fit(design, glm, spec.with_lambda(value), pen.tol, pen.max_iter).to_dict()
        payload.update({"provenance": prov, "standardization": meta.get("standardization", {})})
        storage.write_json(out, payload)
        return PipelineResult("fit", [Path(out)])

    def cv(self, subjects: str, model: str, out: str) -> PipelineResult:
        subs = self._subjects(subjects)
        cfg = CVConfig.from_pipeline(self.cfg, model)
        report = cross_validate_design(model_design(subs, cfg.model, self.cfg, self._policy()), cfg)
        payload = {**report.to_dict(), "provenance": self._provenance(subjects=subjects)}
        storage.write_json(out, payload)
        return PipelineResult("cv", [Path(out)], {"mean_r2": report.mean_r2})

    def table(self, subjects: str, out: str) -> PipelineResult:
        subs = self._subjects(subjects)
        payload = {**run_table(subs, self.cfg), "provenance": self._provenance(subjects=subjects)}
        storage.write_json(out, payload)
        return PipelineResult("table", [Path(out)])

    def plotdata(self, kind: str, subjects: str, out: str) -> PipelineResult:
        if kind not in PLOT_KINDS:
            raise UsageError(f"Unknown plotdata kind '{kind}' (expected one of {', '.join(PLOT_KINDS)})")
        table = export_plotdata(kind, self._subjects(subjects), out, self.cfg)
        return PipelineResult("plotdata", [Path(out)], {"rows": len(table)})


def run_pipeline(config: PipelineConfig, stage: str, **options: Any) -> PipelineResult:
    """
    Runs one stage with `options` (the stage method's keyword arguments).
    Any GoregError escaping the stage is tagged with the stage name.
    """
    if stage not in STAGES:
        raise UsageError(f"Unknown stage '{stage}' (expected one of {', '.join(STAGES)})")
    pipeline = Pipeline(config)
    log = logger.bind(stage=stage)
    log.info(f"[PIPELINE] stage {stage} started (config {config.config_hash()[:12]})")
    try:
        result = getattr(pipeline, stage)(**options)
    except GoregError as exc:
        if exc.stage is None:
            exc.stage = stage
        raise
    log.info(f"[PIPELINE] stage {stage} done → {', '.join(str(a) for a in result.artifacts) or '-'}")
    return result


# ---------------------------
# Local test (synthetic cohort, no input files needed)
# ---------------------------
if __name__ == "__main__":
    cfg = PipelineConfig().with_overrides({"cv.n_replications": 2, "grid.n_points": 20})
    subjects, truth = generate_synthetic(SyntheticScenario(n_subjects=40, m_per_subject=300), seed=1)
    print(truth["outcome_rule"])
    print(export_plotdata("odds1", subjects[:1], config=cfg).head())
    report = cross_validate_design(model_design(subjects, "odds2", cfg), CVConfig.from_pipeline(cfg, "odds2"))
    print(f"mean R² = {report.mean_r2:.3f} [{report.ci_lower:.3f}, {report.ci_upper:.3f}]")
