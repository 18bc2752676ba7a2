import json
import time

import numpy as np
import pytest

from src.backend.services import evalcv
from src.backend.services.basis import BSplineBasis
from src.backend.services.config import PipelineConfig
from src.backend.services.empdist import Grid, build_empirical_distribution
from src.backend.services.errors import ConfigurationError, DegenerateInputError
from src.backend.services.evalcv import (
    CVConfig,
    SyntheticScenario,
    baseline_mean_model,
    cross_validate,
    cross_validate_design,
    generate_synthetic,
    model_design,
    run_table,
    select_lambda,
    summarize_r2,
    survival_model_features,
)
from src.backend.services.features import DesignMatrix, features_survival
from src.backend.services.ingest import ObservationSet
from src.backend.services.penreg import PenaltySpec, fit_path

SMALL = PipelineConfig().with_overrides({"grid.n_points": 20, "basis.n_interior": 2})


def small_design(rng, n=40, p=6):
    X = rng.normal(size=(n, p))
    y = 1.0 + 2.0 * X[:, 0] - X[:, 1] + 0.5 * rng.normal(size=n)
    return DesignMatrix(X=X, y=y, subject_ids=[f"S{i:03d}" for i in range(n)])


def fast_config(**kwargs):
    base = dict(model="odds1", n_replications=3, n_lambda=10, inner_folds=3, tol=1e-8)
    return CVConfig(**{**base, **kwargs})


###########################################  configuration  ############################################
def test_cv_config_validation():
    assert CVConfig(model="mean").model == "baseline_mean"
    with pytest.raises(ConfigurationError):
        CVConfig(model="odds3")
    with pytest.raises(ConfigurationError):
        CVConfig(n_folds=1)
    with pytest.raises(ConfigurationError):
        CVConfig(lambda_rule="max")


def test_cv_config_from_pipeline():
    settings = PipelineConfig().with_overrides({"cv.n_folds": 4, "penalty.kind": "mcp", "parallel.workers": 3})
    cfg = CVConfig.from_pipeline(settings, "odds2")
    assert cfg.n_folds == 4 and cfg.penalty.kind == "mcp" and cfg.workers == 3
    assert CVConfig.from_pipeline(settings, "odds2", "lasso").penalty.kind == "lasso"
    assert "lambda" not in cfg.to_dict()["penalty"]


def test_summarize_r2_brackets_the_mean(rng):
    for _ in range(50):
        r2 = rng.normal(0.2, 0.1, size=rng.integers(40, 120)).tolist()
        mean, lo, hi = summarize_r2(r2)
        assert lo <= mean <= hi
    mean, lo, hi = summarize_r2([0.1, float("nan"), 0.3])
    assert mean == pytest.approx(0.2)
    assert all(np.isnan(summarize_r2([float("nan")])))


###########################################  model designs  ############################################
def test_baseline_mean_design():
    subjects = [
        ObservationSet("A", np.zeros(10), 1.0),
        ObservationSet("B", np.array([1.0, 2.0, 6.0]), 2.0),
    ]
    design = baseline_mean_model(subjects)
    assert design.X.shape == (2, 1)
    assert design.X[0, 0] == 0.0
    assert design.X[1, 0] == pytest.approx(3.0)
    np.testing.assert_array_equal(design.y, [1.0, 2.0])


def test_survival_design_rows(make_obs):
    basis = BSplineBasis(degree=3, n_interior=8, d_max=9.6)
    grid = Grid(d_max=9.6, n_points=50)
    subjects = [make_obs(subject_id=f"S{i}", outcome=float(i)) for i in range(3)]
    subjects.append(ObservationSet("Z", np.zeros(20), 9.0))
    design = survival_model_features(subjects, basis, grid)
    assert design.X.shape == (4, 12)
    for row, s in zip(design.X, subjects):
        np.testing.assert_array_equal(row, features_survival(build_empirical_distribution(s, grid), basis, grid))
    # point mass at zero: S vanishes on every node
    assert np.all(design.X[3] == 0.0)


def test_model_design_sorts_by_subject(make_obs):
    subjects = [make_obs(subject_id=sid, outcome=float(k)) for k, sid in enumerate(["C", "A", "B"])]
    for model in ("mean", "survival", "odds2"):
        design = model_design(subjects, model, SMALL)
        assert design.subject_ids == ["A", "B", "C"]
        np.testing.assert_array_equal(design.y, [1.0, 2.0, 0.0])
    with pytest.raises(ConfigurationError):
        model_design(subjects, "odds5", SMALL)


###########################################  cross-validation  ###########################################
def test_noise_outcome_has_no_predictive_value(make_obs, rng):
    subjects = [make_obs(subject_id=f"S{i:03d}", outcome=float(rng.normal())) for i in range(60)]
    report = cross_validate(subjects, CVConfig(model="mean", n_replications=100))
    assert len(report.r2) == 100
    assert report.mean_r2 <= 0.05
    assert report.penalty == "none"


def test_exact_mean_signal_is_recovered(make_obs):
    subjects = []
    for i in range(40):
        obs = make_obs(subject_id=f"S{i:03d}")
        subjects.append(ObservationSet(obs.subject_id, obs.values, 2.0 + 3.0 * float(obs.values.mean())))
    report = cross_validate(subjects, CVConfig(model="baseline_mean", n_replications=10, tol=1e-12))
    assert report.mean_r2 > 0.99


def test_report_is_reproducible(rng):
    design = small_design(rng)
    cfg = fast_config(penalty=PenaltySpec("lasso"))
    first = json.dumps(cross_validate_design(design, cfg).to_dict(), sort_keys=True)
    second = json.dumps(cross_validate_design(design, cfg).to_dict(), sort_keys=True)
    threaded = json.dumps(cross_validate_design(design, fast_config(workers=3)).to_dict(), sort_keys=True)
    assert first == second
    assert json.loads(first)["config"] == json.loads(threaded)["config"]
    assert json.loads(first)["r2"] == json.loads(threaded)["r2"]


def test_input_order_does_not_matter(make_obs, rng):
    subjects = [make_obs(subject_id=f"S{i:03d}", outcome=float(rng.normal())) for i in range(20)]
    cfg = fast_config(model="survival", n_replications=2)
    shuffled = [subjects[i] for i in rng.permutation(len(subjects))]
    a = cross_validate(subjects, cfg, SMALL).to_dict()
    b = cross_validate(shuffled, cfg, SMALL).to_dict()
    assert a == b


def test_too_few_subjects(rng):
    design = small_design(rng, n=9)
    with pytest.raises(DegenerateInputError):
        cross_validate_design(design, fast_config())


def test_constant_training_fold_is_skipped(rng):
    X = rng.normal(size=(10, 1))
    y = np.zeros(10)
    y[9] = 1.0
    design = DesignMatrix(X=X, y=y, subject_ids=[str(i) for i in range(10)])
    report = cross_validate_design(design, CVConfig(model="mean", n_folds=2, n_replications=3))
    assert len(report.folds) == 6
    for rep in range(3):
        flags = [d["skipped"] for d in report.folds if d["replication"] == rep]
        assert flags.count(True) == 1


def test_lambda_selection_uses_training_rows_only(rng):
    design = small_design(rng, n=50)
    test = np.arange(40, 50)
    train = np.arange(40)
    X, y = design.X.copy(), design.y.copy()
    # a marker column that perfectly predicts y on the held-out rows
    y[test] = rng.normal(size=10) * 100
    X[test, 5] = y[test]
    leaky = DesignMatrix(X=X, y=y, subject_ids=design.subject_ids)
    cfg = fast_config(penalty=PenaltySpec("lasso"))
    clean_fit = evalcv._fit_fold(design, train, cfg, np.random.default_rng(7))
    leaky_fit = evalcv._fit_fold(leaky, train, cfg, np.random.default_rng(7))
    assert clean_fit[1] == leaky_fit[1]
    np.testing.assert_array_equal(clean_fit[0](design.X[train]), leaky_fit[0](design.X[train]))


def test_one_standard_error_rule_picks_a_larger_lambda(rng):
    design = small_design(rng, n=60, p=15)
    lam_min, path = select_lambda(design, fast_config(), np.random.default_rng(3))
    lam_1se, _ = select_lambda(design, fast_config(lambda_rule="1se"), np.random.default_rng(3))
    assert lam_min in path and lam_1se in path
    assert lam_1se >= lam_min


def test_table_cells(make_obs, rng):
    subjects = [make_obs(subject_id=f"S{i:03d}", outcome=float(rng.normal())) for i in range(20)]
    settings = SMALL.with_overrides({"cv.n_replications": 2, "penalty.n_lambda": 8, "cv.inner_folds": 3})
    table = run_table(subjects, settings, models=("mean", "odds1"), penalties=("lasso", "mcp"))
    assert table["models"] == ["baseline_mean", "odds1"]
    assert list(table["cells"]["baseline_mean"]) == ["none"]
    assert set(table["cells"]["odds1"]) == {"lasso", "mcp"}
    assert set(table["cells"]["odds1"]["mcp"]) == {"mean_r2", "ci_lower", "ci_upper"}


###########################################  synthetic data  ############################################
def test_synthetic_is_seeded():
    scenario = SyntheticScenario(n_subjects=10, m_per_subject=200)
    a, truth_a = generate_synthetic(scenario, seed=11)
    b, truth_b = generate_synthetic(scenario, seed=11)
    c, _ = generate_synthetic(scenario, seed=12)
    assert [s.subject_id for s in a] == [f"S{i:04d}" for i in range(1, 11)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.values, y.values)
        assert x.outcome == y.outcome
    assert truth_a == truth_b
    assert not np.array_equal(a[0].values, c[0].values)


def test_synthetic_values_and_truth():
    scenario = SyntheticScenario(n_subjects=25, m_per_subject=300, noise_sd=0.0)
    subjects, truth = generate_synthetic(scenario, seed=5)
    for s in subjects:
        assert s.values.min() >= 0.0 and s.values.max() <= 9.6
        assert s.outcome == pytest.approx(2.0 + 10.0 * truth["pi"][s.subject_id])
    assert truth["outcome_rule"].startswith("y_i = 2.0 + 10.0")
    assert truth["scenario"]["n_subjects"] == 25


def test_synthetic_functionals():
    scenario = SyntheticScenario(n_subjects=5, m_per_subject=500, outcome="tail_mass_above", noise_sd=0.0)
    subjects, truth = generate_synthetic(scenario, seed=1)
    for s in subjects:
        assert truth["functional"][s.subject_id] == pytest.approx(np.mean(s.values > 5.0))


def test_scenario_validation():
    with pytest.raises(ValueError):
        SyntheticScenario(pi_low=0.5, pi_high=0.2)
    with pytest.raises(ValueError):
        SyntheticScenario(tail_low=10.0)
    with pytest.raises(ValueError):
        SyntheticScenario(unknown=1)


@pytest.mark.slow
def test_constant_tail_share_carries_no_signal():
    scenario = SyntheticScenario(n_subjects=100, m_per_subject=500, pi_low=0.15, pi_high=0.15)
    subjects, _ = generate_synthetic(scenario, seed=3)
    report = cross_validate(subjects, CVConfig(model="odds2", n_replications=5))
    assert report.mean_r2 < 0.1


@pytest.mark.slow
def test_zero_noise_tail_signal_is_fit_in_sample():
    subjects, _ = generate_synthetic(SyntheticScenario(noise_sd=0.0), seed=2024)
    design = model_design(subjects, "odds4")
    best = fit_path(design, penalty=PenaltySpec("lasso"), n_lambda=30)[-1]
    resid = design.y - best.predict(design.X)
    r2 = 1.0 - np.sum(resid**2) / np.sum((design.y - design.y.mean()) ** 2)
    assert r2 >= 0.95


@pytest.mark.slow
def test_richer_odds_features_rank_higher_on_tail_signal():
    subjects, _ = generate_synthetic(SyntheticScenario(), seed=2024)
    means = {
        model: cross_validate(subjects, CVConfig(model=model, n_replications=20, workers=4)).mean_r2
        for model in ("baseline_mean", "odds2", "odds4")
    }
    assert means["odds4"] >= means["odds2"] >= means["baseline_mean"]
    assert means["odds4"] - means["baseline_mean"] >= 0.05


@pytest.mark.slow
def test_full_scale_timings():
    subjects, _ = generate_synthetic(SyntheticScenario(n_subjects=250), seed=2024)
    start = time.perf_counter()
    design = model_design(subjects, "odds4")
    assert time.perf_counter() - start < 60.0
    assert design.X.shape == (250, 12 ** 4)

    # one outer training fold of a 248-subject cohort
    train = DesignMatrix(X=design.X[:248], y=design.y[:248], subject_ids=design.subject_ids[:248])
    start = time.perf_counter()
    path = fit_path(train, penalty=PenaltySpec("lasso"), n_lambda=100)
    assert time.perf_counter() - start < 120.0
    assert len(path) == 100
