import os

# tests log to their own rotating file
os.environ.setdefault("GOREG_LOG_PATH", os.path.join("logs", "goreg-tests.log"))

import json

import numpy as np
import pytest

from src.backend.services.basis import BSplineBasis
from src.backend.services.config import PipelineConfig
from src.backend.services.empdist import Grid, build_empirical_distribution
from src.backend.services.ingest import ObservationSet


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-scale checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid10():
    return Grid(d_max=9.6, n_points=10)


@pytest.fixture
def basis5():
    # kappa = 5
    return BSplineBasis(degree=3, n_interior=1, d_max=9.6)


def random_observations(rng, m=400, d_max=9.6, zeros=0.2, subject_id="S0001", outcome=1.0):
    values = rng.gamma(2.0, 1.2, size=m)
    values[rng.uniform(size=m) < zeros] = 0.0
    return ObservationSet(subject_id=subject_id, values=np.minimum(values, d_max), outcome=outcome)


@pytest.fixture
def make_obs(rng):
    def _make(**kwargs):
        return random_observations(rng, **kwargs)
    return _make


@pytest.fixture
def make_dist(rng):
    def _make(grid, **kwargs):
        return build_empirical_distribution(random_observations(rng, **kwargs), grid)
    return _make


@pytest.fixture
def workspace(tmp_path):
    """tmp dir with a small config.json (G=12, κ=5) and a 30-subject scenario.json."""
    small = PipelineConfig().with_overrides({
        "grid.n_points": 12,
        "basis.n_interior": 1,
        "cv.n_replications": 2,
        "cv.inner_folds": 3,
        "penalty.n_lambda": 8,
    })
    config = tmp_path / "config.json"
    config.write_text(json.dumps(small.model_dump(mode="json")))
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps({"n_subjects": 30, "m_per_subject": 200}))
    return tmp_path
