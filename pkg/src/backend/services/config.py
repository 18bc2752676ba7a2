from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.backend.services.errors import ConfigurationError

TOOL_VERSION = "0.3.0"
DEFAULT_CONFIG_PATH = "files/config.json"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridConfig(_Section):
    n_points: int = Field(50, ge=2, description="Number of grid cells G in each direction")
    d_max: float = Field(9.6, gt=0, description="Upper end D of the support [0, D]")


class BasisConfig(_Section):
    degree: int = Field(3, ge=0, description="B-spline degree q")
    n_interior: int = Field(8, ge=0, description="Number of equally spaced interior knots L")


class OddsConfig(_Section):
    cap: float = Field(1e3, gt=1, description="Cap h_max applied pointwise to odds values")
    denom_floor: float = Field(1e-12, gt=0, description="Floor epsilon on odds denominators")
    ordered_region: bool = Field(False, description="Integrate only over u1 < u2 (and u3 < u4)")


class DistributionConfig(_Section):
    drop_zeros: bool = Field(False, description="Discard exact zeros before binning")


class PenaltyConfig(_Section):
    kind: Literal["lasso", "elastic_net", "scad", "mcp"] = "lasso"
    alpha_mix: float = Field(0.5, gt=0, le=1)
    a_scad: float = Field(3.7, gt=2)
    gamma_mcp: float = Field(3.0, gt=1)
    n_lambda: int = Field(100, ge=1)
    lambda_ratio: float = Field(1e-3, gt=0, lt=1)
    tol: float = Field(1e-7, gt=0)
    max_iter: int = Field(10000, ge=1)


class CVSettings(_Section):
    n_folds: int = Field(5, ge=2)
    n_replications: int = Field(100, ge=1)
    inner_folds: int = Field(5, ge=2)
    seed: int = 2024
    lambda_rule: Literal["min", "1se"] = "min"


class GlmConfig(_Section):
    family: Literal["gaussian", "bernoulli"] = "gaussian"


class ParallelConfig(_Section):
    workers: int = Field(1, ge=1)


class PipelineConfig(_Section):
    """Defaults are the full-scale setup (G=50, D=9.6, cubic splines on 8 knots); flags only override."""

    grid: GridConfig = GridConfig()
    basis: BasisConfig = BasisConfig()
    odds: OddsConfig = OddsConfig()
    distribution: DistributionConfig = DistributionConfig()
    penalty: PenaltyConfig = PenaltyConfig()
    cv: CVSettings = CVSettings()
    glm: GlmConfig = GlmConfig()
    parallel: ParallelConfig = ParallelConfig()

    def with_overrides(self, overrides: Dict[str, Any]) -> "PipelineConfig":
        """Returns a new config where dotted keys (`grid.n_points`) are replaced.

        None values are ignored so argparse defaults never shadow the file.
        """
        data = self.model_dump()
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            if section not in data or key not in data[section]:
                raise ConfigurationError(f"Unknown config key '{dotted}'")
            data[section][key] = value
        return parse_config(data)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def parse_config(data: Dict[str, Any]) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"Invalid configuration: {exc}") from exc


def load_config(path: Optional[str] = None) -> PipelineConfig:
    """
    Loads config from files/config.json by default.
    Override with GOREG_CONFIG env var (or an explicit path) if needed.
    """
    path = path or os.getenv("GOREG_CONFIG", DEFAULT_CONFIG_PATH)
    p = Path(path)
    if not p.exists():
        # built-in defaults stand in for a missing default file
        if path == DEFAULT_CONFIG_PATH:
            return PipelineConfig()
        raise ConfigurationError(f"Config file not found: {p}")
    try:
        with open(p, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"Config file {p} is not valid JSON: {exc}") from exc
    return parse_config(cfg)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def provenance(config: PipelineConfig, inputs: Optional[Dict[str, str | Path]] = None) -> Dict[str, Any]:
    """Provenance block stamped into every artifact. No timestamps: reruns must hash equal."""
    return {
        "tool_version": TOOL_VERSION,
        "config_hash": config.config_hash(),
        "input_hashes": {name: file_sha256(p) for name, p in sorted((inputs or {}).items())},
        "config": config.model_dump(mode="json"),
    }
