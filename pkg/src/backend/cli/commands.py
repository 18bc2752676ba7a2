from __future__ import annotations

import argparse
from typing import Any, Dict, List, Optional, Sequence

from src.backend.services.config import TOOL_VERSION, load_config
from src.backend.services.errors import GoregError, UsageError
from src.backend.services.logger import logger, set_level
from src.backend.services.pipeline import PLOT_KINDS, run_pipeline

# flag dest -> dotted config key; every flag left at None keeps the config value
OVERRIDES = {
    "grid": "grid.n_points",
    "D": "grid.d_max",
    "cap": "odds.cap",
    "eps": "odds.denom_floor",
    "ordered_region": "odds.ordered_region",
    "drop_zeros": "distribution.drop_zeros",
    "penalty": "penalty.kind",
    "alpha_mix": "penalty.alpha_mix",
    "a": "penalty.a_scad",
    "gamma": "penalty.gamma_mcp",
    "n_lambda": "penalty.n_lambda",
    "lambda_ratio": "penalty.lambda_ratio",
    "tol": "penalty.tol",
    "max_iter": "penalty.max_iter",
    "folds": "cv.n_folds",
    "reps": "cv.n_replications",
    "inner_folds": "cv.inner_folds",
    "seed": "cv.seed",
    "lambda_rule": "cv.lambda_rule",
    "family": "glm.family",
    "workers": "parallel.workers",
}
PENALTY_CHOICES = ["lasso", "elastic_net", "elnet", "scad", "mcp"]
MODEL_CHOICES = ["mean", "baseline_mean", "survival", "odds1", "odds2", "odds4"]


def parse_basis(text: str) -> Dict[str, int]:
    """`q=3,L=8` -> {"basis.degree": 3, "basis.n_interior": 8}."""
    keys = {"q": "basis.degree", "L": "basis.n_interior"}
    out: Dict[str, int] = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, _, value = part.partition("=")
        if name not in keys or not value.strip().lstrip("-").isdigit():
            raise UsageError(f"--basis expects 'q=<int>,L=<int>', got '{text}'")
        out[keys[name]] = int(value)
    return out


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration (flags override the config file)")
    g.add_argument("--config", default=None, help="Config JSON (default: $GOREG_CONFIG or files/config.json)")
    g.add_argument("--workers", type=int, default=None, help="Stage parallelism (threads)")
    g.add_argument("--grid", type=int, default=None, help="Grid points G per direction")
    g.add_argument("--D", type=float, default=None, help="Support upper end D")
    g.add_argument("--basis", default=None, help="B-spline basis, e.g. q=3,L=8")
    g.add_argument("--cap", type=float, default=None, help="Odds cap h_max")
    g.add_argument("--eps", type=float, default=None, help="Denominator floor ε")
    g.add_argument("--ordered-region", dest="ordered_region", action="store_const", const=True, default=None)
    g.add_argument("--drop-zeros", dest="drop_zeros", action="store_const", const=True, default=None)
    g.add_argument("--penalty", choices=PENALTY_CHOICES, default=None)
    g.add_argument("--alpha-mix", dest="alpha_mix", type=float, default=None)
    g.add_argument("--a", type=float, default=None, help="SCAD a")
    g.add_argument("--gamma", type=float, default=None, help="MCP γ")
    g.add_argument("--n-lambda", dest="n_lambda", type=int, default=None)
    g.add_argument("--lambda-ratio", dest="lambda_ratio", type=float, default=None)
    g.add_argument("--tol", type=float, default=None)
    g.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    g.add_argument("--folds", type=int, default=None)
    g.add_argument("--reps", type=int, default=None)
    g.add_argument("--inner-folds", dest="inner_folds", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--lambda-rule", dest="lambda_rule", choices=["min", "1se"], default=None)
    g.add_argument("--family", choices=["gaussian", "bernoulli"], default=None)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="goreg",
        description="Scalar-on-distribution regression with generalized odds features.",
    )
    parser.add_argument("--version", action="version", version=f"goreg {TOOL_VERSION}")
    parser.add_argument("--log-level", default=None, help="Override GOREG_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="Minute-level CSV + outcomes -> subjects file")
    p.add_argument("--input", "--minutes", dest="input", required=True, help="Minute-level activity CSV")
    p.add_argument("--outcomes", required=True)
    p.add_argument("--format", choices=["wide", "long"], default="wide")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", parents=[common], help="Seeded synthetic cohort -> subjects file")
    p.add_argument("--scenario", default=None, help="Scenario JSON (defaults otherwise)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("distributions", parents=[common], help="Subjects file -> empirical distribution checkpoint")
    p.add_argument("--subjects", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("odds", parents=[common], help="Per-subject odds surfaces")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--subjects")
    source.add_argument("--distributions", help="Checkpoint written by the distributions command")
    p.add_argument("--index", type=int, choices=[1, 2, 4], required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("features", parents=[common], help="Design matrix for one model")
    p.add_argument("--subjects", required=True)
    p.add_argument("--distributions", default=None, help="Reuse a distribution checkpoint instead of rebinning")
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--index", type=int, choices=[1, 2, 4])
    what.add_argument("--model", choices=MODEL_CHOICES)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", parents=[common], help="Penalized fit on a design file")
    p.add_argument("--design", required=True)
    p.add_argument("--lambda", dest="lam", default="path", help="A value, or 'path' for the full λ path")
    p.add_argument("--out", required=True)

    p = sub.add_parser("cv", parents=[common], help="Repeated K-fold cross-validated R²")
    p.add_argument("--subjects", required=True)
    p.add_argument("--model", choices=MODEL_CHOICES, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("table", parents=[common], help="Every model x penalty CV cell")
    p.add_argument("--subjects", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plotdata", parents=[common], help="Long-format CSV behind each figure")
    p.add_argument("--kind", required=True, help=f"One of: {', '.join(PLOT_KINDS)}")
    p.add_argument("--subjects", required=True)
    p.add_argument("--out", required=True)
    return parser


def _stage_options(args: argparse.Namespace, seed: int) -> Dict[str, Any]:
    cmd = args.command
    if cmd == "ingest":
        return {"minutes": args.input, "outcomes": args.outcomes, "out": args.out, "format": args.format}
    if cmd == "synth":
        return {"out": args.out, "seed": seed, "scenario": args.scenario}
    if cmd == "distributions":
        return {"subjects": args.subjects, "out": args.out}
    if cmd == "odds":
        return {
            "subjects": args.subjects, "distributions": args.distributions, "index_order": args.index, "out": args.out,
        }
    if cmd == "features":
        model = f"odds{args.index}" if args.index is not None else args.model
        return {"subjects": args.subjects, "model": model, "out": args.out, "distributions": args.distributions}
    if cmd == "fit":
        return {"design_path": args.design, "out": args.out, "lam": args.lam}
    if cmd in ("cv",):
        return {"subjects": args.subjects, "model": args.model, "out": args.out}
    if cmd == "table":
        return {"subjects": args.subjects, "out": args.out}
    return {"kind": args.kind, "subjects": args.subjects, "out": args.out}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parses argv, runs one stage, returns the process exit code."""
    args = build_parser().parse_args(argv)
    if args.log_level:
        set_level(args.log_level.upper())
    try:
        overrides: Dict[str, Any] = {key: getattr(args, dest) for dest, key in OVERRIDES.items()}
        if overrides.get("penalty.kind") == "elnet":
            overrides["penalty.kind"] = "elastic_net"
        if args.basis:
            overrides.update(parse_basis(args.basis))
        config = load_config(args.config).with_overrides(overrides)
        result = run_pipeline(config, args.command, **_stage_options(args, config.cv.seed))
    except GoregError as exc:
        stage = exc.stage or args.command
        logger.bind(stage=stage).error(f"[{stage.upper()}] {type(exc).__name__}: {exc.message}")
        return exc.exit_code
    logger.info(f"[PIPELINE] {args.command}: {result.summary or 'ok'}")
    return 0
