import numpy as np
import pandas as pd
import pytest

from src.backend.cli.commands import build_parser, main, parse_basis
from src.backend.services import storage
from src.backend.services.config import PipelineConfig, file_sha256, provenance
from src.backend.services.errors import ConfigurationError, UsageError
from src.backend.services.ingest import MINUTES_PER_DAY, WIDE_COLUMNS
from src.backend.services.pipeline import export_plotdata, run_pipeline


def run(workspace, *args):
    command, rest = args[0], list(args[1:])
    return main([command, "--config", str(workspace / "config.json"), *rest])


def synth(workspace, name="subjects.jsonl", seed="7"):
    out = workspace / name
    assert run(workspace, "synth", "--scenario", str(workspace / "scenario.json"), "--seed", seed, "--out", str(out)) == 0
    return out


def test_parse_basis():
    assert parse_basis("q=3,L=8") == {"basis.degree": 3, "basis.n_interior": 8}
    assert parse_basis("L=4") == {"basis.n_interior": 4}
    with pytest.raises(UsageError):
        parse_basis("q=three")
    with pytest.raises(UsageError):
        parse_basis("k=3")


def test_parser_knows_every_stage():
    parser = build_parser()
    for command in ("ingest", "synth", "distributions", "odds", "features", "fit", "cv", "table", "plotdata"):
        assert parser.parse_args(_minimal(command)).command == command


def _minimal(command):
    return {
        "ingest": ["ingest", "--input", "m.csv", "--outcomes", "o.csv", "--out", "s.jsonl"],
        "synth": ["synth", "--out", "s.jsonl"],
        "distributions": ["distributions", "--subjects", "s.jsonl", "--out", "d.jsonl"],
        "odds": ["odds", "--subjects", "s.jsonl", "--index", "2", "--out", "o.npz"],
        "features": ["features", "--subjects", "s.jsonl", "--model", "mean", "--out", "d.npz"],
        "fit": ["fit", "--design", "d.npz", "--out", "f.json"],
        "cv": ["cv", "--subjects", "s.jsonl", "--model", "odds4", "--out", "r.json"],
        "table": ["table", "--subjects", "s.jsonl", "--out", "t.json"],
        "plotdata": ["plotdata", "--kind", "odds2", "--subjects", "s.jsonl", "--out", "p.csv"],
    }[command]


def test_synth_features_fit_cv_chain(workspace):
    subjects = synth(workspace)
    back, prov = storage.read_subjects(subjects)
    assert len(back) == 30
    assert prov["ground_truth"]["seed"] == 7
    assert prov["input_hashes"]["scenario"] == file_sha256(workspace / "scenario.json")

    design = workspace / "design.npz"
    assert run(workspace, "features", "--subjects", str(subjects), "--index", "2", "--out", str(design)) == 0
    loaded, meta = storage.load_design(design)
    assert loaded.X.shape == (30, 5 ** 2)
    assert meta["features"]["model"] == "odds2"

    fit_out = workspace / "fit.json"
    assert run(workspace, "fit", "--design", str(design), "--out", str(fit_out)) == 0
    fits = storage.read_json(fit_out)
    assert len(fits["path"]) == 8
    assert fits["path"][0]["diagnostics"]["active_set_size"] == 0

    single = workspace / "single.json"
    lam = fits["path"][3]["lambda_used"]
    assert run(workspace, "fit", "--design", str(design), "--lambda", repr(lam), "--penalty", "scad", "--out", str(single)) == 0
    one = storage.read_json(single)
    assert one["penalty"]["kind"] == "scad"
    assert one["provenance"]["config"]["penalty"]["kind"] == "scad"

    report = workspace / "report.json"
    assert run(workspace, "cv", "--subjects", str(subjects), "--model", "odds2", "--out", str(report)) == 0
    cv = storage.read_json(report)
    assert len(cv["r2"]) == 2
    assert cv["model"] == "odds2"
    assert cv["provenance"]["config"]["grid"]["n_points"] == 12


def test_reruns_hash_identically(workspace):
    first = synth(workspace, "a.jsonl")
    second = synth(workspace, "b.jsonl")
    assert file_sha256(first) == file_sha256(second)
    outputs = []
    for name in ("r1.json", "r2.json"):
        out = workspace / name
        assert run(workspace, "cv", "--subjects", str(first), "--model", "mean", "--workers", "2", "--out", str(out)) == 0
        outputs.append(file_sha256(out))
    assert outputs[0] == outputs[1]
    designs = []
    for name in ("d1.npz", "d2.npz"):
        out = workspace / name
        assert run(workspace, "features", "--subjects", str(first), "--index", "4", "--out", str(out)) == 0
        designs.append(file_sha256(out))
    assert designs[0] == designs[1]


def test_odds_stage(workspace):
    subjects = synth(workspace)
    out = workspace / "odds.npz"
    assert run(workspace, "odds", "--subjects", str(subjects), "--index", "4", "--out", str(out)) == 0
    arrays, meta = storage.load_odds(out)
    assert arrays["A"].shape == arrays["C"].shape == (30, 12, 12)
    assert meta["index_order"] == 4
    assert "cap_count" in meta["policy"]


def _write_minutes(path, subjects):
    rows = []
    for sid in subjects:
        for day in (1, 2, 3):
            rows.append([sid, day] + [5] * MINUTES_PER_DAY)
    pd.DataFrame(rows, columns=WIDE_COLUMNS).to_csv(path, index=False)


def test_ingest_stage(workspace):
    minutes, outcomes, out = workspace / "m.csv", workspace / "o.csv", workspace / "s.jsonl"
    _write_minutes(minutes, ["A", "B"])
    outcomes.write_text("subject_id,edss,age,sex\nA,3.5,50,F\n")
    assert run(workspace, "ingest", "--input", str(minutes), "--outcomes", str(outcomes), "--out", str(out)) == 0
    subjects, prov = storage.read_subjects(out)
    assert [s.subject_id for s in subjects] == ["A"]
    assert subjects[0].n_obs == 3 * 720
    assert prov["rejections"] == [{"subject_id": "B", "reason": "missing outcome"}]
    assert set(prov["input_hashes"]) == {"minutes", "outcomes"}


def test_missing_outcomes_is_a_configuration_error(workspace):
    minutes, out = workspace / "m.csv", workspace / "s.jsonl"
    _write_minutes(minutes, ["A"])
    code = run(workspace, "ingest", "--input", str(minutes), "--outcomes", str(workspace / "none.csv"), "--out", str(out))
    assert code == ConfigurationError.exit_code == 3
    assert not out.exists()


def test_usage_errors(workspace):
    subjects = synth(workspace)
    out = workspace / "p.csv"
    assert run(workspace, "plotdata", "--kind", "violin", "--subjects", str(subjects), "--out", str(out)) == 2
    assert not out.exists()
    assert run(workspace, "cv", "--subjects", str(subjects), "--model", "mean", "--basis", "q=x", "--out", str(out)) == 2
    assert run(workspace, "fit", "--design", str(workspace / "missing.npz"), "--out", str(out)) == 3


def test_too_few_subjects_is_degenerate(workspace):
    subjects = synth(workspace)
    out = workspace / "r.json"
    assert run(workspace, "cv", "--subjects", str(subjects), "--model", "mean", "--folds", "20", "--out", str(out)) == 5
    assert not out.exists()


def test_errors_carry_the_stage(tmp_path):
    with pytest.raises(ConfigurationError) as info:
        run_pipeline(PipelineConfig(), "fit", design_path=str(tmp_path / "x.npz"), out=str(tmp_path / "f.json"))
    assert info.value.stage == "fit"
    with pytest.raises(UsageError):
        run_pipeline(PipelineConfig(), "report")


############################################  plot data  ############################################
def test_odds2_plotdata_has_g_squared_rows(make_obs):
    table = export_plotdata("odds2", [make_obs()])
    assert len(table) == 2500
    assert list(table.columns) == ["subject_id", "u", "u2", "value"]


def test_plotdata_identities(make_obs, tmp_path):
    subjects = [make_obs(subject_id="A"), make_obs(subject_id="B")]
    density = export_plotdata("density", subjects)
    np.testing.assert_allclose(density.groupby("subject_id")["value"].sum().to_numpy(), 1.0, atol=1e-12)
    cdf = export_plotdata("cdf", subjects)
    residual = export_plotdata("residual_life", subjects, tmp_path / "r.csv")
    boundary = residual[residual["u"] == 0.0]
    assert len(residual) == 2 * 51 * 50
    np.testing.assert_allclose(boundary["value"].to_numpy(), cdf["value"].to_numpy(), atol=1e-15)
    assert len(pd.read_csv(tmp_path / "r.csv")) == len(residual)


def test_plotdata_cli_row_count(workspace):
    subjects = synth(workspace)
    out = workspace / "odds1.csv"
    assert run(workspace, "plotdata", "--kind", "odds1", "--subjects", str(subjects), "--out", str(out)) == 0
    assert len(pd.read_csv(out)) == 30 * 12


def test_plotdata_rejects_unknown_kind(make_obs):
    with pytest.raises(UsageError):
        export_plotdata("violin", [make_obs()])


def test_provenance_has_no_clock(tmp_path):
    f = tmp_path / "in.txt"
    f.write_text("x")
    a = provenance(PipelineConfig(), {"b": f, "a": f})
    b = provenance(PipelineConfig(), {"a": f, "b": f})
    assert a == b
    assert list(a["input_hashes"]) == ["a", "b"]


def test_distribution_checkpoint(workspace):
    subjects = synth(workspace)
    out = workspace / "dists.jsonl"
    config = PipelineConfig().with_overrides({"grid.n_points": 12})
    result = run_pipeline(config, "distributions", subjects=str(subjects), out=str(out))
    assert result.summary == {"subjects": 30}
    dists, prov = storage.read_distributions(out)
    assert len(dists) == 30
    assert all(d.grid.n_points == 12 for d in dists)
    assert prov["input_hashes"]["subjects"] == file_sha256(subjects)
