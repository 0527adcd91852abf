import csv
import filecmp

import numpy as np
import pytest

from artifact.cli_runner import (EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, audit_case, build_case_stack,
                                 case_name, fit_slope, judge, load_audit_inputs, load_config, run,
                                 run_audits, run_build_profiles, zero_audit_inputs)
from artifact.errors import ConfigError, FormatError, HypothesisViolation, MissingArtifact
from artifact.grid_core import build_grid, load_field

SMALL = ["--eps", "1e-2,3e-3,1e-3", "--nx", "41", "--ny", "41", "--set", "audit.korn_fields=5"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One small end-to-end run shared by the structural tests."""
    out = tmp_path_factory.mktemp("run")
    code = run(["all", *SMALL, "--output", str(out)])
    return out, code


# ---------------------------------------------------------------------------
# configuration

def test_default_config_is_valid():
    cfg = load_config(env={})
    assert cfg.eps == (1e-2, 3e-3, 1e-3, 3e-4)
    assert cfg.nx == cfg.ny == 161 and cfg.stretch == 2.0 and cfg.y_max == 30.0
    assert cfg.grids() == [(161, 161), (241, 241)]


def test_config_file_overrides_and_env(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("[grid]\nnx = 33\n[physics]\neps = 1e-2, 1e-3\n")
    cfg = load_config(p, {"solver.max_iter": "7"}, env={"BLAYER_OUTPUT": "/tmp/elsewhere"})
    assert (cfg.nx, cfg.eps, cfg.max_iter) == (33, (1e-2, 1e-3), 7)
    assert str(cfg.output) == "/tmp/elsewhere"
    # explicit override beats the environment
    cfg = load_config(p, {"output.directory": "here"}, env={"BLAYER_OUTPUT": "/tmp/elsewhere"})
    assert str(cfg.output) == "here"


def test_config_round_trips_through_its_text_form(tmp_path):
    cfg = load_config(None, {"physics.eps": "1e-2,5e-3,2e-3", "grid.nx": "57"}, env={})
    p = tmp_path / "canon.cfg"
    p.write_text(cfg.to_ini())
    again = load_config(p, env={})
    assert again == cfg and again.digest() == cfg.digest()


@pytest.mark.parametrize("text", ["[physics]\neps = 1e-3, 1e-2\n", "[physics]\ngamma = 0.3\n",
                                  "[grid]\nnx = 4\n", "[grid]\nbogus = 1\n", "[extra]\na = 1\n",
                                  "[solver]\nmax_iter = many\n", "[output]\nformats = png\n",
                                  "[physics]\ndelta = -1\n", "not an ini file"])
def test_invalid_config_is_rejected(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p, env={})
    assert run(["build-profiles", "--config", str(p), "--output", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_config_file_exits_with_config_code(tmp_path):
    assert run(["build-profiles", "--config", str(tmp_path / "nope.cfg"),
                "--output", str(tmp_path / "o")]) == EXIT_CONFIG
    assert run(["build-profiles", "--set", "nonsense", "--output", str(tmp_path / "o")]) == EXIT_CONFIG


def test_slope_fit_needs_three_points():
    with pytest.raises(ValueError):
        fit_slope("q", [1e-2, 1e-3], [1.0, 0.5])
    s = fit_slope("q", [1e-2, 1e-3, 1e-4], [1e-1, 10 ** -1.5, 1e-2])
    assert s.slope == pytest.approx(0.5) and s.ci_low <= 0.5 <= s.ci_high and s.n_points == 3


# ---------------------------------------------------------------------------
# profiles

def test_shear_only_build_completes(tmp_path):
    cfg = load_config(None, {"flow.perturbation": "zero", "physics.delta": "0", "physics.eps": "1e-2",
                             "grid.nx": "41", "grid.ny": "41", "output.directory": str(tmp_path)}, env={})
    stacks = run_build_profiles(cfg)
    st = stacks[1e-2]
    assert np.abs(st.flow.v0e.values).max() < 1e-12
    rows = _rows(tmp_path / "tables" / "profiles.csv")
    assert rows[0]["certified"] == "pass" and float(rows[0]["min_us"]) > 0


def test_persisted_stack_reloads_bit_identically(tmp_path):
    cfg = load_config(None, {"physics.eps": "1e-3", "grid.nx": "41", "grid.ny": "41",
                             "output.directory": str(tmp_path)}, env={})
    st = run_build_profiles(cfg)[1e-3]
    d = tmp_path / "fields" / case_name(1e-3, (41, 41))
    for name, f in (("profile_us", st.us), ("profile_vs", st.vs), ("prandtl1_u", st.p1.u1p),
                    ("euler1_P", st.e1.P1e), ("residual_u", st.Ru1)):
        back = load_field(d / f"{name}.fld")
        assert back.grid == f.grid and np.array_equal(back.values, f.values)
    # a fresh rebuild produces the same arrays
    again = build_case_stack(cfg, 1e-3, (41, 41))
    assert np.array_equal(again.us.values, st.us.values)


def test_large_delta_surfaces_hypothesis_violation(tmp_path, capsys):
    cfg = load_config(None, {"physics.delta": "3.0", "physics.eps": "1e-2", "grid.nx": "21", "grid.ny": "21",
                             "output.directory": str(tmp_path)}, env={})
    with pytest.raises(HypothesisViolation) as info:
        run_build_profiles(cfg)
    assert info.value.stage == "euler0_builder"
    code = run(["build-profiles", "--set", "physics.delta=3.0", "--eps", "1e-2", "--nx", "21", "--ny", "21",
                "--output", str(tmp_path / "o")])
    assert code == EXIT_SOLVER
    assert "euler0_builder: HypothesisViolation" in capsys.readouterr().err
    assert "failed (HypothesisViolation)" in (tmp_path / "o" / "manifest.txt").read_text()


# ---------------------------------------------------------------------------
# audits

def test_zero_field_audit_bundle_passes():
    g = build_grid(0.25, 30.0, 21, 21, 2.0, 1e-2)
    reps = audit_case(zero_audit_inputs(g), korn_fields=5)
    verdicts = judge(reps)
    assert all(v["passed"] for v in verdicts.values())
    assert all(r.lhs == 0.0 for r in reps if r.name != "korn")


def test_missing_case_directory(tmp_path):
    with pytest.raises(MissingArtifact, match="remainder_u"):
        load_audit_inputs(tmp_path / "absent")
    code = run(["audit", *SMALL, "--output", str(tmp_path)])
    assert code == EXIT_CONFIG
    assert not (tmp_path / "tables" / "audits.csv").exists()


# ---------------------------------------------------------------------------
# end-to-end on the shared run

def test_pipeline_writes_all_outputs(pipeline):
    out, code = pipeline
    assert code in (EXIT_OK, 4)
    for rel in ("tables/profiles.csv", "tables/remainder.csv", "tables/sweep.csv", "tables/slopes.csv",
                "tables/audits.csv", "tables/audit_summary.csv", "plots/convergence.svg", "plots/audits.svg",
                "manifest.txt"):
        assert (out / rel).is_file(), rel


def test_slopes_section_has_fits_with_intervals(pipeline):
    out, _ = pipeline
    rows = {r["quantity"]: r for r in _rows(out / "tables" / "slopes.csv")}
    assert {"u_error", "v_error", "residual_total"} <= set(rows)
    for r in rows.values():
        assert int(r["n_points"]) == 3
        assert float(r["ci_low"]) <= float(r["slope"]) <= float(r["ci_high"])


def test_audit_table_covers_families_eps_and_grids(pipeline):
    out, _ = pipeline
    rows = _rows(out / "tables" / "audits.csv")
    families = {r["name"].split("_")[0] for r in rows}
    assert families == {"energy", "positivity", "equivalence", "weighted", "korn", "nonlinear", "forcing"}
    cases = {(r["eps"], r["nx"]) for r in rows}
    assert len(cases) == 3 * 2
    for fam in families:
        assert {(r["eps"], r["nx"]) for r in rows if r["name"].startswith(fam)} == cases


def test_audit_exit_code_tracks_verdicts(pipeline):
    out, code = pipeline
    summary = _rows(out / "tables" / "audit_summary.csv")
    all_pass = all(r["verdict"] == "pass" for r in summary)
    assert code == (EXIT_OK if all_pass else 4)


def test_manifest_records_hash_versions_and_stages(pipeline):
    out, _ = pipeline
    text = (out / "manifest.txt").read_text()
    cfg = load_config(None, {"physics.eps": "1e-2,3e-3,1e-3", "grid.nx": "41", "grid.ny": "41",
                             "audit.korn_fields": "5", "output.directory": str(out)}, env={})
    assert f"config_sha256 = {cfg.digest()}" in text
    for key in ("numpy = ", "scipy = ", "solve_remainder = ", "audits = "):
        assert key in text


def test_audits_are_deterministic(pipeline, tmp_path):
    out, _ = pipeline
    cfg = load_config(None, {"physics.eps": "1e-2,3e-3,1e-3", "grid.nx": "41", "grid.ny": "41",
                             "audit.korn_fields": "5", "output.directory": str(out),
                             "output.formats": "csv"}, env={})
    first = (out / "tables" / "audits.csv").read_bytes()
    run_audits(cfg)
    assert (out / "tables" / "audits.csv").read_bytes() == first


def test_truncated_field_aborts_before_any_csv(pipeline, tmp_path):
    import shutil
    out, _ = pipeline
    copy = tmp_path / "copy"
    shutil.copytree(out / "fields", copy / "fields")
    victim = copy / "fields" / case_name(3e-3, (61, 61)) / "remainder_v.fld"
    victim.write_bytes(victim.read_bytes()[:-16])
    with pytest.raises(FormatError):
        load_audit_inputs(victim.parent)
    code = run(["audit", *SMALL, "--output", str(copy)])
    assert code == EXIT_CONFIG
    assert not (copy / "tables").exists()


@pytest.mark.slow
def test_full_rerun_is_byte_identical(pipeline, tmp_path):
    out, _ = pipeline
    run(["all", *SMALL, "--output", str(tmp_path)])
    for rel in ("tables/audits.csv", "tables/remainder.csv", "tables/slopes.csv", "tables/profiles.csv"):
        assert filecmp.cmp(out / rel, tmp_path / rel, shallow=False), rel
