import json

import numpy as np
import pytest

from potmfg.cli import EXIT_INVALID, EXIT_OK, EXIT_SOLVER, SCHEMA, main, read_config


def write_config(path, sections):
    lines = []
    for sec, vals in sections.items():
        lines.append(f"[{sec}]")
        lines += [f"{k} = {v}" for k, v in vals.items()]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


SMALL = {
    "model": {"name": "d2_benchmark", "T": 1.0, "p0": "0.75, 0.25"},
    "grid": {"h": 0.05, "dm": 0.05, "max_slices": 11},
    "solver": {"n_steps": 60, "multistart": 2},
    "mc": {"n_paths": 40, "dt_sde": 0.01, "seed": 3},
    "schedule": {"eps_list": "0.3, 0.2, 0.1", "eps": 0.3},
}


def run(tmp_path, command, sections, *extra, name="out"):
    cfg = write_config(tmp_path / f"{name}.ini", sections)
    out = tmp_path / name
    return main([command, "--config", cfg, "--out", str(out), *extra]), out


def csv_bytes(out):
    return {f.name: f.read_bytes() for f in sorted(out.glob("*.csv"))}


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def test_defaults_match_the_schema():
    settings = read_config(None)
    assert set(settings) == set(SCHEMA)
    assert settings["schedule"]["eps_list"] == (0.3, 0.2, 0.1)


@pytest.mark.parametrize(
    "sections",
    [
        {"model": {"nmae": "d2_benchmark"}},
        {"grids": {"h": 0.05}},
        {"grid": {"h": 0.03}},
        {"model": {"name": "d2_benchmark", "d": 3}},
        {"model": {"p0": "0.5, 0.6"}},
        {"mc": {"n_paths": 1}},
        {"schedule": {"eps_list": "0.1, 0.2"}},
        {"output": {"formats": "png"}},
        {"grid": {"h": 0.05, "dt": 10.0}},
    ],
)
def test_invalid_config_writes_nothing(tmp_path, sections, capsys):
    rc, out = run(tmp_path, "hjb", sections)
    assert rc == EXIT_INVALID
    assert not out.exists()
    assert "invalid configuration" in capsys.readouterr().err


def test_missing_config_file_is_invalid(tmp_path):
    assert main(["hjb", "--config", str(tmp_path / "absent.ini"), "--out", str(tmp_path / "o")]) == EXIT_INVALID


def test_unknown_command_is_invalid():
    assert main(["plot"]) == EXIT_INVALID


def test_conslaw_needs_two_states(tmp_path):
    rc, out = run(tmp_path, "conslaw", {"model": {"name": "zero", "d": 3, "p0": "0.3, 0.3, 0.4"}, "grid": {"h": 0.1}})
    assert rc == EXIT_INVALID and not out.exists()


def test_certify_needs_a_field(tmp_path):
    rc, out = run(tmp_path, "certify", SMALL)
    assert rc == EXIT_INVALID and not out.exists()


def test_solver_failure_exits_with_three(tmp_path):
    fld = tmp_path / "coarse.csv"
    fld.write_text("t,m,Z\n0.0,-0.5,0.0\n0.0,0.5,0.0\n1.0,-0.5,0.0\n1.0,0.5,0.0\n")
    rc, out = run(tmp_path, "certify", SMALL, "--field", str(fld))
    assert rc == EXIT_SOLVER
    record = json.loads((out / "run.json").read_text())
    assert record["exit_code"] == EXIT_SOLVER and record["error"]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def test_hjb_of_zero_model_is_all_zeros(tmp_path):
    rc, out = run(tmp_path, "hjb", {"model": {"name": "zero", "d": 3, "T": 1.0, "p0": "0.2, 0.3, 0.5"},
                                    "grid": {"h": 0.1}})
    assert rc == EXIT_OK
    data = np.loadtxt(out / "value.csv", delimiter=",", skiprows=1)
    assert np.all(data[:, -1] == 0.0)
    record = json.loads((out / "run.json").read_text())
    assert record["command"] == "hjb" and record["exit_code"] == 0
    assert record["config"]["grid"]["h"] == 0.1
    assert {"potmfg", "numpy", "python", "backend"} <= set(record["versions"])
    assert record["wall_time_s"] >= 0


@pytest.mark.parametrize("command, files", [
    ("hjb", {"value.csv", "value.gp"}),
    ("mfcp", {"mfcp.csv", "mfcp_start.csv", "minimizer_1.csv"}),
    ("mfg", {"equilibria.csv", "equilibrium_1.csv"}),
    ("conslaw", {"entropy_field.csv", "conslaw.csv", "jumps.csv", "entropy_field.gp"}),
    ("viscous", {"value.csv", "gradient.csv", "population_cost.csv", "correction.csv", "per_state_value.csv",
                 "ensemble.csv", "summary.csv"}),
])
def test_commands_write_their_outputs(tmp_path, command, files):
    rc, out = run(tmp_path, command, SMALL)
    assert rc == EXIT_OK
    present = {f.name for f in out.iterdir()}
    assert files | {"run.json"} <= present
    assert set(json.loads((out / "run.json").read_text())["files"]) <= present


def test_sweep_report_has_a_row_per_noise_level(tmp_path):
    rc, out = run(tmp_path, "sweep", SMALL)
    assert rc == EXIT_OK
    lines = (out / "convergence.csv").read_text().splitlines()
    assert len(lines) == 4
    assert [float(line.split(",")[0]) for line in lines[1:]] == [0.3, 0.2, 0.1]
    assert "plot 'convergence.csv'" in (out / "convergence.gp").read_text()


def test_certify_two_state_fields(tmp_path):
    fields = []
    for dm in (0.05, 0.025):
        cfg = dict(SMALL, grid=dict(SMALL["grid"], dm=dm))
        rc, out = run(tmp_path, "conslaw", cfg, name=f"cl{dm}")
        assert rc == EXIT_OK
        fields += ["--field", str(out / "entropy_field.csv")]
    rc, out = run(tmp_path, "certify", SMALL, *fields, name="cert")
    assert rc == EXIT_OK
    rows = (out / "certificate.csv").read_text().splitlines()
    assert rows[0] == "mesh,clause,value,threshold,status"
    assert len(rows) > 1


def test_certify_rejects_coarse_three_state_field(tmp_path):
    cfg = {"model": {"name": "zero", "d": 3, "p0": "0.3, 0.3, 0.4"}, "grid": {"h": 0.05}}
    rc, out = run(tmp_path, "hjb", cfg, name="value")
    assert rc == EXIT_OK
    rc, _ = run(tmp_path, "certify", cfg, "--field", str(out / "value.csv"), name="cert")
    assert rc == EXIT_INVALID


# ---------------------------------------------------------------------------
# Reproducibility
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("command", ["hjb", "viscous"])
def test_rerun_is_bitwise_identical_across_worker_counts(tmp_path, command):
    outputs = []
    for k, threads in enumerate((1, 8, 1)):
        rc, out = run(tmp_path, command, SMALL, "--threads", str(threads), name=f"run{k}")
        assert rc == EXIT_OK
        outputs.append(csv_bytes(out))
    assert outputs[0] and outputs[0] == outputs[1] == outputs[2]


def test_seed_flag_overrides_the_config(tmp_path):
    _, a = run(tmp_path, "viscous", SMALL, "--seed", "11", name="a")
    _, b = run(tmp_path, "viscous", SMALL, "--seed", "12", name="b")
    assert json.loads((a / "run.json").read_text())["config"]["mc"]["seed"] == 11
    assert (a / "ensemble.csv").read_bytes() != (b / "ensemble.csv").read_bytes()
    assert (a / "value.csv").read_bytes() == (b / "value.csv").read_bytes()
