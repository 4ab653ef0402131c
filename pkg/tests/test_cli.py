import json
import os

import pytest

from cli.config import ScenarioConfig, parse_ladder, parse_window, resolve_config
from cli.runner import build_parser, normalize_argv, run_cli
from field_core.errors import ConfigurationError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("BOHM_OUTPUT_DIR", raising=False)


def _args(argv):
    return build_parser().parse_args(normalize_argv(argv))


def _read_outputs(directory):
    outputs = {}
    for name in sorted(os.listdir(directory)):
        with open(os.path.join(directory, name), "rb") as f:
            outputs[name] = f.read()
    return outputs


def test_negative_values_are_joined_to_their_flags():
    argv = ["nodes", "--window", "-2:2x-0.5:2", "--t", "-1.5", "--seed", "3"]
    assert normalize_argv(argv) == ["nodes", "--window=-2:2x-0.5:2", "--t=-1.5", "--seed", "3"]
    args = _args(argv)
    assert args.window == "-2:2x-0.5:2"
    assert args.t == -1.5


def test_parse_window_and_ladder():
    assert parse_window("-2:2x-0.5:2") == [[-2.0, 2.0], [-0.5, 2.0]]
    assert parse_window("-1:1x-1:1x0:3") == [[-1.0, 1.0], [-1.0, 1.0], [0.0, 3.0]]
    assert parse_ladder("0.2,0.1,0.05") == [0.2, 0.1, 0.05]
    with pytest.raises(ConfigurationError):
        parse_window("-2:2:3x0:1")
    with pytest.raises(ConfigurationError):
        parse_window("ax0:1")
    with pytest.raises(ConfigurationError):
        parse_ladder("0.1,x")


def test_flags_override_the_defaults(tmp_path):
    config = resolve_config(_args(["flux-audit", "--eps", "0.3,0.1", "--r", "8", "--mc", "0",
                                   "--output-dir", str(tmp_path)]))
    assert isinstance(config, ScenarioConfig)
    assert config.command == "flux-audit"
    assert config.region.eps == [0.3, 0.1]
    assert config.region.r == 8.0
    assert config.region.delta == [0.1]
    assert config.ensemble.mc_count == 0
    assert config.output_dir == str(tmp_path)


def test_config_file_is_layered_under_the_flags(tmp_path):
    overrides = tmp_path / "run.json"
    overrides.write_text(json.dumps({"scenario": "ground", "ensemble": {"seed": 99, "count": 10},
                                     "integrator": {"node_eps": 1e-6}}))
    config = resolve_config(_args(["ensemble", "--config", str(overrides), "--seed", "5"]))
    assert config.scenario == "ground"
    assert config.ensemble.seed == 5
    assert config.ensemble.count == 10
    assert config.integrator.node_eps == 1e-6
    assert config.integrator.max_step == 0.05


def test_output_dir_from_the_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("BOHM_OUTPUT_DIR", str(tmp_path / "env"))
    assert resolve_config(_args(["nodes"])).output_dir == str(tmp_path / "env")
    flagged = resolve_config(_args(["nodes", "--output-dir", str(tmp_path / "flag")]))
    assert flagged.output_dir == str(tmp_path / "flag")


def test_configuration_errors_exit_with_one(tmp_path):
    out = str(tmp_path)
    assert run_cli(["nodes", "--scenario", "unknown", "--output-dir", out]) == 1
    assert run_cli(["nodes", "--window", "1:0x0:1", "--output-dir", out]) == 1
    assert run_cli(["nodes", "--window", "ax0:1", "--output-dir", out]) == 1
    assert run_cli(["nodes", "--config", str(tmp_path / "missing.json"), "--output-dir", out]) == 1


def test_input_errors_exit_with_two(tmp_path):
    out = str(tmp_path)
    assert run_cli(["quantile-check", "--scenario", "eq4-2d", "--output-dir", out]) == 2
    assert run_cli(["nodes", "--window", "-2:2x-0.5:2x0:1", "--output-dir", out]) == 2


def test_nodes_command_writes_its_artifacts(tmp_path):
    out = tmp_path / "nodes"
    assert run_cli(["nodes", "--window", "-2:2x-0.5:2", "--output-dir", str(out)]) == 0
    summary = json.loads((out / "nodes_summary.json").read_text())
    assert summary["count"] == 3
    assert summary["resolved"] is True
    lines = (out / "nodes.csv").read_text().splitlines()
    assert lines[0] == "q,t,residual"
    assert len(lines) == 4
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["command"] == "nodes"
    assert resolved["window"] == [[-2.0, 2.0], [-0.5, 2.0]]


def test_quantile_check_passes_for_eq4(tmp_path):
    out = tmp_path / "quantile"
    assert run_cli(["quantile-check", "--t", "0.7853981633974483", "--output-dir", str(out)]) == 0
    summary = json.loads((out / "quantile_summary.json").read_text())
    assert summary["passed"] is True
    assert summary["compared"] + len(summary["excluded"]) == 49


@pytest.mark.parametrize("argv", [
    ["nodes", "--window", "-2:2x-0.5:2"],
    ["quantile-check", "--t", "0.5"],
])
def test_reruns_are_byte_identical(tmp_path, argv):
    out = str(tmp_path / "run")
    assert run_cli(argv + ["--output-dir", out]) == 0
    first = _read_outputs(out)
    assert run_cli(argv + ["--output-dir", out]) == 0
    assert _read_outputs(out) == first


def _small_config(tmp_path, data):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(data))
    return ["--config", str(path)]


def test_ensemble_csv_has_one_row_per_particle_and_snapshot(tmp_path):
    out = tmp_path / "ensemble"
    argv = ["ensemble", "--scenario", "eq4-2d", "--count", "20", "--seed", "4", "--output-dir", str(out)]
    argv += _small_config(tmp_path, {"ensemble": {"times": [0.1, 0.3]}})
    assert run_cli(argv) == 0
    lines = (out / "ensemble.csv").read_text().splitlines()
    assert lines[0] == "id,t,q_1,q_2,status"
    rows = [line.split(",") for line in lines[1:]]
    assert len(rows) == 20 * 3
    assert sorted({float(row[1]) for row in rows}) == [0.0, 0.1, 0.3]
    assert [int(row[0]) for row in rows[:20]] == list(range(20))
    assert all(row[4] for row in rows)
    summary = json.loads((out / "ensemble_summary.json").read_text())
    assert [snapshot["t"] for snapshot in summary["snapshots"]] == [0.1, 0.3]
    assert summary["snapshots"][0]["seed"] == 4


def test_one_dimensional_ensemble_reports_ks(tmp_path):
    out = tmp_path / "ensemble"
    argv = ["ensemble", "--count", "300", "--output-dir", str(out)]
    argv += _small_config(tmp_path, {"ensemble": {"times": [0.4]}})
    assert run_cli(argv) == 0
    assert (out / "ensemble.csv").read_text().splitlines()[0] == "id,t,q_1,status"
    snapshot = json.loads((out / "ensemble_summary.json").read_text())["snapshots"][0]
    assert snapshot["ks"] < 2.0 * snapshot["ks_critical_99"]
    assert isinstance(snapshot["ks_passed"], bool)


def test_trajectories_command_marks_the_node_crossers(tmp_path):
    out = tmp_path / "paths"
    argv = ["trajectories", "--output-dir", str(out)]
    argv += _small_config(tmp_path, {"trajectories": {"fan_count": 3, "T": 2.0, "samples": 9},
                                     "integrator": {"node_eps": 1e-4}})
    assert run_cli(argv) == 0
    summary = json.loads((out / "trajectories_summary.json").read_text())
    labels = [path["path"] for path in summary["paths"]]
    assert len(labels) == 6
    assert "node-crosser +1" in labels
    crosser = next(path for path in summary["paths"] if path["path"] == "node-crosser +1")
    assert crosser["backward_status"] == "HitNode"
    header = (out / "trajectories.csv").read_text().splitlines()[0]
    assert header == "path,q0,t,q,psi_abs,v,event"


def test_flux_audit_command_writes_the_report(tmp_path):
    out = tmp_path / "flux"
    argv = ["flux-audit", "--eps", "0.2,0.1", "--r", "6", "--T", "1.0", "--mc", "40", "--seed", "2",
            "--output-dir", str(out)]
    assert run_cli(argv) == 0
    report = json.loads((out / "flux_report.json").read_text())
    assert len(report["reports"]) == 2
    assert report["N_strictly_decreasing"] is True
    assert (out / "nodal_set.csv").exists()


def test_evolve_command_tracks_the_closed_form(tmp_path):
    out = tmp_path / "evolve"
    assert run_cli(["evolve", "--n", "256", "--t", "0.2", "--dt", "0.001", "--output-dir", str(out)]) == 0
    summary = json.loads((out / "evolve_summary.json").read_text())
    assert summary["max_abs_error"] < 1e-6
    assert summary["norm_drift"] < 1e-10
    assert summary["energy_drift"] < 1e-6
    assert summary["grid_energy_mean"] == pytest.approx(11.0 / 6.0, abs=1e-6)


@pytest.mark.parametrize("argv", [
    ["trajectories"],
    ["ensemble", "--count", "200", "--seed", "11"],
    ["flux-audit", "--eps", "0.2", "--r", "6", "--T", "1.0", "--mc", "20", "--seed", "3"],
    ["evolve", "--n", "128", "--t", "0.1", "--dt", "0.01"],
])
def test_every_command_reruns_byte_identical(tmp_path, argv):
    small = _small_config(tmp_path, {"trajectories": {"fan_count": 3, "T": 2.0, "samples": 9},
                                     "ensemble": {"times": [0.2, 0.5]}})
    out = str(tmp_path / "run")
    assert run_cli(argv + small + ["--output-dir", out]) == 0
    first = _read_outputs(out)
    assert run_cli(argv + small + ["--output-dir", out]) == 0
    assert _read_outputs(out) == first
