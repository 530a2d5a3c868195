import argparse
import csv
import json

import numpy as np
import pytest
import yaml

import coop_mpc
from coop_mpc.cli.__main__ import main
from coop_mpc.cli.cli import add_args_from_model, parse_model_from_args
from coop_mpc.cli.errors import ExitStatus, ScenarioError, ScenarioParseError, ScenarioValidationError, format_error
from coop_mpc.cli.runner import (
    build_scenario,
    load_scenario,
    parse_scenario,
    perturbed_warm_start,
    serialize_scenario,
    trace_columns,
)
from coop_mpc.cli.scenarios import BUILTIN_SCENARIOS
from coop_mpc.cli.settings import RunSettings
from coop_mpc.mpc_types import DIAGNOSTICS_COLUMNS
from coop_mpc.ocp import Candidate, LocalProblem


def tiny_scenario(**overrides):
    scenario = {
        "name": "tiny",
        "agents": [
            {"id": 1, "model": "double_integrator", "region": "a", "initial_state": [0.0, 1.0, 0.0, 0.0]},
            {"id": 2, "model": "double_integrator", "region": "b", "initial_state": [1.0, 0.0, 0.0, 0.0]},
        ],
        "edges": [[1, 2]],
        "cooperation": {"kind": "consensus"},
        "horizon": 2,
        "steps": 2,
        "monitor": {"gamma": 0.5},
    }
    scenario.update(overrides)
    return scenario


def write_scenario(path, scenario):
    path.write_text(yaml.safe_dump(scenario, sort_keys=False))
    return str(path)


@pytest.mark.parametrize("name", sorted(BUILTIN_SCENARIOS))
def test_builtin_scenarios_round_trip(name):
    config = BUILTIN_SCENARIOS[name]()
    assert parse_scenario(serialize_scenario(config)) == config
    assert load_scenario(name) == config


def test_builtin_scenario_contents():
    consensus = BUILTIN_SCENARIOS["consensus-appendix-b"]()
    assert [a.id for a in consensus.agents] == [1, 2, 3, 4]
    assert [a.region for a in consensus.agents] == ["a", "b", "b", "c"]
    assert consensus.edges == [(1, 2), (1, 4), (3, 4)]
    assert consensus.events[0].time == 19
    assert consensus.events[0].joining[0].id == 5

    build = build_scenario(consensus)
    assert build.graph.edges == ((1, 2), (1, 4), (3, 4))
    assert build.events[0].graph.nodes == (1, 2, 3, 4, 5)
    assert [a.id for a in build.all_agents] == [1, 2, 3, 4, 5]
    assert build.warm_start_hook is None

    stacked = BUILTIN_SCENARIOS["formation-v-b"]()
    assert stacked.cooperation.kind == "formation"
    assert stacked.perturbation == 1e-3
    assert [a.initial_state[:3] for a in stacked.agents] == [[0.0, 0.0, 1.0], [0.0, 0.0, 2.0], [0.0, 0.0, 3.0]]
    assert build_scenario(stacked).warm_start_hook is not None


def test_formation_appendix_c_initial_positions():
    scenario = BUILTIN_SCENARIOS["formation-appendix-c"]()
    expected = [[1e-5, 0.0, 1.0], [-1e-5, 1e-5, 2.0], [-1e-5, -1e-5, 3.0]]
    assert [a.initial_state[:3] for a in scenario.agents] == expected
    assert [a.initial_coop_output for a in scenario.agents] == expected
    assert all(a.initial_state[3:] == [0.0] * 7 for a in scenario.agents)
    assert scenario.perturbation == 0.0
    assert build_scenario(scenario).warm_start_hook is None


def test_parse_error_reports_position():
    with pytest.raises(ScenarioParseError) as excinfo:
        parse_scenario("name: tiny\nagents: [1, 2\n")
    assert excinfo.value.line >= 2
    assert excinfo.value.column >= 1
    with pytest.raises(ScenarioParseError):
        parse_scenario("- just\n- a list\n")


def test_unknown_field_is_named():
    text = yaml.safe_dump(tiny_scenario(bogus=1))
    with pytest.raises(ScenarioValidationError) as excinfo:
        parse_scenario(text)
    assert excinfo.value.field == "bogus"


def test_invalid_scenarios():
    with pytest.raises(ScenarioValidationError):
        parse_scenario(yaml.safe_dump(tiny_scenario(edges=[])))
    bad_state = tiny_scenario()
    bad_state["agents"][0]["initial_state"] = [0.0, 0.0]
    with pytest.raises(ScenarioValidationError) as excinfo:
        parse_scenario(yaml.safe_dump(bad_state))
    assert excinfo.value.field.startswith("agents.0")
    with pytest.raises(ScenarioValidationError):
        parse_scenario(yaml.safe_dump(tiny_scenario(cooperation={"kind": "formation"})))
    with pytest.raises(ScenarioError):
        load_scenario("no-such-scenario.yaml")


def test_perturbed_warm_start():
    model = coop_mpc.double_integrator_model("a")
    problem = LocalProblem(1, model, np.array([0.0, 1.0, 0.0, 0.0]), np.eye(4), np.eye(2), horizon=3)
    y = np.array([0.0, 1.0])
    solution = coop_mpc.evaluate_candidate(problem, Candidate("equilibrium", np.zeros((3, 2)), y))
    shifted = coop_mpc.shifted_candidate(solution, model)

    same = perturbed_warm_start(solution, 0.0, 7, model)
    assert np.array_equal(same.inputs, shifted.inputs)
    assert np.array_equal(same.coop_output, shifted.coop_output)

    first = perturbed_warm_start(solution, 1e-3, 7, model, time=3, agent=1)
    again = perturbed_warm_start(solution, 1e-3, 7, model, time=3, agent=1)
    other = perturbed_warm_start(solution, 1e-3, 8, model, time=3, agent=1)
    assert first.kind == "perturbed"
    assert np.array_equal(first.coop_output, again.coop_output)
    assert not np.array_equal(first.coop_output, other.coop_output)
    assert np.max(np.abs(first.coop_output - y)) == pytest.approx(1e-3)
    with pytest.raises(ValueError):
        perturbed_warm_start(solution, -1.0, 7, model)


def test_file_headers():
    assert trace_columns(4, 2, 2) == [
        "t", "agent", "x_1", "x_2", "x_3", "x_4", "u_1", "u_2", "y_1", "y_2", "yc_1", "yc_2", "status",
    ]
    assert DIAGNOSTICS_COLUMNS == (
        "t", "agent", "tracking_cost", "coupling_cost", "tracking_error", "pg_gap", "label",
        "solver_iterations", "solver_status", "value", "coop_cost", "coop_distance",
        "coop_distance_proxy", "tracking_lower_bound", "min_margin", "lyapunov_delta",
        "descent_bound", "topology_changed",
    )


def test_list_and_validate(capsys):
    assert main(["list-scenarios"]) == ExitStatus.OK
    out = capsys.readouterr().out
    assert all(name in out for name in BUILTIN_SCENARIOS)
    assert main(["validate", "consensus-appendix-b"]) == ExitStatus.OK
    assert "consensus-appendix-b: ok" in capsys.readouterr().out


def test_run_writes_outputs(tmp_path):
    scenario = write_scenario(tmp_path / "tiny.yaml", tiny_scenario())
    out = tmp_path / "nested" / "run"
    assert main(["run", scenario, "--out", str(out)]) == ExitStatus.OK

    with open(out / "trace.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == trace_columns(4, 2, 2)
    assert len(rows) == 1 + 3 * 2
    assert [r[:2] for r in rows[1:3]] == [["0", "1"], ["0", "2"]]

    with open(out / "diagnostics.csv", newline="") as f:
        diagnostics = list(csv.DictReader(f))
    assert len(diagnostics) == 3 * 2
    assert diagnostics[0]["lyapunov_delta"] == ""
    assert diagnostics[2]["lyapunov_delta"] != ""
    assert diagnostics[0]["topology_changed"] == "false"
    assert {d["label"] for d in diagnostics} <= {"a", "b"}

    header = json.loads((out / "run.json").read_text())
    assert header["status"] == "ok"
    assert header["steps"] == 2
    assert header["version"] == coop_mpc.__version__
    assert header["scenario"]["name"] == "tiny"
    assert header["constants"]["1"]["gamma"] == 0.5
    assert not (out / "failure.json").exists()


def test_run_is_deterministic_and_parallel_agnostic(tmp_path):
    scenario = write_scenario(tmp_path / "tiny.yaml", tiny_scenario(perturbation=1e-3, seed=3))
    dirs = [tmp_path / "a", tmp_path / "b", tmp_path / "c"]
    assert main(["run", scenario, "--out", str(dirs[0])]) == ExitStatus.OK
    assert main(["run", scenario, "--out", str(dirs[1])]) == ExitStatus.OK
    assert main(["run", scenario, "--out", str(dirs[2]), "--parallel"]) == ExitStatus.OK
    for name in ("trace.csv", "diagnostics.csv", "run.json"):
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()
    for name in ("trace.csv", "diagnostics.csv"):
        assert (dirs[0] / name).read_bytes() == (dirs[2] / name).read_bytes()


def test_steps_override(tmp_path):
    scenario = write_scenario(tmp_path / "tiny.yaml", tiny_scenario())
    out = tmp_path / "out"
    assert main(["run", scenario, "--out", str(out), "--steps", "1"]) == ExitStatus.OK
    assert json.loads((out / "run.json").read_text())["steps"] == 1


def test_exit_statuses(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.yaml")]) == ExitStatus.CONFIG
    broken = tmp_path / "broken.yaml"
    broken.write_text("name: [unclosed\n")
    assert main(["validate", str(broken)]) == ExitStatus.CONFIG
    assert "line" in capsys.readouterr().err

    scenario = write_scenario(tmp_path / "tiny.yaml", tiny_scenario())
    occupied = tmp_path / "occupied"
    occupied.write_text("not a directory")
    assert main(["run", scenario, "--out", str(occupied)]) == ExitStatus.IO

    stuck = tiny_scenario(horizon=1, edges=[])
    stuck["agents"] = [
        {"id": 1, "model": "double_integrator", "region": "a", "initial_state": [1.1, 0.0, 0.25, 0.0]}
    ]
    out = tmp_path / "stuck"
    assert main(["run", write_scenario(tmp_path / "stuck.yaml", stuck), "--out", str(out)]) == ExitStatus.INFEASIBLE
    failure = json.loads((out / "failure.json").read_text())
    assert failure["agent"] == 1
    assert failure["time"] == 0
    assert failure["states"]["1"] == [1.1, 0.0, 0.25, 0.0]
    assert json.loads((out / "run.json").read_text())["status"] == "infeasible"


def test_format_error():
    status, report = format_error(coop_mpc.Infeasible(3, 7))
    assert status == ExitStatus.INFEASIBLE
    assert report["agent"] == 3 and report["time"] == 7
    assert format_error(FileNotFoundError(2, "No such file", "x.yaml"))[0] == ExitStatus.IO
    assert format_error(coop_mpc.GraphError("disconnected"))[0] == ExitStatus.CONFIG
    assert format_error(KeyError("x")) is None


def test_run_settings_from_environment(monkeypatch):
    monkeypatch.setenv("COOP_MPC_STEPS", "5")
    monkeypatch.setenv("COOP_MPC_PARALLEL", "true")
    settings = RunSettings()
    assert settings.steps == 5
    assert settings.parallel is True

    class Args:
        pass

    args = Args()
    args.steps = 3
    args.out = None
    args.scenario = "tiny"
    overridden = parse_model_from_args(RunSettings, args)  # type: ignore[arg-type]
    assert overridden.steps == 3
    assert overridden.parallel is True


def test_settings_flags_are_scalar():
    parser = argparse.ArgumentParser()
    add_args_from_model(parser, RunSettings)
    args = parser.parse_args(["--steps", "7", "--out", "runs/x", "--parallel"])
    assert args.steps == 7
    assert args.out == "runs/x"
    assert args.parallel is True
    assert args.seed is None and args.verbose is None
    with pytest.raises(SystemExit):
        parser.parse_args(["--steps", "1", "2"])
