import copy
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from pacontract.cli import EXIT_CONFIG, EXIT_OK, EXIT_VERDICT, main
from pacontract.config import DEFAULTS, ConfigError, parse_config
from pacontract.model_core import model_to_dict

SMALL = {
    "model": {"builtin": "holmstrom_milgrom"},
    "grid": {"nodes": 41, "steps": 24},
    "experiment": {"n_paths": 400, "n_steps": 10, "seed": 1},
}


def write_config(tmp_path, data, name="run.yaml"):
    data = copy.deepcopy(data)
    data.setdefault("output", {})["directory"] = str(tmp_path / "out")
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


def run(tmp_path, command, data, *extra):
    cfg = write_config(tmp_path, data)
    return main([command, "--config", str(cfg), *extra])


def with_experiment(**kw):
    data = copy.deepcopy(SMALL)
    data["experiment"].update(kw)
    return data


# -- config ---------------------------------------------------------------


def test_defaults_fill_in():
    cfg = parse_config({"model": {"builtin": "holmstrom_milgrom"}})
    assert cfg.section("grid")["nodes"] == DEFAULTS["grid"]["nodes"]
    assert cfg.section("solver")["boundary"] == "linear"


def test_hash_ignores_output_and_workers():
    a = parse_config({"model": {"builtin": "holmstrom_milgrom"}})
    b = a.with_overrides(workers=3, out="/elsewhere")
    c = a.with_overrides(seed=5)
    assert a.hash == b.hash and a.hash != c.hash


@pytest.mark.parametrize(
    "raw, match",
    [
        ({"model": {"builtin": "holmstrom_milgrom"}, "grid": {"typo": 1}}, "typo"),
        ({"model": {"builtin": "holmstrom_milgrom"}, "extra": 1}, "extra"),
        ({"model": {"builtin": "holmstrom_milgrom"}, "solver": {"scheme": "rk4"}}, "scheme"),
        ({"model": {"builtin": "holmstrom_milgrom"}, "experiment": {"deviations": []}}, "empty"),
        ({"model": {"builtin": "holmstrom_milgrom"}, "experiment": {"n_paths": 1}}, "n_paths"),
    ],
)
def test_invalid_configs(raw, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(raw)


def test_model_choice_is_exclusive():
    with pytest.raises(ConfigError, match="exactly one"):
        parse_config({}).model()
    with pytest.raises(ConfigError, match="unknown model"):
        parse_config({"model": {"builtin": "nope"}}).model()


# -- exit codes -----------------------------------------------------------


def test_solve(tmp_path, capsys):
    assert run(tmp_path, "solve", SMALL) == EXIT_OK
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert len(summary["config_hash"]) == 16
    assert abs(summary["principal_value"] - 0.25) <= 1e-2
    assert (tmp_path / "out" / "surface.csv").exists()
    assert (tmp_path / "out" / "policy.csv").exists()
    assert "V_P" in capsys.readouterr().out


def test_verify_pass_and_fail(tmp_path):
    assert run(tmp_path, "verify", SMALL) == EXIT_OK
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["verdict"] == "pass" and report["config_hash"]
    assert (tmp_path / "out" / "deviations.csv").exists()
    assert (tmp_path / "out" / "xi.csv").exists()
    assert run(tmp_path, "verify", with_experiment(z_scale=0.5)) == EXIT_VERDICT
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["verdict"] == "fail"


def test_empty_deviation_list(tmp_path, capsys):
    assert run(tmp_path, "verify", with_experiment(deviations=[])) == EXIT_CONFIG
    assert "empty" in capsys.readouterr().err


def test_deviation_outside_action_space(tmp_path, capsys):
    devs = [{"agent": 0, "action": [0.5]}, {"agent": 0, "action": [7.0]}]
    assert run(tmp_path, "verify", with_experiment(deviations=devs)) == EXIT_CONFIG
    assert "deviation 1" in capsys.readouterr().err


def test_unknown_key(tmp_path, capsys):
    data = copy.deepcopy(SMALL)
    data["grid"]["typo"] = 1
    assert run(tmp_path, "solve", data) == EXIT_CONFIG
    assert "typo" in capsys.readouterr().err


def test_state_dimension_four_rejected(tmp_path, capsys, hm):
    spec = model_to_dict(hm)
    spec["dimensions"] = {"N": 1, "d": 4, "n": 4}
    spec["drift"] = ["a0/sigma", "0", "0", "0"]
    spec["sigma"] = [["sigma" if i == j else "0" for j in range(4)] for i in range(4)]
    spec["state_box"] = [[-4] * 4, [4] * 4]
    spec["x0"] = [0.0] * 4
    spec["principal"]["liquidation"] = "x0+x1+x2+x3"
    assert run(tmp_path, "solve", {"model": {"spec": spec}}) == EXIT_CONFIG
    assert "dimension" in capsys.readouterr().err


def test_missing_liquidation(tmp_path, capsys, hm):
    spec = model_to_dict(hm)
    del spec["principal"]["liquidation"]
    assert run(tmp_path, "solve", {"model": {"spec": spec}, "grid": SMALL["grid"]}) == EXIT_CONFIG
    assert "liquidation" in capsys.readouterr().err
    # supplying the terminal value separately makes it valid again
    data = {"model": {"spec": spec, "terminal": "x0"}, "grid": SMALL["grid"]}
    assert run(tmp_path, "solve", data) == EXIT_OK


def test_missing_config_file(tmp_path, capsys):
    assert main(["solve", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG
    assert "not found" in capsys.readouterr().err


# -- simulate -------------------------------------------------------------


def test_simulate_is_byte_reproducible(tmp_path):
    data = with_experiment(policy=[1.0])
    cfg = write_config(tmp_path, data)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--workers", "2"]) == EXIT_OK
    a = (tmp_path / "a" / "paths.csv").read_bytes()
    assert a == (tmp_path / "b" / "paths.csv").read_bytes()
    ea = json.loads((tmp_path / "a" / "estimates.json").read_text())
    eb = json.loads((tmp_path / "b" / "estimates.json").read_text())
    assert ea == eb and ea["config_hash"]


def test_simulate_zero_effort_keeps_output_level(tmp_path):
    assert run(tmp_path, "simulate", with_experiment(policy="zero", n_paths=2000)) == EXIT_OK
    est = json.loads((tmp_path / "out" / "estimates.json").read_text())["estimates"]
    mean, se = est["drifted"]["x0"]
    assert abs(mean - 0.0) <= 3 * se


def test_simulate_reweighting_agrees(tmp_path):
    assert run(tmp_path, "simulate", with_experiment(policy=[1.0], n_paths=4000)) == EXIT_OK
    est = json.loads((tmp_path / "out" / "estimates.json").read_text())["estimates"]
    (m1, s1), (m2, s2) = est["drifted"]["x0"], est["reweighted"]["x0"]
    assert abs(m1 - 1.0) <= 3 * s1
    assert abs(m1 - m2) <= 3 * np.hypot(s1, s2)
    dm, ds = est["density_mean"]
    assert abs(dm - 1.0) <= 3 * ds


def test_simulate_equilibrium_policy(tmp_path):
    assert run(tmp_path, "simulate", with_experiment(reweight=False)) == EXIT_OK
    est = json.loads((tmp_path / "out" / "estimates.json").read_text())["estimates"]
    mean, se = est["drifted"]["x0"]
    # a* = 0.5 under the optimal contract
    assert abs(mean - 0.5) <= 3 * se + 1e-2


def test_simulate_bad_constant_policy(tmp_path, capsys):
    assert run(tmp_path, "simulate", with_experiment(policy=[5.0])) == EXIT_CONFIG
    assert "action space" in capsys.readouterr().err


# -- bench ----------------------------------------------------------------


def test_bench(tmp_path):
    data = with_experiment(n_paths=2000, n_steps=20, probes=[[0.0], [1.0]])
    assert run(tmp_path, "bench", data) == EXIT_OK
    bench = json.loads((tmp_path / "out" / "bench.json").read_text())
    assert bench["config_hash"] and len(bench["crosscheck"]) == 2
    for row in bench["crosscheck"]:
        assert abs(row["gap"]) <= max(5e-2, 3 * row["stderr"])


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    proc = subprocess.run(
        [sys.executable, "-m", "pacontract.cli", "solve", "--config", str(cfg)],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == EXIT_OK, proc.stderr
