import json

import numpy as np
import pytest

from ccplan import cli, config, evaluation, planner
from ccplan.errors import ConfigError


def _open_cfg(**over):
    data = json.loads(config.load("open_loop_s51").dumps())
    data["risk"]["redistribute"] = False
    data["system"]["horizon"] = 5
    data["obstacles"][0]["n_samples"] = 200
    for k, v in over.items():
        data[k] = v
    return data


def _closed_cfg():
    data = json.loads(config.load("closed_loop_s52").dumps())
    data["system"]["horizon"] = 4
    ob = data["obstacles"][0]
    ob["init_mean"] = [0.0, -12.0, 19.44, 0.0]
    ob["lane_center"] = -12.0
    ob["n_samples"] = 100
    return data


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


@pytest.mark.parametrize("name", sorted(config.BUNDLED))
def test_bundled_round_trip(name):
    cfg = config.load(name)
    back = config.loads(cfg.dumps())
    assert back.data == cfg.data and back.digest() == cfg.digest()


def test_defaults_filled():
    cfg = config.load("closed_loop_s52")
    assert cfg["risk"]["redistribute"] is False
    assert cfg["eval"]["n_mc"] == config.DEFAULTS["eval"]["n_mc"]


def test_with_eval_changes_digest():
    cfg = config.load("open_loop_s51")
    assert cfg.with_eval(seed=1).digest() != cfg.digest()
    assert cfg.with_eval(seed=None).digest() == cfg.digest()


def test_unknown_key_rejected():
    data = _open_cfg()
    data["risk"]["epsilonn"] = 0.1
    with pytest.raises(ConfigError, match="risk"):
        config.validate(data)


def test_json_error_reports_position():
    with pytest.raises(ConfigError, match="line 2, column"):
        config.loads('{"kind": "open_loop",\n  "system": }')


@pytest.mark.parametrize("mutate", [
    lambda d: d["risk"].update(epsilon=1.5),
    lambda d: d["system"].update(input_box=[[-1.0], [1.0]]),
    lambda d: d["obstacles"][0]["faces"][0].update(samples=[[1.0, 0.0, 0.0]]),
    lambda d: d["system"].update(a=[[1.0]]),
    lambda d: d.update(kind="closed_loop"),
    lambda d: d["eval"].update(n_mc=10),
])
def test_invalid_configs_rejected(mutate):
    data = _open_cfg()
    mutate(data)
    with pytest.raises(ConfigError):
        config.validate(data)


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        config.load("/nonexistent/cfg.json")


def test_closed_loop_needs_state_box():
    data = _closed_cfg()
    del data["system"]["state_box"]
    with pytest.raises(ConfigError):
        config.ccrh_scenario(config.validate(data))


def test_cli_plan_matches_library(tmp_path):
    path = _write(tmp_path, _open_cfg())
    out = tmp_path / "plan.json"
    assert cli.main(["plan", path, "--method", "ema", "--seed", "4", "--out", str(out)]) == cli.EXIT_OK
    rec = json.loads(out.read_text())
    cfg = config.load(path).with_eval(seed=4)
    assert rec["config_digest"] == cfg.digest() and rec["seed"] == 4
    rng = evaluation._task_rngs(4, 0, 1 + len(planner.METHODS))[0]
    tpl = planner.assemble(config.open_loop_instance(cfg, rng).problems["ema"], "ema")
    best, _ = planner.enumerate_assignments(tpl)
    assert rec["solution"]["objective"] == pytest.approx(best, abs=1e-6)


def test_cli_plan_is_byte_reproducible(tmp_path):
    path = _write(tmp_path, _open_cfg())
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert cli.main(["plan", path, "--method", "mra", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_cli_malformed_config_exit_1(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"kind": ')
    out = tmp_path / "plan.json"
    assert cli.main(["plan", str(path), "--out", str(out)]) == cli.EXIT_ERROR
    assert not out.exists()
    assert "line 1" in capsys.readouterr().err


def test_cli_wrong_kind_exit_1(tmp_path):
    assert cli.main(["ccrh", "open_loop_s51", "--out", str(tmp_path / "r.jsonl")]) == cli.EXIT_ERROR


def test_cli_infeasible_exit_2(tmp_path):
    faces = [{"mean": [1.0, 0.0, -20.0], "cov_scale": 1e-3}, {"mean": [-1.0, 0.0, -20.0], "cov_scale": 1e-3}]
    data = _open_cfg(obstacles=[{"mode": "exact", "faces": faces, "n_samples": 100}])
    out = tmp_path / "plan.json"
    assert cli.main(["plan", _write(tmp_path, data), "--method", "ema", "--out", str(out)]) == cli.EXIT_INFEASIBLE
    assert not out.exists()


def test_cli_sweep_argument_errors(tmp_path):
    path = _write(tmp_path, _open_cfg())
    assert cli.main(["eval", path, "--sweep", "n=1,2", "--out", str(tmp_path)]) == cli.EXIT_ERROR
    assert cli.main(["eval", path, "--sweep", "ns=1", "--out", str(tmp_path)]) == cli.EXIT_ERROR


def test_cli_ccrh_seed_reproducible(tmp_path):
    path = _write(tmp_path, _closed_cfg())
    a, b, c = (tmp_path / f"{k}.jsonl" for k in "abc")
    assert cli.main(["ccrh", path, "--seed", "7", "--out", str(a)]) == 0
    assert cli.main(["ccrh", path, "--seed", "7", "--out", str(b)]) == 0
    assert cli.main(["ccrh", path, "--seed", "8", "--out", str(c)]) == 0
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()
    head = json.loads(a.read_text().splitlines()[0])
    assert head["kind"] == "header" and head["seed"] == 7
    for line in a.read_text().splitlines():
        json.loads(line)


def test_cli_eval_empty_obstacles(tmp_path):
    data = _open_cfg(obstacles=[])
    data["eval"] = {"n_instances": 2, "n_mc": 100, "seed": 1}
    out = tmp_path / "out"
    assert cli.main(["eval", _write(tmp_path, data), "--out", str(out)]) == 0
    summary = json.loads((out / "open_loop_summary.json").read_text())
    for rep in summary["reports"]:
        assert rep["violation"]["mean"] == 0.0 and rep["n_infeasible"] == 0
    # the three methods agree when nothing is uncertain
    costs = {rep["method"]: rep["cost"]["mean"] for rep in summary["reports"]}
    assert np.allclose(list(costs.values()), costs["ema"], atol=1e-6)
