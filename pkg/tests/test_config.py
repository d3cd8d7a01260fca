import json

import pytest

from tribody.config import ConfigError, RunConfig, env_overrides, load_config


def test_defaults_satisfy_admissibility():
    cfg = RunConfig()
    assert cfg.masses == (1.0, 1.0, 1.0) and cfg.h == -1.0 and cfg.omega == 0.5 and cfg.K == 3.0
    assert cfg.mass.alpha == 3.0
    assert cfg.integrator.build().rtol == 1e-10


@pytest.mark.parametrize("data", [
    {"omega": 0.0},
    {"mode": "verify", "h": 0.5},
    {"mode": "scan", "h": 0.0},
    {"masses": [1, -1, 1]},
    {"K": 0},
    {"integrator": {"rtol": 0}},
    {"integrator": {"min_step": 1.0, "max_step": 0.1}},
    {"unknown": 1},
    {"simulate": {"initial": "state"}},
    {"scan": {"r0": [0.1, -0.2]}},
])
def test_validation_rejects(data):
    with pytest.raises(ConfigError):
        load_config(overrides=data, environ={})


def test_zero_angular_momentum_message():
    with pytest.raises(ConfigError, match="nonzero"):
        load_config(overrides={"omega": 0.0}, environ={})


def test_env_overrides_nest_and_parse():
    env = {"TRIBODY_K": "10", "TRIBODY_INTEGRATOR__RTOL": "1e-12", "TRIBODY_SECTION__SHAPE": "[1, 0, 1, 0]",
           "TRIBODY_OUT": "results", "OTHER": "x"}
    assert env_overrides(env) == {"K": 10, "integrator": {"rtol": 1e-12}, "section": {"shape": [1, 0, 1, 0]},
                                  "out": "results"}
    cfg = load_config(environ=env)
    assert cfg.K == 10 and cfg.integrator.rtol == 1e-12 and cfg.out == "results"


def test_env_unknown_key():
    with pytest.raises(ConfigError):
        env_overrides({"TRIBODY_NOPE": "1"})
    with pytest.raises(ConfigError):
        env_overrides({"TRIBODY_K__X": "1"})


def test_precedence_file_env_flags(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"K": 4, "seed": 1, "integrator": {"atol": 1e-13}}))
    cfg = load_config(p, overrides={"seed": 9}, environ={"TRIBODY_K": "5"})
    assert (cfg.K, cfg.seed, cfg.integrator.atol) == (5, 9, 1e-13)


def test_bad_json_reports_line(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "K": 3,\n  "seed": ,\n}')
    with pytest.raises(ConfigError, match=":3:"):
        load_config(p, environ={})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.json", environ={})
