import json

import pytest

from layerflow.config import ConfigError, RunConfig, load_config, parse_config


def test_defaults_roundtrip():
    cfg = parse_config({"schema_version": 1})
    assert cfg == RunConfig()
    assert parse_config(cfg.to_dict()) == cfg
    assert cfg.flow.lora_rank == 8 and cfg.decompose.stop_tau == 0.01


@pytest.mark.parametrize(
    "data, match",
    [
        ({}, "schema_version"),
        ({"schema_version": 2}, "unsupported"),
        ({"schema_version": 1, "sed": 1}, "unknown key"),
        ({"schema_version": 1, "vae": {"stpes": 3}}, "unknown key.*vae"),
        ({"schema_version": 1, "vae": 3}, "object"),
        ({"schema_version": 1, "image_size": 18}, "image_size"),
        ({"schema_version": 1, "flow": {"adapter_tasks": ["fg_extract", "paint"]}}, "paint"),
        ({"schema_version": 1, "decompose": {"stop_tau": 0}}, "stop_tau"),
        ({"schema_version": 1, "eval": {"mattes": ["pink"]}}, "matte"),
        ({"schema_version": 1, "eval": {"judge_fixture_dir": "nowhere"}}, "does not exist"),
        ({"schema_version": 1, "dataset": {"out_dir": "/abs"}}, "relative"),
    ],
)
def test_rejections(data, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(data)


def test_load_and_relative_paths(tmp_path):
    (tmp_path / "fx").mkdir()
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema_version": 1, "seed": 5, "eval": {"judge_fixture_dir": "fx"}}))
    cfg = load_config(p)
    assert cfg.seed == 5 and cfg.resolve(cfg.eval.judge_fixture_dir) == tmp_path / "fx"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(p)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
