import json
import subprocess
import sys

import numpy as np
import pytest

from layerflow import bundle, cli

TINY = {
    "schema_version": 1,
    "seed": 2,
    "image_size": 16,
    "dataset": {"count": 3},
    "vae": {"steps": 4, "batch_size": 8, "width": 8},
    "flow": {"d_model": 16, "heads": 2, "blocks": 1, "base_steps": 3, "adapter_steps": 2, "sampler_steps": 2,
             "lora_rank": 2},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(TINY))
    return p


def run(*args):
    return cli.main([str(a) for a in args])


def test_synth_data_count_and_workers(tmp_path, cfg_path):
    assert run("synth-data", "--config", cfg_path, "--out", tmp_path / "a") == 0
    dirs = sorted((tmp_path / "a" / "data").iterdir())
    assert [d.name for d in dirs] == ["poster_0000", "poster_0001", "poster_0002"]
    for d in dirs:
        bundle.load_bundle(d)
    assert run("synth-data", "--config", cfg_path, "--out", tmp_path / "b", "--workers", 2) == 0
    for d in dirs:
        for f in d.iterdir():
            assert f.read_bytes() == (tmp_path / "b" / "data" / d.name / f.name).read_bytes()


def test_oracle_decompose_then_eval_is_exact(tmp_path, cfg_path):
    run("synth-data", "--config", cfg_path, "--out", tmp_path)
    assert run("decompose", "--config", cfg_path, "--in", tmp_path / "data", "--oracle", "--out", tmp_path / "dec") == 0
    errs = json.loads((tmp_path / "dec" / "recompose_error.json").read_text())
    assert set(errs) == {"poster_0000", "poster_0001", "poster_0002"}
    assert max(errs.values()) < 1e-5  # stored composite is 8-bit
    assert run("eval", "--config", cfg_path, "--in", tmp_path / "dec", "--ref", tmp_path / "data",
               "--out", tmp_path / "ev") == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert rep["aggregate"]["mse"] == 0.0 and rep["desk_fid"] < 1e-6 and rep["judge"] is None
    assert (tmp_path / "ev" / "report.csv").is_file()


def test_eval_with_fixture_judge(tmp_path):
    fx = tmp_path / "fx"
    fx.mkdir()
    for i in range(2):
        (fx / f"case_{i:03d}.json").write_text('{"prediction": 4, "reference": 5}')
    cfg = dict(TINY, dataset={"count": 2}, eval={"judge_fixture_dir": "fx"})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    run("synth-data", "--config", p, "--out", tmp_path)
    run("decompose", "--config", p, "--in", tmp_path / "data", "--oracle", "--out", tmp_path / "dec")
    assert run("eval", "--config", p, "--in", tmp_path / "dec", "--ref", tmp_path / "data", "--out", tmp_path / "ev") == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert rep["judge"] == {"prediction": 0.8, "reference": 1.0} and rep["judge_errors"] == 0


def test_train_decompose_generate_preview(tmp_path, cfg_path):
    run("synth-data", "--config", cfg_path, "--out", tmp_path)
    assert run("train-vae", "--config", cfg_path, "--in", tmp_path / "data", "--out", tmp_path / "m") == 0
    assert (tmp_path / "m" / "vae_curve.csv").read_text().count("\n") == 5
    assert run("train-flow", "--config", cfg_path, "--in", tmp_path / "data", "--checkpoint", tmp_path / "m" / "vae.pt",
               "--out", tmp_path / "m") == 0
    names = {p.name for p in (tmp_path / "m").iterdir()}
    for task in ("text_extract", "text_erase", "fg_extract", "fg_erase", "t2psd"):
        assert f"adapter_{task}.pt" in names and f"adapter_{task}_curve.csv" in names
    assert {"flow.pt", "flow_curve.csv", "vae.pt"} <= names

    # retrain a single adapter on top of the saved base
    before = (tmp_path / "m" / "flow.pt").read_bytes()
    assert run("train-flow", "--config", cfg_path, "--in", tmp_path / "data", "--checkpoint", tmp_path / "m",
               "--task", "fg_erase", "--out", tmp_path / "m") == 0
    assert (tmp_path / "m" / "flow.pt").read_bytes() == before

    img = tmp_path / "data" / "poster_0000" / "composite.png"
    assert run("decompose", "--config", cfg_path, "--in", img, "--checkpoint", tmp_path / "m", "--out", tmp_path / "d") == 0
    bundle.load_bundle(tmp_path / "d" / "composite")

    prompt = tmp_path / "prompt.json"
    prompt.write_text(json.dumps(bundle.synth_poster(0, 16).prompt.to_dict()))
    assert run("generate", "--config", cfg_path, "--in", prompt, "--checkpoint", tmp_path / "m", "--out", tmp_path / "g") == 0
    doc = bundle.load_bundle(tmp_path / "g" / "prompt")
    assert doc.layers[0].role == "background" and doc.layers[-1].role == "foreground"

    assert run("preview", "--in", tmp_path / "data", "--out", tmp_path / "pv") == 0
    assert len(list((tmp_path / "pv").glob("*.png"))) == 3


def test_exit_codes(tmp_path, cfg_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 1, "typo": 3}')
    assert run("synth-data", "--config", bad, "--out", tmp_path) == 2
    assert "typo" in capsys.readouterr().err
    assert run("synth-data", "--config", tmp_path / "missing.json", "--out", tmp_path) == 2
    assert run("decompose", "--config", cfg_path, "--in", tmp_path, "--out", tmp_path / "x") == 2
    assert run("eval", "--config", cfg_path, "--in", tmp_path / "nothing", "--ref", tmp_path, "--out", tmp_path / "x") == 1
    assert run("generate", "--config", cfg_path, "--in", cfg_path, "--checkpoint", tmp_path, "--out", tmp_path / "x") == 2
    with pytest.raises(SystemExit) as e:
        run("decompose", "--out", tmp_path)
    assert e.value.code == 2


def test_selftest_command(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "layerflow.cli", "selftest", "--out", tmp_path],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    rep = json.loads((tmp_path / "selftest.json").read_text())
    assert rep["passed"] and len(rep["checks"]) == 9
    assert "PASS compositing" in proc.stdout


def test_selftest_failure_exit(tmp_path, monkeypatch):
    from layerflow import selftest

    monkeypatch.setitem(selftest.FAST_CHECKS, "euler", lambda: selftest.CheckResult("euler", False, "forced"))
    assert run("selftest", "--out", tmp_path) == 1
    rep = json.loads((tmp_path / "selftest.json").read_text())
    assert not rep["passed"]
