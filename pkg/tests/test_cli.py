import json
import logging
import subprocess
import sys
from dataclasses import replace

import pytest

from twinline._validation import ValidationError
from twinline.cli import EXIT_DATA_GAP, EXIT_INPUT, EXIT_OK, load_pipeline_config, main
from twinline.pipeline import PipelineConfig
from twinline.simulator import base_scenario, default_cameras, dump_scenario


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    dump_scenario(d / "s.toml", base_scenario(duration_s=150, stops=((40, 60),), defect_probability=0.1))
    assert main(["simulate", "--scenario", str(d / "s.toml"), "--out", str(d / "out"), "--frame-truth"]) == 0
    return d


def test_simulate_prints_summary(tmp_path, capsys):
    dump_scenario(tmp_path / "s.toml", base_scenario(duration_s=60))
    assert main(["simulate", "--scenario", str(tmp_path / "s.toml"), "--out", str(tmp_path / "a"),
                 "--seed", "3"]) == EXIT_OK
    first = capsys.readouterr().out
    assert first.startswith("duration 1.0 min") and "digest " in first
    main(["simulate", "--scenario", str(tmp_path / "s.toml"), "--out", str(tmp_path / "b"), "--seed", "3"])
    assert capsys.readouterr().out == first
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["detections", "ledger.json", "sensor.csv",
                                                                 "topology.toml"]


def test_replay_and_evaluate(sim_dir, capsys):
    out = sim_dir / "out"
    rc = main(["replay", "--detections", str(out / "detections"), "--sensor", str(out / "sensor.csv"),
               "--topology", str(out / "topology.toml"), "--out", str(sim_dir / "rep")])
    assert rc == EXIT_OK
    line = capsys.readouterr().out
    assert line.startswith("A ") and "OEE " in line and "downtime 20.0 s" in line
    assert (sim_dir / "rep" / "tracks.jsonl").exists()

    rc = main(["evaluate", "--report", str(sim_dir / "rep" / "report.json"), "--ledger", str(out / "ledger.json"),
               "--out", str(sim_dir / "ev")])
    assert rc == EXIT_OK
    assert "mean count error 0.00%" in capsys.readouterr().out
    summary = json.loads((sim_dir / "ev" / "evaluation_summary.json").read_text())
    assert summary["mean_count_error_pct"] == 0.0
    assert (sim_dir / "ev" / "evaluation.csv").read_text().startswith("minute,")


def test_replay_with_ledger_and_config(sim_dir, tmp_path):
    out = sim_dir / "out"
    cfg = tmp_path / "c.toml"
    cfg.write_text("[tracker]\nmax_age_s = 0.8\n[counting]\nsmoothing_window = 3\n", encoding="utf-8")
    rc = main(["replay", "--detections", *map(str, sorted((out / "detections").glob("*.jsonl"))),
               "--ledger", str(out / "ledger.json"), "--topology", str(out / "topology.toml"),
               "--out", str(tmp_path / "rep"), "--config", str(cfg), "--no-tracks"])
    assert rc == EXIT_OK
    assert not (tmp_path / "rep" / "tracks.jsonl").exists()
    rep = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert rep["availability_source"] == "ledger"


def test_data_gap_exit_code(tmp_path, capsys):
    cams = tuple(replace(c, active_until_s=60.0) if c.id == 1 else c for c in default_cameras(fallback=False))
    dump_scenario(tmp_path / "s.toml", base_scenario(duration_s=180, cameras=cams))
    main(["simulate", "--scenario", str(tmp_path / "s.toml"), "--out", str(tmp_path / "o")])
    o = tmp_path / "o"
    rc = main(["replay", "--detections", str(o / "detections"), "--sensor", str(o / "sensor.csv"),
               "--topology", str(o / "topology.toml"), "--out", str(tmp_path / "rep")])
    assert rc == EXIT_DATA_GAP
    assert "data gap in minutes" in capsys.readouterr().err
    assert (tmp_path / "rep" / "report.json").exists()


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["replay", "--topology", "x.toml"],
    ["simulate", "--scenario", "missing.toml", "--out", "o"],
])
def test_bad_invocations_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_INPUT


def test_help_exits_0(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "replay" in capsys.readouterr().out


def test_malformed_input_reports_error(sim_dir, tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"time": 1, "camera": 1}\n', encoding="utf-8")
    out = sim_dir / "out"
    rc = main(["replay", "--detections", str(bad), "--sensor", str(out / "sensor.csv"),
               "--topology", str(out / "topology.toml"), "--out", str(tmp_path / "r")])
    assert rc == EXIT_INPUT
    assert capsys.readouterr().err.startswith("twinline: error: ")


def test_missing_file_message(tmp_path, capsys):
    assert main(["evaluate", "--report", str(tmp_path / "nope.json"), "--ledger", "x", "--out", "y"]) == EXIT_INPUT
    assert "file not found" in capsys.readouterr().err


def test_config_validation(tmp_path):
    assert load_pipeline_config(None) == PipelineConfig()
    p = tmp_path / "c.toml"
    for text in ("[nope]\n", "[counting]\nsmoothing_window = 4\n", "[counting]\nrefractory_ms = -1\n",
                 "[counting]\nwindow = 3\n", "[tracker]\nno_such = 1\n", "[tracker\n"):
        p.write_text(text, encoding="utf-8")
        with pytest.raises(ValidationError):
            load_pipeline_config(p)
    p.write_text("[availability]\nwindow_s = 2.0\n[counting]\nrefractory_ms = 1500\n", encoding="utf-8")
    cfg = load_pipeline_config(p)
    assert cfg.availability.window_s == 2.0 and cfg.refractory_ms == 1500


def test_log_level_from_environment(tmp_path):
    code = "import logging, twinline.cli as c; c._setup_logging(); print(logging.getLogger().level)"
    env_run = lambda v: subprocess.run([sys.executable, "-c", code], env={"TWINLINE_LOG": v, "PATH": ""},
                                       capture_output=True, text=True)
    assert env_run("debug").stdout.strip() == str(logging.DEBUG)
    assert env_run("error").stdout.strip() == str(logging.ERROR)
    odd = env_run("loud")
    assert odd.stdout.strip() == str(logging.WARNING)
    assert "not recognised" in odd.stderr


def test_console_script_installed():
    r = subprocess.run(["twinline", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "simulate" in r.stdout
