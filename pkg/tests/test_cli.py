import json

import pytest

from oneshotseg.cli import main

from test_pipeline import TINY


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def test_stagewise_commands(tmp_path, config_file, capsys):
    out = tmp_path / "ws"
    base = ["--config", str(config_file), "--out", str(out), "--seed", "3"]
    assert main(["phantom-gen", *base]) == 0
    assert (out / "data" / "s000.vol3").exists()
    assert main(["train-prnet", *base]) == 0
    assert main(["propagate", *base]) == 0
    assert (out / "scribbles" / "support.scribble.json").exists()
    # later stages pick the config up from the workspace
    assert main(["geos", "--out", str(out)]) == 0
    assert main(["train-seg", "--out", str(out)]) == 0
    assert main(["evaluate", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "pseudo-mask only" in printed and "+training+PLC" in printed
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["seed"] == 3


def test_pipeline_command_matches_library(tmp_path, config_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["pipeline", "--config", str(config_file), "--out", str(a), "--seed", "3"]) == 0
    assert main(["pipeline", "--config", str(config_file), "--out", str(b), "--seed", "3"]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_sweep_command(tmp_path, config_file, capsys):
    assert main(["sweep-tau", "--config", str(config_file), "--out", str(tmp_path / "s")]) == 0
    lines = [json.loads(line) for line in capsys.readouterr().out.strip().splitlines()]
    assert [row["tau"] for row in lines] == [0.0, 0.5, 0.9]
    assert (tmp_path / "s" / "sweep.csv").exists()


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"prnet": {"bogus": 1}}))
    assert main(["phantom-gen", "--config", str(bad), "--out", str(tmp_path / "w")]) == 2
    assert "error [config]" in capsys.readouterr().err


def test_negative_seed_is_config_error(tmp_path, config_file):
    assert main(["phantom-gen", "--config", str(config_file), "--out", str(tmp_path / "w"), "--seed", "-1"]) == 2


def test_stage_error_exit_code(tmp_path, config_file, capsys):
    # geos before any propagation output exists
    assert main(["geos", "--config", str(config_file), "--out", str(tmp_path / "empty")]) == 1
    assert "[geos]" in capsys.readouterr().err


def test_missing_out_is_usage_error(config_file):
    with pytest.raises(SystemExit) as info:
        main(["pipeline", "--config", str(config_file)])
    assert info.value.code == 2
