import csv
import json

import numpy as np
import pytest

from oneshotseg import pipeline as pl
from oneshotseg.propagate import LocatedPoint
from oneshotseg.volgrid import LabelGrid, Volume3

TINY = {
    "phantom": {"shape": [16, 32, 32], "spacing": [6.0, 2.0, 2.0]},
    "subjects": {"unlabeled": 2, "test": 1},
    "scribble": {"points_per_class": 6, "bg_points": 12, "bg_strokes": 3},
    "prnet": {"patch_size": [16, 16, 16], "enc_channels": [4, 4, 8, 8], "dec_channels": [8, 4, 4, 4]},
    "prnet_train": {"epochs": 1, "steps_per_epoch": 2, "batch": 2},
    "seg": {"depth": 2, "base_channels": 4, "crop_size": [8, 16, 16], "epochs": 2, "steps_per_epoch": 2, "batch": 2},
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = pl.ExperimentConfig.from_dict(TINY)
    report = pl.run_pipeline(cfg, out)
    return cfg, out, report


# ---- config


def test_config_round_trip():
    cfg = pl.ExperimentConfig.from_dict(TINY)
    assert pl.ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.phantom.shape == (16, 32, 32)
    assert cfg.prnet.patch_size == (16, 16, 16)


def test_config_rejects_unknown_keys():
    with pytest.raises(pl.ConfigError, match="nosuch"):
        pl.ExperimentConfig.from_dict({"nosuch": 1})
    with pytest.raises(pl.ConfigError, match="prnet"):
        pl.ExperimentConfig.from_dict({"prnet": {"bogus": 3}})


def test_config_rejects_invalid_values():
    with pytest.raises(pl.ConfigError):
        pl.ExperimentConfig.from_dict({"subjects": {"unlabeled": 0}})
    with pytest.raises(pl.ConfigError):
        pl.ExperimentConfig.from_dict({"prnet": {"patch_size": [10, 16, 16]}})


def test_load_config_errors(tmp_path):
    with pytest.raises(pl.ConfigError):
        pl.load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(pl.ConfigError):
        pl.load_config(bad)


def test_seeded_pushes_global_seed():
    cfg = pl.ExperimentConfig(seed=7).seeded()
    assert cfg.phantom.seed == 7 and cfg.prnet_train.seed == 7 and cfg.seg.seed == 7


# ---- dice and verdicts


def test_dice_examples():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    assert pl.dice(a, b) == 1.0
    a[0, 0, :2] = True
    assert pl.dice(a, b) == 0.0
    b[0, 0, 1:3] = True
    assert pl.dice(a, b) == pytest.approx(0.5)
    assert pl.dice(a, a) == 1.0


def _report(pseudo, trained, plc):
    return {"dice": {"pseudo": {"mean": pseudo}, "trained": {"mean": trained}, "plc": {"mean": plc}}}


def test_compare_stages_ties_and_failures():
    assert pl.compare_stages(_report(0.5, 0.5, 0.5)) == {"trained_ge_pseudo": True, "plc_ge_trained": True}
    assert pl.compare_stages(_report(0.5, 0.496, 0.4911)) == {"trained_ge_pseudo": True, "plc_ge_trained": True}
    assert pl.compare_stages(_report(0.5, 0.49, 0.6)) == {"trained_ge_pseudo": False, "plc_ge_trained": True}
    assert pl.compare_stages(_report(0.5, 0.6, 0.59))["plc_ge_trained"] is False


def test_ablation_rows():
    r = pl.MetricsReport([1], {"pseudo": {"1": 0.2, "mean": 0.2}, "trained": {"1": 0.3, "mean": 0.3}, "plc": {"1": 0.4, "mean": 0.4}}, {}, {}, [], {}, [], {})
    assert [row["row"] for row in r.ablation_rows()] == ["pseudo-mask only", "+training", "+training+PLC"]
    assert "runtimes" not in r.to_dict()


def test_merge_argmax_over_threshold():
    p1 = np.array([0.9, 0.6, 0.2, 0.7]).reshape(1, 1, 4)
    p2 = np.array([0.8, 0.7, 0.3, 0.4]).reshape(1, 1, 4)
    m = pl._merge([p1, p2], 3, (1.0, 1.0, 1.0))
    assert m.labels.ravel().tolist() == [1, 2, 0, 1]


def test_tau_sweep_without_network():
    gt = np.zeros((4, 4, 4), np.uint8)
    gt[:2] = 1
    g = LabelGrid(gt, 2)
    pts = [
        LocatedPoint((0, 0, 0), 1, 0, (1, 1, 1), (0, 1, 1), 0.95, True),
        LocatedPoint((0, 0, 0), 1, 0, (1, 1, 1), (3, 1, 1), 0.3, False),
        LocatedPoint((3, 3, 3), 0, 0, (1, 1, 1), (3, 3, 3), 0.7, True),
    ]
    rows = pl.tau_sweep(["q"], [pts], [Volume3(np.zeros((4, 4, 4)))], [g], (0.0, 0.5, 0.9), None)
    assert [r["tau"] for r in rows] == [0.0, 0.5, 0.9]
    assert [r["precision"]["1"] for r in rows] == [0.5, 1.0, 1.0]
    assert [r["kept_per_volume"]["0"] for r in rows] == [1.0, 1.0, 0.0]
    assert all(r["pseudo_dice"] is None for r in rows)


# ---- stage failures


def test_stage_error_is_tagged(tmp_path):
    cfg = pl.ExperimentConfig.from_dict(TINY)
    with pytest.raises(pl.StageError) as info:
        pl._run_stage("geos", pl.stage_geos, cfg, tmp_path, timings={})
    assert info.value.stage == "geos"
    assert str(info.value).startswith("[geos]")


def test_failed_stage_keeps_earlier_artifacts(tmp_path):
    cfg = pl.ExperimentConfig.from_dict({**TINY, "prnet": {**TINY["prnet"], "patch_size": [64, 64, 64]}})
    with pytest.raises(pl.StageError) as info:
        pl.run_pipeline(cfg, tmp_path)
    assert info.value.stage == "train-prnet"
    assert (tmp_path / "data" / "subjects.json").exists()
    assert (tmp_path / "scribbles" / "support.scribble.json").exists()


# ---- end to end (tiny)


def test_pipeline_artifacts(tiny_run):
    cfg, out, report = tiny_run
    subjects = json.loads((out / "data" / "subjects.json").read_text())
    assert subjects == {"support": ["s000"], "unlabeled": ["s001", "s002"], "validation": [], "test": ["s003"]}
    for rel in [
        "config.json",
        "prnet/prnet.json",
        "prnet/train_log.csv",
        "propagate/audit.json",
        "propagate/s003.scribble.json",
        "pseudo/s001.labels",
        "pseudo/notes.json",
        "seg/plc/train_log.csv",
        "pred/trained/s003.labels",
        "pred/plc/s003.labels",
        "report.json",
        "report.csv",
        "timings.json",
    ]:
        assert (out / rel).exists(), rel
    with open(out / "prnet" / "train_log.csv") as fh:
        assert next(csv.reader(fh)) == ["epoch", "L_dis", "L_rec", "L_ssl"]


def test_pipeline_report_contents(tiny_run):
    _, out, report = tiny_run
    d = json.loads((out / "report.json").read_text())
    assert set(d["dice"]) == {"pseudo", "trained", "plc"}
    assert set(d["verdicts"]) == {"trained_ge_pseudo", "plc_ge_trained"}
    assert [r["tau"] for r in d["tau_sweep"]] == [0.0, 0.5, 0.9]
    assert [r["row"] for r in d["ablation"]] == ["pseudo-mask only", "+training", "+training+PLC"]
    for per in d["dice"].values():
        assert all(0.0 <= v <= 1.0 for v in per.values())
    rows = list(csv.reader(open(out / "report.csv")))
    assert rows[0] == ["section", "key", "class", "value"]
    assert {r[0] for r in rows[1:]} >= {"dice", "propagation", "tau_sweep", "verdict"}


def test_pipeline_is_deterministic(tiny_run, tmp_path):
    cfg, out, _ = tiny_run
    pl.run_pipeline(cfg, tmp_path)
    assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()


def test_evaluate_reproduces_report(tiny_run, tmp_path):
    cfg, out, report = tiny_run
    again = pl.stage_evaluate(cfg.seeded(), out)
    assert again.to_dict() == report.to_dict()


def test_sweep_with_dice(tiny_run):
    cfg, out, _ = tiny_run
    rows = pl.write_sweep(cfg.seeded(), out)
    assert len(rows) == 3
    assert all(0.0 <= r["pseudo_dice"]["mean"] <= 1.0 for r in rows)
    kept = [sum(r["kept_per_volume"].values()) for r in rows]
    assert kept == sorted(kept, reverse=True)
    assert len(list(csv.reader(open(out / "sweep.csv")))) == 4
