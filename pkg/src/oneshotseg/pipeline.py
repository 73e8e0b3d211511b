"""Experiment orchestration: phantoms -> SSL -> propagation -> GeoS -> segmenter -> Dice.

Every stage reads its inputs from and writes its outputs to a workspace
directory, so each stage can also be run on its own from the command line.
Layout::

    config.json                      resolved experiment config
    data/subjects.json               subject names per role
    data/<name>.vol3 / .labels       phantom volume and ground truth
    scribbles/support.scribble.json  simulated support annotation
    prnet/                           PRNet params, prnet.json, train_log.csv
    propagate/                       audit.json and one scribble file per query
    pseudo/<name>.labels             GeoS pseudo masks
    seg/<variant>/class<k>/          segmenter params, seg/<variant>/train_log.csv
    pred/<variant>/<name>.labels     test predictions
    report.json, report.csv          MetricsReport (deterministic)
    timings.json                     wall-clock seconds per stage
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .geos import GeosConfig, MissingClassWarning, pseudo_mask
from .prnet import PRNet, PRNetConfig, PRNetTrainConfig, train_prnet
from .propagate import (
    LocatedPoint,
    PropagateConfig,
    PropagationResult,
    precision_report,
    propagate_scribbles,
    save_propagation,
)
from .segment import SegConfig, dice, train_segmenter
from .volgrid import (
    LabelGrid,
    PhantomConfig,
    ScribbleSet,
    Volume3,
    draw_support_scribble,
    generate_phantom,
    load_labels,
    load_scribbles,
    load_volume,
    normalize_intensity,
    save_labels,
    save_scribbles,
    save_volume,
)

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "StageError",
    "ScribbleConfig",
    "SubjectCounts",
    "ExperimentConfig",
    "MetricsReport",
    "STAGES",
    "VARIANTS",
    "dice",
    "compare_stages",
    "stage_phantoms",
    "stage_scribble",
    "stage_train_prnet",
    "stage_propagate",
    "stage_geos",
    "stage_train_seg",
    "stage_evaluate",
    "tau_sweep",
    "run_pipeline",
    "run_sweep",
    "write_report",
]

STAGES = ("phantom-gen", "scribble", "train-prnet", "propagate", "geos", "train-seg", "evaluate")
VARIANTS = ("trained", "plc")
TIE_TOLERANCE = 0.005


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ScribbleConfig:
    points_per_class: int = 16
    bg_points: int = 36  # per foreground class
    bg_strokes: int = 6
    bg_band: tuple[float, float] = (2.0, 6.0)


@dataclass(frozen=True)
class SubjectCounts:
    unlabeled: int = 8
    test: int = 4
    validation: int = 0

    def __post_init__(self):
        if self.unlabeled < 1 or self.test < 1 or self.validation < 0:
            raise ConfigError("need >= 1 unlabeled and >= 1 test subject, validation >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment. ``seed`` overrides the seed of every stochastic stage."""

    phantom: PhantomConfig = PhantomConfig()
    subjects: SubjectCounts = SubjectCounts()
    scribble: ScribbleConfig = ScribbleConfig()
    prnet: PRNetConfig = PRNetConfig()
    prnet_train: PRNetTrainConfig = PRNetTrainConfig()
    propagate: PropagateConfig = PropagateConfig()
    geos: GeosConfig = GeosConfig()
    seg: SegConfig = SegConfig()
    sweep_taus: tuple[float, ...] = (0.0, 0.5, 0.9)
    seed: int = 0

    def seeded(self) -> "ExperimentConfig":
        """Copy with the global seed pushed into every sub-config."""
        return replace(
            self,
            phantom=replace(self.phantom, seed=self.seed),
            prnet_train=replace(self.prnet_train, seed=self.seed),
            seg=replace(self.seg, seed=self.seed),
        )

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "config")


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    defaults = cls()
    kwargs = {}
    for name, value in d.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            value = _build(type(current), value, f"{where}.{name}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(d)


# --------------------------------------------------------------------------
# Report


@dataclass
class MetricsReport:
    """Test-set Dice per stage and class, propagation quality, and verdicts.

    ``runtimes`` is kept out of ``to_dict`` so that report.json is
    reproducible byte for byte.
    """

    classes: list[int]
    dice: dict[str, dict[str, float]]  # stage -> class ("1", ...) and "mean"
    pseudo_dice_unlabeled: dict[str, float]
    propagation: dict[str, dict]  # class -> precision_report entry at the configured tau
    tau_sweep: list[dict]
    verdicts: dict[str, bool]
    warnings: list[str]
    config: dict
    runtimes: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("runtimes")
        d["ablation"] = self.ablation_rows()
        return d

    def ablation_rows(self) -> list[dict]:
        names = {"pseudo": "pseudo-mask only", "trained": "+training", "plc": "+training+PLC"}
        return [{"row": names[s], **self.dice[s]} for s in ("pseudo", "trained", "plc") if s in self.dice]


def compare_stages(report: MetricsReport | dict) -> dict[str, bool]:
    """Trend verdicts on mean test Dice with a tie tolerance of 0.005."""
    d = report.dice if isinstance(report, MetricsReport) else report["dice"]
    return {
        "trained_ge_pseudo": bool(d["trained"]["mean"] >= d["pseudo"]["mean"] - TIE_TOLERANCE),
        "plc_ge_trained": bool(d["plc"]["mean"] >= d["trained"]["mean"] - TIE_TOLERANCE),
    }


def write_report(out: Path, report: MetricsReport) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["section", "key", "class", "value"])
        for stage, per in report.dice.items():
            for cls, value in per.items():
                w.writerow(["dice", stage, cls, repr(value)])
        for cls, rep in report.propagation.items():
            for key, value in rep.items():
                w.writerow(["propagation", key, cls, repr(value)])
        for row in report.tau_sweep:
            tau = repr(row["tau"])
            for cls, value in row["precision"].items():
                w.writerow(["tau_sweep", f"precision@{tau}", cls, repr(value)])
            for cls, value in row["kept_per_volume"].items():
                w.writerow(["tau_sweep", f"kept_per_volume@{tau}", cls, repr(value)])
            if row.get("pseudo_dice") is not None:
                for cls, value in row["pseudo_dice"].items():
                    w.writerow(["tau_sweep", f"pseudo_dice@{tau}", cls, repr(value)])
        for key, value in report.verdicts.items():
            w.writerow(["verdict", key, "", str(value)])
    if report.runtimes:
        (out / "timings.json").write_text(json.dumps(report.runtimes, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Workspace helpers


def _name(subject_id: int) -> str:
    return f"s{subject_id:03d}"


def _subjects(out: Path) -> dict[str, list[str]]:
    path = out / "data" / "subjects.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run phantom-gen first")
    return json.loads(path.read_text())


def _volume(out: Path, name: str) -> Volume3:
    return normalize_intensity(load_volume(out / "data" / f"{name}.vol3"))


def _gt(out: Path, name: str) -> LabelGrid:
    return load_labels(out / "data" / f"{name}.labels")


def _queries(subjects: dict) -> list[str]:
    return subjects["unlabeled"] + subjects["validation"] + subjects["test"]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Stages


def stage_phantoms(cfg: ExperimentConfig, out: Path) -> dict[str, list[str]]:
    """Subject 0 is the support; then unlabeled, validation and test subjects."""
    n = cfg.subjects
    ids = iter(range(1 + n.unlabeled + n.validation + n.test))
    roles = {"support": [next(ids)]}
    roles["unlabeled"] = [next(ids) for _ in range(n.unlabeled)]
    roles["validation"] = [next(ids) for _ in range(n.validation)]
    roles["test"] = [next(ids) for _ in range(n.test)]
    data = out / "data"
    data.mkdir(parents=True, exist_ok=True)
    for sid in sorted(i for group in roles.values() for i in group):
        v, gt = generate_phantom(cfg.phantom, sid)
        save_volume(data / f"{_name(sid)}.vol3", v)
        save_labels(data / f"{_name(sid)}.labels", gt)
    subjects = {role: [_name(i) for i in group] for role, group in roles.items()}
    _write_json(data / "subjects.json", subjects)
    return subjects


def stage_scribble(cfg: ExperimentConfig, out: Path) -> ScribbleSet:
    subjects = _subjects(out)
    support = subjects["support"][0]
    gt = _gt(out, support)
    sc = cfg.scribble
    rng = np.random.default_rng([cfg.seed, 3])
    parts = [
        draw_support_scribble(gt, cls, sc.points_per_class, rng, sc.bg_points, sc.bg_strokes, tuple(sc.bg_band))
        for cls in range(1, gt.class_count)
    ]
    scribble = ScribbleSet.concat(parts, gt.class_count)
    save_scribbles(out / "scribbles" / "support.scribble.json", scribble, gt.shape)
    return scribble


def stage_train_prnet(cfg: ExperimentConfig, out: Path) -> tuple[PRNet, list[dict]]:
    """SSL training on the support and unlabeled volumes."""
    subjects = _subjects(out)
    vols = [_volume(out, n) for n in subjects["support"] + subjects["unlabeled"]]
    model, history = train_prnet(vols, cfg.prnet, cfg.prnet_train)
    d = out / "prnet"
    nn.save_params(d, model.spec, model.params)
    _write_json(d / "prnet.json", _plain(asdict(model.cfg)))
    with open(d / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L_dis", "L_rec", "L_ssl"])
        for row in history:
            w.writerow([row["epoch"], repr(row["L_dis"]), repr(row["L_rec"]), repr(row["L_ssl"])])
    return model, history


def load_prnet(out: Path) -> PRNet:
    d = Path(out) / "prnet"
    pcfg = _build(PRNetConfig, json.loads((d / "prnet.json").read_text()), "prnet.json")
    _, params = nn.load_params(d)
    return PRNet(pcfg, params, pcfg.r)


def stage_propagate(cfg: ExperimentConfig, out: Path, model: PRNet | None = None) -> PropagationResult:
    """Propagate the support scribble onto every non-support subject."""
    subjects = _subjects(out)
    model = model if model is not None else load_prnet(out)
    support_name = subjects["support"][0]
    support = _volume(out, support_name)
    scribble = load_scribbles(out / "scribbles" / "support.scribble.json", support.shape)
    names = _queries(subjects)
    queries = [_volume(out, n) for n in names]
    rng = np.random.default_rng([cfg.seed, 4])
    result = propagate_scribbles(model, support, scribble, queries, cfg.propagate, rng)
    save_propagation(out / "propagate", result, [q.shape for q in queries], names)
    return result


def load_propagation(out: Path) -> tuple[list[str], list[list[LocatedPoint]], list[str]]:
    audit = json.loads((Path(out) / "propagate" / "audit.json").read_text())
    names = list(audit["volumes"])
    points = [
        [LocatedPoint(**{**p, "source": tuple(p["source"]), "start": tuple(p["start"]), "located": tuple(p["located"])}) for p in audit["volumes"][n]]
        for n in names
    ]
    return names, points, audit["warnings"]


def _pseudo(volume: Volume3, scribble: ScribbleSet, geos: GeosConfig, name: str, notes: list[str]) -> LabelGrid:
    """GeoS mask; a volume without background points gets an empty mask."""
    present = scribble.classes()
    if 0 not in present or len(present) < 2:
        notes.append(f"{name}: kept scribble lacks background or foreground ({present}); pseudo mask left empty")
        return LabelGrid(np.zeros(volume.shape, np.uint8), scribble.class_count, volume.spacing)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MissingClassWarning)
        mask = pseudo_mask(volume, scribble, geos)
    for w in caught:
        notes.append(f"{name}: {w.message}")
    return mask


def stage_geos(cfg: ExperimentConfig, out: Path) -> dict[str, LabelGrid]:
    subjects = _subjects(out)
    notes: list[str] = []
    masks = {}
    for name in _queries(subjects):
        v = _volume(out, name)
        scribble = load_scribbles(out / "propagate" / f"{name}.scribble.json", v.shape)
        masks[name] = _pseudo(v, scribble, cfg.geos, name, notes)
        save_labels(out / "pseudo" / f"{name}.labels", masks[name])
    _write_json(out / "pseudo" / "notes.json", notes)
    return masks


def _merge(probs: Sequence[np.ndarray], class_count: int, spacing) -> LabelGrid:
    """Class with the highest probability among those above 0.5, else background."""
    stack = np.stack(probs)
    best = np.argmax(stack, axis=0)
    labels = np.where(np.take_along_axis(stack, best[None], 0)[0] > 0.5, best + 1, 0)
    return LabelGrid(labels.astype(np.uint8), class_count, spacing)


def stage_train_seg(cfg: ExperimentConfig, out: Path, variants: Sequence[str] = VARIANTS) -> dict[str, dict]:
    """One binary segmenter per foreground class and variant, trained on the
    unlabeled subjects' pseudo masks; test predictions are merged per variant."""
    subjects = _subjects(out)
    train_names = subjects["unlabeled"]
    vols = [_volume(out, n) for n in train_names]
    pseudo = [load_labels(out / "pseudo" / f"{n}.labels") for n in train_names]
    class_count = pseudo[0].class_count
    tests = {n: _volume(out, n) for n in subjects["test"]}
    logs = {}
    for variant in variants:
        seg_cfg = replace(cfg.seg, plc_enabled=(variant == "plc"))
        probs = {n: [] for n in tests}
        rows = []
        for cls in range(1, class_count):
            masks = [p.binary(cls) for p in pseudo]
            if not any(m.any() for m in masks):
                raise ValueError(f"class {cls} is absent from every pseudo mask")
            model, history, _ = train_segmenter(vols, masks, seg_cfg)
            d = out / "seg" / variant / f"class{cls}"
            nn.save_params(d, model.spec_for(seg_cfg.crop_size), model.params)
            _write_json(d / "seg.json", _plain(asdict(seg_cfg)))
            rows.extend({"class": cls, **row} for row in history)
            for n, v in tests.items():
                probs[n].append(model.predict(v))
        for n, v in tests.items():
            save_labels(out / "pred" / variant / f"{n}.labels", _merge(probs[n], class_count, v.spacing))
        with open(out / "seg" / variant / "train_log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "epoch", "loss", "delta", "flips"])
            for row in rows:
                w.writerow([row["class"], row["epoch"], repr(row["loss"]), "" if row["delta"] is None else repr(row["delta"]), row["flips"]])
        logs[variant] = rows
    return logs


def _dice_table(preds: Sequence[LabelGrid], gts: Sequence[LabelGrid]) -> dict[str, float]:
    classes = range(1, gts[0].class_count)
    table = {str(c): float(np.mean([dice(p.binary(c), g.binary(c)) for p, g in zip(preds, gts)])) for c in classes}
    table["mean"] = float(np.mean([table[str(c)] for c in classes]))
    return table


def tau_sweep(
    names: Sequence[str],
    points: Sequence[Sequence[LocatedPoint]],
    volumes: Sequence[Volume3],
    gts: Sequence[LabelGrid],
    taus: Sequence[float],
    geos: GeosConfig | None,
) -> list[dict]:
    """Precision, kept counts and (with ``geos``) pseudo-mask Dice per tau.

    Re-filters the audit trail; the network is not run again.
    """
    class_count = gts[0].class_count
    result = PropagationResult([], [list(p) for p in points], [])
    rows = []
    for tau in taus:
        rep = precision_report(result, gts, tau=tau)
        row = {
            "tau": float(tau),
            "precision": {str(c): rep[c]["precision"] for c in rep},
            "pooled_precision": {str(c): rep[c]["pooled_precision"] for c in rep},
            "kept_per_volume": {str(c): rep[c]["kept_per_volume"] for c in rep},
            "pseudo_dice": None,
        }
        if geos is not None:
            notes: list[str] = []
            kept = result.kept_sets(tau, class_count)
            masks = [_pseudo(v, s, geos, n, notes) for n, v, s in zip(names, volumes, kept)]
            row["pseudo_dice"] = _dice_table(masks, gts)
        rows.append(row)
    return rows


def stage_evaluate(cfg: ExperimentConfig, out: Path, sweep_dice: bool = False) -> MetricsReport:
    subjects = _subjects(out)
    tests = subjects["test"]
    test_gts = [_gt(out, n) for n in tests]
    dice_table = {"pseudo": _dice_table([load_labels(out / "pseudo" / f"{n}.labels") for n in tests], test_gts)}
    for variant in VARIANTS:
        if (out / "pred" / variant).exists():
            dice_table[variant] = _dice_table([load_labels(out / "pred" / variant / f"{n}.labels") for n in tests], test_gts)
    unl = subjects["unlabeled"]
    unl_gts = [_gt(out, n) for n in unl]
    pseudo_unl = _dice_table([load_labels(out / "pseudo" / f"{n}.labels") for n in unl], unl_gts)

    names, points, prop_warnings = load_propagation(out)
    by_name = dict(zip(names, points))
    unl_points = [by_name[n] for n in unl]
    prop = precision_report(PropagationResult([], unl_points, []), unl_gts, tau=cfg.propagate.tau)
    sweep_vols = [_volume(out, n) for n in unl] if sweep_dice else []
    sweep = tau_sweep(unl, unl_points, sweep_vols, unl_gts, cfg.sweep_taus, cfg.geos if sweep_dice else None)

    notes_path = out / "pseudo" / "notes.json"
    notes = json.loads(notes_path.read_text()) if notes_path.exists() else []
    report = MetricsReport(
        classes=list(range(1, test_gts[0].class_count)),
        dice=dice_table,
        pseudo_dice_unlabeled=pseudo_unl,
        propagation={str(c): v for c, v in prop.items()},
        tau_sweep=sweep,
        verdicts={},
        warnings=list(prop_warnings) + list(notes),
        config=cfg.to_dict(),
    )
    if all(k in dice_table for k in ("pseudo",) + VARIANTS):
        report.verdicts = compare_stages(report)
    for v in report.dice.values():
        for x in v.values():
            if not (0.0 <= x <= 1.0) or math.isnan(x):
                raise ValueError(f"Dice outside [0, 1]: {x}")
    return report


def _run_stage(name: str, fn, *args, timings: dict, **kwargs):
    log.info("stage %s", name)
    t0 = time.perf_counter()
    try:
        result = fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # tag with the stage, keep what is on disk
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    timings[name] = time.perf_counter() - t0
    return result


def run_pipeline(cfg: ExperimentConfig, out, sweep_dice: bool = False) -> MetricsReport:
    """Run every stage in order and write report.json / report.csv to ``out``."""
    cfg = cfg.seeded()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    t: dict[str, float] = {}
    _run_stage("phantom-gen", stage_phantoms, cfg, out, timings=t)
    _run_stage("scribble", stage_scribble, cfg, out, timings=t)
    model, _ = _run_stage("train-prnet", stage_train_prnet, cfg, out, timings=t)
    _run_stage("propagate", stage_propagate, cfg, out, model, timings=t)
    _run_stage("geos", stage_geos, cfg, out, timings=t)
    _run_stage("train-seg", stage_train_seg, cfg, out, timings=t)
    report = _run_stage("evaluate", stage_evaluate, cfg, out, sweep_dice, timings=t)
    report.runtimes = t
    write_report(out, report)
    return report


def run_sweep(cfg: ExperimentConfig, out) -> list[dict]:
    """Stages up to propagation, then the tau table with pseudo-mask Dice.

    Writes ``sweep.json`` and ``sweep.csv`` (one row per tau).
    """
    cfg = cfg.seeded()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    t: dict[str, float] = {}
    _run_stage("phantom-gen", stage_phantoms, cfg, out, timings=t)
    _run_stage("scribble", stage_scribble, cfg, out, timings=t)
    model, _ = _run_stage("train-prnet", stage_train_prnet, cfg, out, timings=t)
    _run_stage("propagate", stage_propagate, cfg, out, model, timings=t)
    return _run_stage("sweep-tau", write_sweep, cfg, out, timings=t)


def write_sweep(cfg: ExperimentConfig, out: Path) -> list[dict]:
    subjects = _subjects(out)
    names, points, _ = load_propagation(out)
    by_name = dict(zip(names, points))
    unl = subjects["unlabeled"]
    rows = tau_sweep(unl, [by_name[n] for n in unl], [_volume(out, n) for n in unl], [_gt(out, n) for n in unl], cfg.sweep_taus, cfg.geos)
    _write_json(out / "sweep.json", rows)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        classes = sorted(rows[0]["precision"], key=int)
        w.writerow(["tau"] + [f"precision_{c}" for c in classes] + [f"kept_{c}" for c in classes] + ["pseudo_dice_mean"])
        for row in rows:
            w.writerow(
                [repr(row["tau"])]
                + [repr(row["precision"][c]) for c in classes]
                + [repr(row["kept_per_volume"][c]) for c in classes]
                + [repr(row["pseudo_dice"]["mean"])]
            )
    return rows
