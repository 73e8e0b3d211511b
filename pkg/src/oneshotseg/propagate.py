"""Scribble propagation from the support volume to unlabeled volumes.

For a support point c0 the located point in a query volume is obtained by
predicting the physical offset from a random start c1 back to c0,

    c0' = c1 + round(r * tanh(p(c1) - p(c0)) / spacing),

then verified by comparing two levels of decoder features at c0 with those
at c0' (product of cosines). Points whose similarity does not exceed tau are
dropped.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .prnet import PRNetOutput, pred_offset
from .volgrid import LabelGrid, ScribbleSet, Volume3, crop_patch, save_scribbles

log = logging.getLogger(__name__)

__all__ = [
    "Embedder",
    "PropagateConfig",
    "LocatedPoint",
    "PropagationResult",
    "embed_points",
    "locate_point",
    "dfd_sim",
    "filter_points",
    "propagate_scribbles",
    "precision_report",
    "save_propagation",
]


class Embedder(Protocol):
    """What propagation needs from a trained network."""

    r: float
    patch_size: tuple[int, int, int]

    def predict(self, patches: np.ndarray) -> list[PRNetOutput]: ...


def embed_points(model, volume: Volume3, centers) -> list[PRNetOutput]:
    """Network outputs for patches centred on each voxel of ``centers``.

    Models may provide their own ``embed(volume, centers)``; otherwise
    patches are cropped and passed through ``model.predict``.
    """
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    if len(centers) == 0:
        return []
    if hasattr(model, "embed"):
        return model.embed(volume, centers)
    out = []
    chunk = 32
    for i in range(0, len(centers), chunk):
        patches = np.stack([crop_patch(volume, c, model.patch_size) for c in centers[i : i + chunk]])
        out.extend(model.predict(patches))
    return out


@dataclass(frozen=True)
class PropagateConfig:
    tau: float = 0.5
    restarts: int = 1
    start_margin: float = 0.25  # c1 is drawn from the central (1 - 2*margin) of each axis
    offset_noise_mm: float = 0.0  # std of gaussian noise added to predicted offsets

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not 0 <= self.start_margin < 0.5:
            raise ValueError("start_margin must be in [0, 0.5)")
        if self.offset_noise_mm < 0:
            raise ValueError("offset_noise_mm must be >= 0")


@dataclass
class LocatedPoint:
    source: tuple[int, int, int]
    label: int
    query: int
    start: tuple[int, int, int]
    located: tuple[int, int, int]
    sim: float | None = None
    kept: bool = False


@dataclass
class PropagationResult:
    scribbles: list[ScribbleSet]  # per query volume, kept points only
    points: list[list[LocatedPoint]]  # per query volume, full audit trail
    warnings: list[str] = field(default_factory=list)

    def kept_sets(self, tau: float, class_count: int) -> list[ScribbleSet]:
        """Re-filter the audit trail at another threshold (no network calls)."""
        return [_kept_set(filter_points(pts, tau), class_count) for pts in self.points]


def _draw_start(shape, margin: float, rng: np.random.Generator) -> np.ndarray:
    out = []
    for n in shape:
        lo = int(np.floor(margin * n))
        hi = max(lo + 1, int(np.ceil((1 - margin) * n)))
        out.append(int(rng.integers(lo, min(hi, n))))
    return np.array(out, dtype=np.int64)


def _move(start, offset_mm, spacing, shape) -> np.ndarray:
    step = np.rint(np.asarray(offset_mm) / np.asarray(spacing)).astype(np.int64)
    return np.clip(np.asarray(start) + step, 0, np.asarray(shape) - 1)


def locate_point(
    model: Embedder,
    support: Volume3,
    c0,
    query: Volume3,
    rng: np.random.Generator,
    *,
    query_id: int = 0,
    label: int = 0,
    source_output: PRNetOutput | None = None,
    offset_noise_mm: float = 0.0,
    start_margin: float = 0.25,
) -> LocatedPoint:
    """Locate support voxel ``c0`` in ``query`` from one random start (sim unset)."""
    c0 = np.asarray(c0, dtype=np.int64)
    if not support.contains(c0):
        raise ValueError(f"support point {tuple(c0)} outside support volume {support.shape}")
    src = source_output if source_output is not None else embed_points(model, support, [c0])[0]
    c1 = _draw_start(query.shape, start_margin, rng)
    start_out = embed_points(model, query, [c1])[0]
    offset = pred_offset(start_out.p, src.p, model.r)
    if offset_noise_mm > 0:
        offset = offset + rng.normal(0.0, offset_noise_mm, 3)
    located = _move(c1, offset, query.spacing, query.shape)
    return LocatedPoint(tuple(int(v) for v in c0), int(label), int(query_id), tuple(int(v) for v in c1), tuple(int(v) for v in located))


def _cos(a, b) -> float | None:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"feature lengths differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def dfd_sim(f2_s, f4_s, f2_q, f4_q) -> float:
    """cos(f2_s, f2_q) * cos(f4_s, f4_q); -1 if any vector has zero norm."""
    c2 = _cos(f2_s, f2_q)
    c4 = _cos(f4_s, f4_q)
    if c2 is None or c4 is None:
        return -1.0
    return c2 * c4


def filter_points(points: Sequence[LocatedPoint], tau: float) -> list[LocatedPoint]:
    """Mark and return points with sim strictly above ``tau``.

    Returns copies; the input list is not modified.
    """
    out = []
    for p in points:
        if p.sim is None:
            raise ValueError("similarity not computed for a located point")
        out.append(LocatedPoint(**{**asdict(p), "kept": bool(p.sim > tau)}))
    return [p for p in out if p.kept]


def _kept_set(points: Sequence[LocatedPoint], class_count: int) -> ScribbleSet:
    kept = [p for p in points if p.kept]
    if not kept:
        return ScribbleSet(np.zeros((0, 3), np.int64), np.zeros(0, np.int64), class_count)
    return ScribbleSet(np.array([p.located for p in kept]), np.array([p.label for p in kept]), class_count)


def propagate_scribbles(
    model: Embedder,
    support: Volume3,
    scribbles: ScribbleSet,
    queries: Sequence[Volume3],
    cfg: PropagateConfig = PropagateConfig(),
    rng: np.random.Generator | None = None,
) -> PropagationResult:
    """Locate every support scribble point in every query volume and denoise.

    Support features are computed once. For each (point, query) pair,
    ``cfg.restarts`` random starts are tried and the candidate with the
    highest similarity is kept for the audit trail.
    """
    if len(scribbles) == 0:
        raise ValueError("support scribble is empty")
    scribbles.check_bounds(support.shape)
    rng = rng if rng is not None else np.random.default_rng(0)
    src = embed_points(model, support, scribbles.coords)
    result = PropagationResult([], [], [])
    for qi, query in enumerate(queries):
        n = len(scribbles)
        # draw every start and noise sample up front in a fixed order
        starts = np.stack([_draw_start(query.shape, cfg.start_margin, rng) for _ in range(n * cfg.restarts)])
        noise = (
            rng.normal(0.0, cfg.offset_noise_mm, (n * cfg.restarts, 3))
            if cfg.offset_noise_mm > 0
            else np.zeros((n * cfg.restarts, 3))
        )
        start_out = embed_points(model, query, starts)
        located = np.empty_like(starts)
        for k in range(n * cfg.restarts):
            offset = pred_offset(start_out[k].p, src[k // cfg.restarts].p, model.r) + noise[k]
            located[k] = _move(starts[k], offset, query.spacing, query.shape)
        loc_out = embed_points(model, query, located)
        points = []
        for i in range(n):
            best = None
            for j in range(cfg.restarts):
                k = i * cfg.restarts + j
                sim = dfd_sim(src[i].f2, src[i].f4, loc_out[k].f2, loc_out[k].f4)
                if best is None or sim > best[0]:
                    best = (sim, k)
            sim, k = best
            points.append(
                LocatedPoint(
                    tuple(int(v) for v in scribbles.coords[i]),
                    int(scribbles.labels[i]),
                    qi,
                    tuple(int(v) for v in starts[k]),
                    tuple(int(v) for v in located[k]),
                    float(sim),
                    bool(sim > cfg.tau),
                )
            )
        kept = _kept_set(points, scribbles.class_count)
        for cls in scribbles.classes():
            if not np.any(kept.labels == cls):
                msg = f"query {qi}: every propagated point of class {cls} was discarded at tau={cfg.tau}"
                log.warning(msg)
                result.warnings.append(msg)
        result.scribbles.append(kept)
        result.points.append(points)
    return result


def precision_report(result: PropagationResult, gts: Sequence[LabelGrid], tau: float | None = None) -> dict:
    """Per-class propagation precision against ground truth.

    ``precision`` averages per-volume precision, counting a volume with no
    kept points of the class as 0 (``empty_volumes`` records how many).
    ``pooled_precision`` pools all kept points. ``kept_per_volume`` is the
    mean number of kept points. With ``tau`` the audit trail is re-filtered.
    """
    if len(gts) != len(result.points):
        raise ValueError("need one ground-truth grid per query volume")
    classes = sorted({p.label for pts in result.points for p in pts})
    report = {}
    for cls in classes:
        per_volume, kept_counts, hits, total, empty = [], [], 0, 0, 0
        for pts, gt in zip(result.points, gts):
            mine = [p for p in pts if p.label == cls]
            kept = [p for p in mine if (p.sim > tau if tau is not None else p.kept)]
            kept_counts.append(len(kept))
            if not kept:
                per_volume.append(0.0)
                empty += 1
                continue
            correct = sum(int(gt.labels[p.located]) == cls for p in kept)
            per_volume.append(correct / len(kept))
            hits += correct
            total += len(kept)
        report[cls] = {
            "precision": float(np.mean(per_volume)),
            "pooled_precision": hits / total if total else 0.0,
            "kept_per_volume": float(np.mean(kept_counts)),
            "empty_volumes": empty,
        }
    return report


def save_propagation(directory, result: PropagationResult, shapes: Sequence[Sequence[int]], names=None) -> None:
    """Write ``audit.json`` (every located point) and one scribble file per query."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = names or [f"query{i:03d}" for i in range(len(result.points))]
    audit = {
        "warnings": result.warnings,
        "volumes": {name: [asdict(p) for p in pts] for name, pts in zip(names, result.points)},
    }
    (directory / "audit.json").write_text(json.dumps(audit))
    for name, s, shape in zip(names, result.scribbles, shapes):
        save_scribbles(directory / f"{name}.scribble.json", s, shape)
