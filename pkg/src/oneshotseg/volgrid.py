"""Volume containers, phantom anatomy, patch cropping and on-disk formats.

Axis order everywhere is (z, x, y); spacing is in mm per voxel along the
same axes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume3",
    "LabelGrid",
    "ScribbleSet",
    "PhantomConfig",
    "PhantomError",
    "FormatError",
    "generate_phantom",
    "phantom_tissue",
    "normalize_intensity",
    "crop_patch",
    "save_volume",
    "load_volume",
    "save_labels",
    "load_labels",
    "save_scribbles",
    "load_scribbles",
    "draw_support_scribble",
]


class PhantomError(ValueError):
    """Raised when the template anatomy cannot be placed on the requested grid."""


class FormatError(ValueError):
    """Raised for malformed or inconsistent volume files."""


def _as_shape(shape: Sequence[int]) -> tuple[int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"shape must be three positive integers, got {shape}")
    return shape


def _as_spacing(spacing: Sequence[float]) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive numbers, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume3:
    """A scalar 3D image with physical voxel spacing (mm).

    ``data`` is stored as float32 so that the raw file format round-trips
    bit-exactly.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def contains(self, coord) -> bool:
        c = np.asarray(coord)
        return bool(np.all(c >= 0) and np.all(c < np.asarray(self.shape)))


@dataclass(frozen=True)
class LabelGrid:
    """Dense per-voxel class indices; class 0 is background."""

    labels: np.ndarray
    class_count: int = 2
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"labels must be 3D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if self.class_count > 256:
            raise ValueError("at most 256 classes fit the u8 label format")
        labels = np.ascontiguousarray(labels, dtype=np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def binary(self, cls: int) -> np.ndarray:
        return self.labels == cls


@dataclass(frozen=True)
class ScribbleSet:
    """Sparse labelled voxels. ``coords`` is (n, 3) int, ``labels`` is (n,)."""

    coords: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(coords) != len(labels):
            raise ValueError("coords and labels differ in length")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"scribble labels must lie in [0, {self.class_count})")
        coords.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def check_bounds(self, shape: Sequence[int]) -> None:
        shape = np.asarray(shape)
        if len(self) and (np.any(self.coords < 0) or np.any(self.coords >= shape)):
            bad = self.coords[np.any((self.coords < 0) | (self.coords >= shape), axis=1)][0]
            raise ValueError(f"scribble point {tuple(bad)} outside volume of shape {tuple(shape)}")

    def classes(self) -> list[int]:
        return sorted(set(int(v) for v in self.labels))

    def of_class(self, cls: int) -> np.ndarray:
        return self.coords[self.labels == cls]

    @staticmethod
    def concat(sets: Sequence["ScribbleSet"], class_count: int | None = None) -> "ScribbleSet":
        if not sets and class_count is None:
            raise ValueError("need at least one set or an explicit class_count")
        cc = class_count if class_count is not None else max(s.class_count for s in sets)
        if not sets:
            return ScribbleSet(np.zeros((0, 3), int), np.zeros(0, int), cc)
        return ScribbleSet(
            np.concatenate([s.coords for s in sets]),
            np.concatenate([s.labels for s in sets]),
            cc,
        )


# --------------------------------------------------------------------------
# Phantom anatomy

# Template organ slots in normalized body coordinates: centre (z, x, y) in
# [-1, 1] relative to the volume's physical half-extent, and semi-axes in
# the same units. Slots are mutually disjoint and avoid spine and lungs.
_ORGAN_SLOTS = (
    ((0.28, -0.10, -0.36), (0.40, 0.40, 0.32)),  # large, liver-like
    ((0.30, 0.20, 0.38), (0.32, 0.22, 0.20)),  # small, kidney-like
    ((0.30, -0.28, 0.34), (0.26, 0.16, 0.16)),  # spleen-like
    ((-0.42, -0.30, 0.00), (0.18, 0.16, 0.16)),  # anterior, heart-like
)
_SPINE_CENTER_XY = (0.52, 0.0)
_SPINE_RADIUS = 0.13
_LUNGS = (
    ((-0.62, -0.05, -0.38), (0.34, 0.34, 0.24)),
    ((-0.62, -0.05, 0.38), (0.34, 0.34, 0.24)),
)

TISSUE_AIR, TISSUE_BODY, TISSUE_SPINE, TISSUE_LUNG = 0, 1, 2, 3
TISSUE_ORGAN0 = 4


@dataclass(frozen=True)
class PhantomConfig:
    """Parameters of the synthetic subject family.

    Intensities are given before noise; organ intensity is
    ``body_intensity + organ_offsets[k]``.
    """

    shape: tuple[int, int, int] = (32, 64, 64)
    spacing: tuple[float, float, float] = (3.0, 1.0, 1.0)
    organ_count: int = 2
    organ_offsets: tuple[float, ...] = (0.30, 0.18, 0.24, 0.36)
    body_intensity: float = 0.35
    spine_intensity: float = 0.95
    lung_intensity: float = 0.08
    air_intensity: float = 0.0
    noise_sigma: float = 0.03
    deform_amplitude: float = 4.0  # mm, max displacement magnitude per axis
    deform_smoothness: float = 12.0  # mm, gaussian sigma of the displacement field
    organ_fraction_bounds: tuple[float, float] = (0.001, 0.12)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", _as_shape(self.shape))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))
        object.__setattr__(self, "organ_offsets", tuple(float(o) for o in self.organ_offsets))
        object.__setattr__(self, "organ_fraction_bounds", tuple(float(b) for b in self.organ_fraction_bounds))
        if self.organ_count < 1:
            raise ValueError("organ_count must be >= 1")
        if self.deform_amplitude < 0:
            raise ValueError("deform_amplitude must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.deform_smoothness <= 0:
            raise ValueError("deform_smoothness must be > 0")

    @property
    def class_count(self) -> int:
        return self.organ_count + 1


def _displacement(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth random displacement field (3, D, H, W) in mm."""
    shape = cfg.shape
    disp = np.zeros((3,) + shape)
    if cfg.deform_amplitude == 0:
        return disp
    sigma_vox = [cfg.deform_smoothness / e for e in cfg.spacing]
    for axis in range(3):
        noise = rng.standard_normal(shape)
        smooth = ndimage.gaussian_filter(noise, sigma_vox, mode="wrap")
        peak = np.abs(smooth).max()
        if peak > 0:
            disp[axis] = smooth / peak * cfg.deform_amplitude
    return disp


def _inside(u, center, radii) -> np.ndarray:
    return sum(((u[a] - center[a]) / radii[a]) ** 2 for a in range(3)) <= 1.0


def phantom_tissue(cfg: PhantomConfig, subject_id: int) -> np.ndarray:
    """Integer tissue map of one subject (air, body, spine, lung, organs...).

    Organ ``k`` (0-based) has tissue code ``TISSUE_ORGAN0 + k`` and label ``k + 1``.
    """
    if cfg.organ_count > len(_ORGAN_SLOTS):
        raise PhantomError(
            f"organ_count={cfg.organ_count} exceeds the {len(_ORGAN_SLOTS)} template organ slots"
        )
    if len(cfg.organ_offsets) < cfg.organ_count:
        raise PhantomError("organ_offsets has fewer entries than organ_count")
    rng = np.random.default_rng([cfg.seed, subject_id])
    disp = _displacement(cfg, rng)

    half = np.array([(n - 1) * e / 2.0 for n, e in zip(cfg.shape, cfg.spacing)])
    if np.any(half <= 0):
        raise PhantomError(f"shape {cfg.shape} is too thin to hold the template anatomy")
    grids = np.meshgrid(*[np.arange(n) * e for n, e in zip(cfg.shape, cfg.spacing)], indexing="ij")
    # backward warp: each voxel samples the template at its displaced position
    u = [(grids[a] + disp[a] - half[a]) / half[a] for a in range(3)]

    taper = 1.0 - 0.18 * u[0] ** 2
    body = (u[1] / (0.80 * taper)) ** 2 + (u[2] / (0.90 * taper)) ** 2 <= 1.0
    tissue = np.where(body, TISSUE_BODY, TISSUE_AIR).astype(np.uint8)
    spine = (u[1] - _SPINE_CENTER_XY[0]) ** 2 + (u[2] - _SPINE_CENTER_XY[1]) ** 2 <= _SPINE_RADIUS**2
    tissue[spine & body] = TISSUE_SPINE
    for center, radii in _LUNGS:
        tissue[_inside(u, center, radii) & body] = TISSUE_LUNG
    for k in range(cfg.organ_count):
        center, radii = _ORGAN_SLOTS[k]
        tissue[_inside(u, center, radii) & body] = TISSUE_ORGAN0 + k
    return tissue


def generate_phantom(cfg: PhantomConfig, subject_id: int) -> tuple[Volume3, LabelGrid]:
    """Render subject ``subject_id`` of the phantom family.

    All subjects share the template anatomy; they differ by a smooth
    displacement field and additive gaussian noise, both drawn from an rng
    seeded with ``(cfg.seed, subject_id)``.
    """
    tissue = phantom_tissue(cfg, subject_id)
    labels = np.zeros(cfg.shape, dtype=np.uint8)
    lo, hi = cfg.organ_fraction_bounds
    for k in range(cfg.organ_count):
        region = tissue == TISSUE_ORGAN0 + k
        frac = region.mean()
        if not lo <= frac <= hi:
            raise PhantomError(
                f"organ {k + 1} covers {frac:.4f} of the grid, outside bounds [{lo}, {hi}]"
            )
        labels[region] = k + 1

    lut = np.empty(TISSUE_ORGAN0 + cfg.organ_count)
    lut[TISSUE_AIR] = cfg.air_intensity
    lut[TISSUE_BODY] = cfg.body_intensity
    lut[TISSUE_SPINE] = cfg.spine_intensity
    lut[TISSUE_LUNG] = cfg.lung_intensity
    for k in range(cfg.organ_count):
        lut[TISSUE_ORGAN0 + k] = cfg.body_intensity + cfg.organ_offsets[k]
    image = lut[tissue]
    if cfg.noise_sigma > 0:
        # separate stream so noise does not shift with the deformation draws
        noise_rng = np.random.default_rng([cfg.seed, subject_id, 1])
        image = image + noise_rng.normal(0.0, cfg.noise_sigma, cfg.shape)
    return (
        Volume3(image, cfg.spacing),
        LabelGrid(labels, cfg.class_count, cfg.spacing),
    )


def normalize_intensity(v: Volume3) -> Volume3:
    """Min-max rescale to [0, 1]; a constant volume maps to all zeros."""
    data = v.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi <= lo:
        return Volume3(np.zeros_like(data), v.spacing)
    out = (data - lo) / (hi - lo)
    return Volume3(np.clip(out, 0.0, 1.0), v.spacing)


def crop_patch(v: Volume3, center, size) -> np.ndarray:
    """Crop a ``size`` patch whose index ``size // 2`` sits on ``center``.

    Voxels outside the volume are filled with the volume minimum. Returns a
    float64 array.
    """
    size = _as_shape(size)
    center = np.asarray(center, dtype=np.int64)
    if not v.contains(center):
        raise ValueError(f"patch center {tuple(center)} outside volume {v.shape}")
    if any(s > 2 * n for s, n in zip(size, v.shape)):
        raise ValueError(f"patch size {size} exceeds twice the volume shape {v.shape}")
    start = center - np.asarray(size) // 2
    out = np.full(size, float(v.data.min()), dtype=np.float64)
    src, dst = [], []
    for a in range(3):
        lo = max(start[a], 0)
        hi = min(start[a] + size[a], v.shape[a])
        src.append(slice(lo, hi))
        dst.append(slice(lo - start[a], hi - start[a]))
    out[tuple(dst)] = v.data[tuple(src)]
    return out


# --------------------------------------------------------------------------
# File formats

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _write_raw(path, array: np.ndarray, spacing, dtype: str, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tofile(path)
    meta = {"shape": list(array.shape), "spacing": list(spacing), "dtype": dtype}
    if extra:
        meta.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(meta))


def _read_raw(path, expect_dtype: str) -> tuple[np.ndarray, tuple, dict]:
    path = Path(path)
    sidecar = Path(str(path) + ".json")
    try:
        meta = json.loads(sidecar.read_text())
        shape = _as_shape(meta["shape"])
        spacing = _as_spacing(meta["spacing"])
        dtype = meta["dtype"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed sidecar {sidecar}: {exc}") from exc
    if dtype != expect_dtype:
        raise FormatError(f"{path}: expected dtype {expect_dtype!r}, sidecar says {dtype!r}")
    raw = np.fromfile(path, dtype=_DTYPES[dtype])
    if raw.size != int(np.prod(shape)):
        raise FormatError(
            f"{path}: sidecar shape {list(shape)} needs {int(np.prod(shape))} values, file holds {raw.size}"
        )
    return raw.reshape(shape), spacing, meta


def save_volume(path, v: Volume3) -> None:
    """Write ``path`` (raw little-endian f32, row-major z,x,y) and ``path.json``."""
    _write_raw(path, v.data, v.spacing, "f32")


def load_volume(path) -> Volume3:
    data, spacing, _ = _read_raw(path, "f32")
    return Volume3(data, spacing)


def save_labels(path, grid: LabelGrid) -> None:
    _write_raw(path, grid.labels, grid.spacing, "u8", {"class_count": grid.class_count})


def load_labels(path) -> LabelGrid:
    data, spacing, meta = _read_raw(path, "u8")
    class_count = int(meta.get("class_count", int(data.max()) + 1 if data.size else 1))
    try:
        return LabelGrid(data, class_count, spacing)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_scribbles(path, s: ScribbleSet, shape: Sequence[int] | None = None) -> None:
    doc = {
        "class_count": int(s.class_count),
        "points": [[int(c[0]), int(c[1]), int(c[2]), int(l)] for c, l in zip(s.coords, s.labels)],
    }
    if shape is not None:
        doc["shape"] = [int(n) for n in shape]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))


def load_scribbles(path, shape: Sequence[int] | None = None) -> ScribbleSet:
    """Load a scribble JSON; points are bounds-checked against ``shape``
    (or the optional ``shape`` field stored in the file)."""
    try:
        doc = json.loads(Path(path).read_text())
        pts = np.asarray(doc["points"], dtype=np.int64).reshape(-1, 4)
        s = ScribbleSet(pts[:, :3], pts[:, 3], int(doc["class_count"]))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed scribble file {path}: {exc}") from exc
    bounds = shape if shape is not None else doc.get("shape")
    if bounds is not None:
        try:
            s.check_bounds(bounds)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return s


# --------------------------------------------------------------------------
# Simulated annotation

_STEPS = np.array(
    [(dz, dx, dy) for dz in (-1, 0, 1) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dz, dx, dy) != (0, 0, 0)]
)
_BALL = ndimage.generate_binary_structure(3, 3)


def _polyline(region: np.ndarray, n: int, rng: np.random.Generator, start=None, attempts: int = 64) -> np.ndarray:
    """A connected, non-self-intersecting voxel path of length ``n`` inside ``region``.

    The walk keeps a heading and prefers the neighbour best aligned with it,
    which yields stroke-like lines rather than tangles.
    """
    coords = np.argwhere(region)
    if len(coords) < n:
        raise ValueError(f"region has {len(coords)} voxels, {n} requested")
    shape = np.asarray(region.shape)
    for attempt in range(attempts):
        cur = np.asarray(start if (start is not None and attempt == 0) else coords[rng.integers(len(coords))])
        path = [cur]
        seen = {tuple(cur)}
        heading = _STEPS[rng.integers(len(_STEPS))].astype(float)
        while len(path) < n:
            cand = cur + _STEPS
            ok = np.all((cand >= 0) & (cand < shape), axis=1)
            ok[ok] = region[tuple(cand[ok].T)]
            ok &= np.array([tuple(c) not in seen for c in cand])
            if not ok.any():
                break
            steps = _STEPS[ok]
            score = steps @ heading / np.linalg.norm(steps, axis=1) + 0.3 * rng.random(len(steps))
            step = steps[int(np.argmax(score))]
            heading = 0.8 * heading + 0.2 * step
            cur = cur + step
            path.append(cur)
            seen.add(tuple(cur))
        if len(path) == n:
            return np.asarray(path, dtype=np.int64)
    raise ValueError(f"could not fit a {n}-voxel polyline into the region")


def draw_support_scribble(
    gt: LabelGrid,
    cls: int,
    points_per_class: int,
    rng: np.random.Generator,
    bg_points: int | None = None,
    bg_strokes: int = 4,
    bg_band: tuple[float, float] = (3.0, 8.0),
) -> ScribbleSet:
    """Simulate a user scribble for class ``cls`` plus background strokes.

    The foreground stroke is a connected polyline at least one voxel inside
    the class region. Background strokes (``bg_points`` voxels in total,
    spread over ``bg_strokes`` polylines) lie in background voxels whose
    distance to the class is within ``bg_band`` (in voxels), so they ring
    the organ.
    """
    if cls <= 0 or cls >= gt.class_count:
        raise ValueError(f"class {cls} is not a foreground class of this grid")
    if points_per_class < 1:
        raise ValueError("points_per_class must be >= 1")
    region = gt.labels == cls
    if not region.any():
        raise ValueError(f"class {cls} absent from ground truth")
    interior = ndimage.binary_erosion(region, _BALL, border_value=0)
    if interior.sum() < points_per_class:
        raise ValueError(
            f"class {cls} interior has {int(interior.sum())} voxels, too small for {points_per_class} points"
        )
    fg = _polyline(interior, points_per_class, rng)

    bg_points = points_per_class if bg_points is None else bg_points
    bg = np.zeros((0, 3), dtype=np.int64)
    if bg_points > 0:
        background = ndimage.binary_erosion(gt.labels == 0, _BALL, border_value=1)
        dist = ndimage.distance_transform_edt(~region)
        band = background & (dist >= bg_band[0]) & (dist <= bg_band[1])
        if band.sum() < bg_points:
            raise ValueError("background band around the class is too small for the requested points")
        strokes = max(1, min(bg_strokes, bg_points))
        sizes = [bg_points // strokes + (1 if i < bg_points % strokes else 0) for i in range(strokes)]
        # spread stroke starts with farthest-point sampling over the band
        cand = np.argwhere(band)
        starts = [cand[rng.integers(len(cand))]]
        mind = np.linalg.norm((cand - starts[0]) * np.asarray(gt.spacing), axis=1)
        for _ in range(strokes - 1):
            nxt = cand[int(np.argmax(mind))]
            starts.append(nxt)
            mind = np.minimum(mind, np.linalg.norm((cand - nxt) * np.asarray(gt.spacing), axis=1))
        used = np.zeros_like(band)
        parts = []
        for size, start in zip(sizes, starts):
            avail = band & ~used
            if not avail[tuple(start)]:
                start = None
            line = _polyline(avail, size, rng, start=start)
            used[tuple(line.T)] = True
            parts.append(line)
        bg = np.concatenate(parts)

    coords = np.concatenate([fg, bg])
    labels = np.concatenate([np.full(len(fg), cls), np.zeros(len(bg), dtype=np.int64)])
    return ScribbleSet(coords, labels, gt.class_count)
