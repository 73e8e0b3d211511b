"""Intensity-weighted geodesic distances and scribble-to-mask expansion.

The grid graph connects each voxel to its 6 or 26 neighbours. An edge
between voxels a and b costs

    sqrt(|(a - b) * spacing|^2 + gamma^2 * (I[a] - I[b])^2)

so a path pays for its physical length and for every intensity change it
crosses. Two solvers are provided: raster-scan relaxation (fast, used in
the pipeline) and Dijkstra on the explicit graph (exact, used as oracle).
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from . import _kernels
from .volgrid import LabelGrid, ScribbleSet, Volume3

log = logging.getLogger(__name__)

__all__ = [
    "GeosConfig",
    "GeodesicMap",
    "Box",
    "MissingClassWarning",
    "neighbor_offsets",
    "edge_weight",
    "geodesic_dijkstra",
    "geodesic_raster",
    "pseudo_mask",
    "crop_roi",
]


class MissingClassWarning(UserWarning):
    """A class had no seeds and is absent from a generated mask."""


@dataclass(frozen=True)
class GeosConfig:
    gamma: float = 150.0
    neighborhood: int = 26
    max_passes: int = 8
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.neighborhood not in (6, 26):
            raise ValueError("neighborhood must be 6 or 26")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")


@dataclass
class GeodesicMap:
    distance: np.ndarray  # float64, same shape as the volume
    passes: int = 0  # raster passes run (0 for the exact solver)
    converged: bool = True


def neighbor_offsets(neighborhood: int) -> np.ndarray:
    """All nonzero offsets of the neighbourhood, lexicographically sorted."""
    if neighborhood == 6:
        offs = [o for o in itertools.product((-1, 0, 1), repeat=3) if sum(map(abs, o)) == 1]
    elif neighborhood == 26:
        offs = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    else:
        raise ValueError("neighborhood must be 6 or 26")
    return np.array(sorted(offs), dtype=np.int64)


def _causal_offsets(neighborhood: int) -> np.ndarray:
    """Offsets pointing to voxels visited earlier in forward raster order."""
    offs = neighbor_offsets(neighborhood)
    return offs[[tuple(o) < (0, 0, 0) for o in offs]]


def edge_weight(v: Volume3, a, b, gamma: float, neighborhood: int = 26) -> float:
    a, b = np.asarray(a), np.asarray(b)
    step = b - a
    nz = np.count_nonzero(step)
    if np.any(np.abs(step) > 1) or nz == 0 or (neighborhood == 6 and nz != 1):
        raise ValueError(f"voxels {tuple(a)} and {tuple(b)} are not {neighborhood}-neighbours")
    spatial = step * np.asarray(v.spacing)
    di = float(v.data[tuple(a)]) - float(v.data[tuple(b)])
    return float(np.sqrt(spatial @ spatial + gamma**2 * di * di))


def _seed_index(v: Volume3, seeds) -> np.ndarray:
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1, 3)
    if len(seeds) == 0:
        raise ValueError("seed set is empty")
    if np.any(seeds < 0) or np.any(seeds >= np.asarray(v.shape)):
        raise ValueError("seed outside the volume")
    return seeds


def _image(v: Volume3) -> np.ndarray:
    return np.ascontiguousarray(v.data, dtype=np.float64)


def geodesic_dijkstra(v: Volume3, seeds, cfg: GeosConfig = GeosConfig()) -> GeodesicMap:
    """Exact multi-source shortest paths on the weighted voxel graph."""
    seeds = _seed_index(v, seeds)
    img = _image(v)
    shape = img.shape
    index = np.arange(img.size).reshape(shape)
    spacing = np.asarray(v.spacing)
    rows, cols, weights = [], [], []
    for off in _causal_offsets(cfg.neighborhood):
        src = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, shape))
        dst = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(off, shape))
        di = img[src] - img[dst]
        length2 = float(np.sum((off * spacing) ** 2))
        rows.append(index[src].ravel())
        cols.append(index[dst].ravel())
        weights.append(np.sqrt(length2 + cfg.gamma**2 * di * di).ravel())
    graph = sparse.csr_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))), shape=(img.size, img.size)
    )
    flat = np.ravel_multi_index(seeds.T, shape)
    dist = csgraph.dijkstra(graph, directed=False, indices=np.unique(flat), min_only=True)
    return GeodesicMap(dist.reshape(shape), passes=0, converged=True)


def geodesic_raster(v: Volume3, seeds, cfg: GeosConfig = GeosConfig()) -> GeodesicMap:
    """Raster-scan geodesic transform.

    Each pass is a forward sweep (z, x, y ascending) followed by a backward
    sweep; passes repeat until the largest per-voxel change is below
    ``cfg.epsilon`` or ``cfg.max_passes`` is reached.
    """
    seeds = _seed_index(v, seeds)
    img = _image(v)
    dist = np.full(img.shape, np.inf)
    dist[tuple(seeds.T)] = 0.0
    fwd = _causal_offsets(cfg.neighborhood)
    bwd = np.ascontiguousarray(-fwd)
    spacing = np.asarray(v.spacing)
    len_f = np.sum((fwd * spacing) ** 2, axis=1).astype(np.float64)
    len_b = len_f.copy()
    gamma2 = float(cfg.gamma) ** 2
    converged = False
    passes = 0
    for passes in range(1, cfg.max_passes + 1):
        before = dist.copy()
        _kernels.geodesic_sweep(img, dist, fwd, len_f, gamma2, False)
        _kernels.geodesic_sweep(img, dist, bwd, len_b, gamma2, True)
        finite = np.isfinite(dist)
        if np.array_equal(finite, np.isfinite(before)):
            change = float(np.max(before[finite] - dist[finite], initial=0.0))
            if change < cfg.epsilon:
                converged = True
                break
    return GeodesicMap(dist, passes=passes, converged=converged)


def pseudo_mask(v: Volume3, scribbles: ScribbleSet, cfg: GeosConfig = GeosConfig()) -> LabelGrid:
    """Label every voxel with the class of its geodesically nearest scribble.

    Ties go to the lowest class index. Classes without any scribble point
    are left out of the mask and reported with a MissingClassWarning.
    """
    scribbles.check_bounds(v.shape)
    present = scribbles.classes()
    if 0 not in present or len(present) < 2:
        raise ValueError(f"need background and at least one other class, scribbles have {present}")
    maps = np.full((scribbles.class_count,) + v.shape, np.inf)
    for cls in range(scribbles.class_count):
        pts = scribbles.of_class(cls)
        if len(pts) == 0:
            warnings.warn(f"class {cls} has no scribble points; absent from pseudo mask", MissingClassWarning)
            continue
        maps[cls] = geodesic_raster(v, pts, cfg).distance
    labels = np.argmin(maps, axis=0)  # first minimum = lowest class index
    return LabelGrid(labels.astype(np.uint8), scribbles.class_count, v.spacing)


@dataclass(frozen=True)
class Box:
    """Inclusive voxel bounding box."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.lo, self.hi))

    @property
    def size(self) -> tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    def center(self) -> tuple[int, int, int]:
        return tuple((a + b) // 2 for a, b in zip(self.lo, self.hi))


def crop_roi(mask: LabelGrid, cls: int, margin=0) -> Box:
    """Tight box around ``cls`` voxels grown by ``margin`` voxels, clipped to the grid."""
    where = np.argwhere(mask.labels == cls)
    if len(where) == 0:
        raise ValueError(f"class {cls} absent from mask")
    margin = np.broadcast_to(np.asarray(margin, dtype=np.int64), (3,))
    lo = np.maximum(where.min(axis=0) - margin, 0)
    hi = np.minimum(where.max(axis=0) + margin, np.asarray(mask.shape) - 1)
    return Box(tuple(int(a) for a in lo), tuple(int(b) for b in hi))
