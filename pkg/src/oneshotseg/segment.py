"""Binary 3D UNet segmenter trained on pseudo masks, with progressive label correction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .geos import Box, crop_roi
from .volgrid import LabelGrid, Volume3, crop_patch

log = logging.getLogger(__name__)

__all__ = [
    "SegConfig",
    "PLCState",
    "SegModel",
    "build_unet_spec",
    "seg_forward",
    "seg_loss",
    "seg_loss_and_grad",
    "plc_update_delta",
    "plc_delta_at",
    "plc_correct",
    "train_segmenter",
    "dice",
    "standardize",
]

DICE_SMOOTH = 1e-5
CE_CLIP = 1e-7


@dataclass(frozen=True)
class SegConfig:
    depth: int = 3
    base_channels: int = 8
    crop_size: tuple[int, int, int] = (16, 32, 32)
    roi_margin: tuple[int, int, int] = (2, 4, 4)  # voxels around the pseudo-mask box
    roi_prob: float = 0.8  # share of crops centred inside the box; the rest anywhere
    batch: int = 4
    epochs: int = 40
    steps_per_epoch: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.9
    lr_decay_every: int = 10
    slope: float = 0.01
    standardize: bool = True  # z-score each volume before cropping
    plc_enabled: bool = False
    plc_symmetric: bool = True
    plc_start_epoch: int = 0  # first epoch (0-based) after which labels are corrected
    plc_initial: float = 0.95
    plc_decay: float = 0.99
    plc_floor: float = 0.85
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "crop_size", tuple(int(n) for n in self.crop_size))
        object.__setattr__(self, "roi_margin", tuple(int(n) for n in self.roi_margin))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if any(n % 2**self.depth for n in self.crop_size):
            raise ValueError(f"crop_size {self.crop_size} must be divisible by 2**depth")


def build_unet_spec(cfg: SegConfig, spatial=None) -> nn.NetworkSpec:
    spatial = tuple(spatial or cfg.crop_size)
    b = nn.SpecBuilder((1,) + spatial)
    cin = 1
    skips = []
    for i in range(cfg.depth):
        c = cfg.base_channels * 2**i
        b.add(f"enc{i}_conv", "conv3d", in_ch=cin, out_ch=c, kernel=3, stride=1, pad=1)
        skips.append(b.add(f"enc{i}_act", "leaky_relu", slope=cfg.slope))
        b.add(f"enc{i}_down", "downsample2")
        cin = c
    c = cfg.base_channels * 2**cfg.depth
    b.add("mid_conv", "conv3d", in_ch=cin, out_ch=c, kernel=3, stride=1, pad=1)
    b.add("mid_act", "leaky_relu", slope=cfg.slope)
    cin = c
    for i in reversed(range(cfg.depth)):
        c = cfg.base_channels * 2**i
        up = b.add(f"dec{i}_up", "upsample2")
        b.add(f"dec{i}_cat", "concat", src=(up, skips[i]))
        b.add(f"dec{i}_conv", "conv3d", in_ch=cin + c, out_ch=c, kernel=3, stride=1, pad=1)
        b.add(f"dec{i}_act", "leaky_relu", slope=cfg.slope)
        cin = c
    b.add("logit", "conv3d", in_ch=cin, out_ch=1, kernel=1, stride=1, pad=0)
    b.add("prob", "sigmoid")
    return b.build(outputs=("prob",))


class SegModel:
    def __init__(self, cfg: SegConfig, params: nn.ModelParams):
        self.cfg = cfg
        self.params = params
        self._specs: dict[tuple, nn.NetworkSpec] = {}

    def spec_for(self, spatial) -> nn.NetworkSpec:
        spatial = tuple(spatial)
        if spatial not in self._specs:
            self._specs[spatial] = build_unet_spec(self.cfg, spatial)
        return self._specs[spatial]

    def forward_batch(self, crops: np.ndarray):
        x = np.asarray(crops, dtype=np.float64)
        if x.ndim == 4:
            x = x[:, None]
        return nn.forward(self.spec_for(x.shape[2:]), self.params, x)

    def predict(self, volume: Volume3) -> np.ndarray:
        """Foreground probability for every voxel (the volume is edge-padded
        with its minimum up to a multiple of 2**depth)."""
        if self.cfg.standardize:
            volume = standardize(volume)
        m = 2**self.cfg.depth
        shape = volume.shape
        padded = tuple(-(-n // m) * m for n in shape)
        x = np.full(padded, float(volume.data.min()))
        x[: shape[0], : shape[1], : shape[2]] = volume.data
        out, _, _ = self.forward_batch(x[None])
        return out["prob"][0, 0, : shape[0], : shape[1], : shape[2]]


def standardize(v: Volume3) -> Volume3:
    """Zero mean, unit variance (a constant volume maps to zeros)."""
    data = v.data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("volume contains non-finite values")
    sd = data.std()
    return Volume3((data - data.mean()) / sd if sd > 0 else np.zeros_like(data), v.spacing)


def seg_forward(params: nn.ModelParams, cfg: SegConfig, crop: np.ndarray) -> np.ndarray:
    """Per-voxel foreground probability of one crop (D, H, W), fed to the
    network as given (no standardization)."""
    crop = np.asarray(crop, dtype=np.float64)
    if crop.ndim != 3 or any(n % 2**cfg.depth for n in crop.shape):
        raise nn.ShapeError(f"crop shape {crop.shape} must be 3D and divisible by {2**cfg.depth}")
    out, _, _ = SegModel(cfg, params).forward_batch(crop[None])
    return out["prob"][0, 0]


# --------------------------------------------------------------------------
# Loss


def seg_loss_and_grad(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, float, float]:
    """Cross entropy + soft Dice loss for a batch (B, ...) of probability maps.

    CE is the voxel mean over the whole batch; the Dice term is computed per
    sample and averaged. Returns ``(loss, d loss / d probs, ce, dice_term)``.
    """
    p = np.asarray(probs, dtype=np.float64)
    g = np.asarray(labels, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"probs {p.shape} and labels {g.shape} differ in shape")
    if p.ndim < 2:
        p, g = p[None], g[None]
    nb = p.shape[0]
    pc = np.clip(p, CE_CLIP, 1 - CE_CLIP)
    inside = (p > CE_CLIP) & (p < 1 - CE_CLIP)
    n = p.size
    ce = float(-np.sum(g * np.log(pc) + (1 - g) * np.log(1 - pc)) / n)
    g_ce = np.where(inside, (-(g / pc) + (1 - g) / (1 - pc)) / n, 0.0)

    axes = tuple(range(1, p.ndim))
    inter = np.sum(p * g, axis=axes)
    denom = np.sum(p, axis=axes) + np.sum(g, axis=axes) + DICE_SMOOTH
    numer = 2 * inter + DICE_SMOOTH
    dice_terms = 1 - numer / denom
    dice_term = float(np.mean(dice_terms))
    shape = (nb,) + (1,) * (p.ndim - 1)
    g_dice = -(2 * g * denom.reshape(shape) - numer.reshape(shape)) / denom.reshape(shape) ** 2 / nb
    return ce + dice_term, g_ce + g_dice, ce, dice_term


def seg_loss(probs, labels) -> float:
    """``CE(probs, labels) + 1 - (2 sum(p g) + eps) / (sum p + sum g + eps)``."""
    return seg_loss_and_grad(probs, labels)[0]


def dice(m: np.ndarray, g: np.ndarray) -> float:
    """2|M & G| / (|M| + |G|), and 1 when both are empty."""
    m, g = np.asarray(m, dtype=bool), np.asarray(g, dtype=bool)
    if m.shape != g.shape:
        raise ValueError(f"shape mismatch {m.shape} vs {g.shape}")
    total = int(m.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(m & g)) / total


# --------------------------------------------------------------------------
# Progressive label correction


@dataclass(frozen=True)
class PLCState:
    delta: float = 0.95
    decay: float = 0.99
    floor: float = 0.85
    initial: float = 0.95
    flips: tuple[int, ...] = ()  # flip count per correction round

    def __post_init__(self):
        if not self.floor <= self.delta <= self.initial:
            raise ValueError(f"delta {self.delta} outside [{self.floor}, {self.initial}]")


def plc_update_delta(state: PLCState) -> PLCState:
    return replace(state, delta=max(state.floor, state.delta * state.decay))


def plc_delta_at(epoch: int, initial=0.95, decay=0.99, floor=0.85) -> float:
    """Closed form of the schedule: max(floor, initial * decay**epoch)."""
    return max(floor, initial * decay**epoch)


def plc_correct(probs: np.ndarray, labels: np.ndarray, delta: float, symmetric: bool = True):
    """Flip labels to confident disagreeing predictions.

    The prediction is ``p > 0.5`` and its confidence ``max(p, 1 - p)``; a
    label flips when they disagree and the confidence exceeds ``delta``.
    With ``symmetric=False`` only flips towards foreground (``p > delta``)
    are made. Returns ``(corrected, n_flips)``.
    """
    p = np.asarray(probs, dtype=np.float64)
    lab = np.asarray(labels).astype(bool)
    if p.shape != lab.shape:
        raise ValueError(f"probs {p.shape} and labels {lab.shape} differ in shape")
    pred = p > 0.5
    if symmetric:
        confident = np.maximum(p, 1 - p) > delta
    else:
        confident = pred & (p > delta)
    flip = (pred != lab) & confident
    out = lab.copy()
    out[flip] = pred[flip]
    return out.astype(np.uint8), int(flip.sum())


# --------------------------------------------------------------------------
# Training


@dataclass
class _TrainItem:
    volume: Volume3
    labels: np.ndarray  # uint8 binary
    box: Box | None


def _sample_crops(items: Sequence[_TrainItem], cfg: SegConfig, rng: np.random.Generator):
    xs, ys = [], []
    for _ in range(cfg.batch):
        item = items[int(rng.integers(len(items)))]
        shape = item.volume.shape
        if item.box is not None and rng.random() < cfg.roi_prob:
            center = [int(rng.integers(lo, hi + 1)) for lo, hi in zip(item.box.lo, item.box.hi)]
        else:
            center = [int(rng.integers(n)) for n in shape]
        xs.append(crop_patch(item.volume, center, cfg.crop_size))
        ys.append(_crop_labels(item.labels, center, cfg.crop_size))
    return np.stack(xs)[:, None], np.stack(ys)[:, None].astype(np.float64)


def _crop_labels(labels: np.ndarray, center, size) -> np.ndarray:
    start = np.asarray(center) - np.asarray(size) // 2
    out = np.zeros(size, dtype=np.uint8)
    src, dst = [], []
    for a in range(3):
        lo = max(start[a], 0)
        hi = min(start[a] + size[a], labels.shape[a])
        src.append(slice(lo, hi))
        dst.append(slice(lo - start[a], hi - start[a]))
    out[tuple(dst)] = labels[tuple(src)]
    return out


def train_segmenter(
    volumes: Sequence[Volume3],
    masks: Sequence[np.ndarray],
    cfg: SegConfig = SegConfig(),
    gts: Sequence[np.ndarray] | None = None,
    callback=None,
):
    """Fit a binary UNet to (noisy) masks with CE + Dice.

    With ``cfg.plc_enabled`` the training masks are corrected after every
    epoch (from ``cfg.plc_start_epoch`` on) with the current threshold,
    which then decays. Returns ``(model, history, final_masks)``; each
    history row holds loss, delta, flips and, when ``gts`` is given, the
    mean Dice of thresholded predictions on the training volumes.
    """
    if len(volumes) == 0 or len(volumes) != len(masks):
        raise ValueError("need one mask per training volume and at least one pair")
    items = []
    for v, m in zip(volumes, masks):
        m = np.asarray(m).astype(np.uint8)
        if m.shape != v.shape:
            raise ValueError(f"mask shape {m.shape} differs from volume {v.shape}")
        box = crop_roi(LabelGrid(m, 2, v.spacing), 1, cfg.roi_margin) if m.any() else None
        items.append(_TrainItem(standardize(v) if cfg.standardize else v, m, box))

    rng = np.random.default_rng([cfg.seed, 2])
    spec = build_unet_spec(cfg)
    model = SegModel(cfg, nn.init_params(spec, cfg.seed))
    params = model.params
    state = nn.adam_init(params, lr=cfg.lr, decay=cfg.lr_decay, decay_every=cfg.lr_decay_every)
    plc = PLCState(cfg.plc_initial, cfg.plc_decay, cfg.plc_floor, cfg.plc_initial)
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(cfg.steps_per_epoch):
            x, y = _sample_crops(items, cfg, rng)
            out, _, cache = nn.forward(spec, params, x)
            loss, g, _, _ = seg_loss_and_grad(out["prob"], y)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite segmentation loss at epoch {epoch + 1}")
            grads = nn.backward(cache, {"prob": g})
            params, state = nn.adam_step(params, grads, state, epoch)
            total += loss
        model = SegModel(cfg, params)
        row = {"epoch": epoch + 1, "loss": total / cfg.steps_per_epoch, "delta": None, "flips": 0}
        correcting = cfg.plc_enabled and epoch >= cfg.plc_start_epoch
        if correcting or gts is not None:
            raw = SegModel(replace(cfg, standardize=False), params)
            probs = [raw.predict(it.volume) for it in items]
            if correcting:
                row["delta"] = plc.delta
                flips = 0
                for it, p in zip(items, probs):
                    it.labels, n = plc_correct(p, it.labels, plc.delta, cfg.plc_symmetric)
                    flips += n
                row["flips"] = flips
                plc = replace(plc_update_delta(plc), flips=plc.flips + (flips,))
            if gts is not None:
                row["dice_gt"] = float(np.mean([dice(p > 0.5, gt) for p, gt in zip(probs, gts)]))
        history.append(row)
        log.info("seg epoch %d  %s", epoch + 1, row)
        if callback is not None:
            callback(epoch, row, model)
    return model, history, [it.labels for it in items]
