"""Propagation-reconstruction network and its self-supervised training.

The encoder is four conv + leaky-ReLU blocks each followed by 2x2x2
average pooling. Its output feeds (a) a coordinate head, global average
pool then one dense layer to R^3, and (b) a decoder of four blocks each
starting with a nearest-neighbour 2x2x2 upsample. ``m2``/``m4`` are the
decoder maps after two and four upsamplings; ``f2``/``f4`` are their
centre voxels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .volgrid import Volume3, crop_patch

log = logging.getLogger(__name__)

__all__ = [
    "PRNetConfig",
    "PRNetTrainConfig",
    "PRNetOutput",
    "PRNet",
    "build_prnet_spec",
    "gt_offset",
    "pred_offset",
    "ssl_loss",
    "ssl_loss_and_grads",
    "default_offset_bound",
    "train_prnet",
]


@dataclass(frozen=True)
class PRNetConfig:
    patch_size: tuple[int, int, int] = (16, 32, 32)
    enc_channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    dec_channels: tuple[int, int, int, int] = (32, 16, 8, 8)
    head_hidden: int = 64  # 0: GAP feeds the output dense layer directly
    slope: float = 0.01
    r: float | None = None  # mm; None means "diagonal of the training volumes"
    tap_m2: str = "m2"
    tap_m4: str = "m4"

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(n) for n in self.patch_size))
        object.__setattr__(self, "enc_channels", tuple(int(n) for n in self.enc_channels))
        object.__setattr__(self, "dec_channels", tuple(int(n) for n in self.dec_channels))
        if any(n % 16 for n in self.patch_size):
            raise ValueError(f"patch_size {self.patch_size} must be divisible by 16 on every axis")
        if len(self.enc_channels) != 4 or len(self.dec_channels) != 4:
            raise ValueError("PRNet has exactly four encoder and four decoder blocks")
        if self.r is not None and self.r <= 0:
            raise ValueError("r must be positive")


@dataclass(frozen=True)
class PRNetTrainConfig:
    batch: int = 4
    epochs: int = 10
    steps_per_epoch: int = 250
    lr: float = 1e-3
    lr_decay: float = 0.8
    lr_decay_every: int = 1
    sample_margin: float = 0.15  # patch centres drawn from the central (1 - 2*margin) of each axis
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.sample_margin < 0.5:
            raise ValueError("sample_margin must be in [0, 0.5)")


@dataclass
class PRNetOutput:
    p: np.ndarray  # (3,) anatomical coordinate
    recon: np.ndarray  # same shape as the patch
    f2: np.ndarray
    f4: np.ndarray


def build_prnet_spec(cfg: PRNetConfig) -> nn.NetworkSpec:
    b = nn.SpecBuilder((1,) + cfg.patch_size)
    cin = 1
    for i, c in enumerate(cfg.enc_channels, 1):
        b.add(f"enc{i}_conv", "conv3d", in_ch=cin, out_ch=c, kernel=3, stride=1, pad=1)
        b.add(f"enc{i}_act", "leaky_relu", slope=cfg.slope)
        b.add(f"enc{i}_down", "downsample2")
        cin = c
    bottleneck = b.last
    b.add("gap", "global_avg_pool", src=bottleneck)
    width = cin
    if cfg.head_hidden:
        b.add("head_hidden", "dense", in_features=width, out_features=cfg.head_hidden)
        b.add("head_act", "leaky_relu", slope=cfg.slope)
        width = cfg.head_hidden
    b.add("coord", "dense", in_features=width, out_features=3)

    b.last = bottleneck
    taps = {2: cfg.tap_m2, 4: cfg.tap_m4}
    for i, c in enumerate(cfg.dec_channels, 1):
        b.add(f"dec{i}_up", "upsample2")
        b.add(f"dec{i}_conv", "conv3d", in_ch=cin, out_ch=c, kernel=3, stride=1, pad=1)
        b.add(taps.get(i, f"m{i}"), "leaky_relu", slope=cfg.slope)
        cin = c
    b.add("recon", "conv3d", in_ch=cin, out_ch=1, kernel=3, stride=1, pad=1)
    return b.build(outputs=("coord", "recon"), taps=(cfg.tap_m2, cfg.tap_m4))


def _center(shape) -> tuple[int, ...]:
    return tuple(n // 2 for n in shape)


class PRNet:
    """Parameters plus config; inference is pure."""

    def __init__(self, cfg: PRNetConfig, params: nn.ModelParams, r: float):
        self.cfg = cfg
        self.spec = build_prnet_spec(cfg)
        self.params = params
        self.r = float(r)

    @classmethod
    def initialize(cls, cfg: PRNetConfig, seed: int, r: float) -> "PRNet":
        spec = build_prnet_spec(cfg)
        return cls(cfg, nn.init_params(spec, seed), r)

    @property
    def patch_size(self) -> tuple[int, int, int]:
        return self.cfg.patch_size

    def run(self, patches: np.ndarray):
        """Forward a batch (B, d, h, w) or (B, 1, d, h, w)."""
        x = np.asarray(patches, dtype=np.float64)
        if x.ndim == 4:
            x = x[:, None]
        if x.shape[1:] != (1,) + self.cfg.patch_size:
            raise nn.ShapeError(f"patch batch shape {x.shape} does not match patch_size {self.cfg.patch_size}")
        return nn.forward(self.spec, self.params, x)

    def predict(self, patches: np.ndarray) -> list[PRNetOutput]:
        outputs, taps, _ = self.run(patches)
        return _split_outputs(self.cfg, outputs, taps)

    def __call__(self, patch: np.ndarray) -> PRNetOutput:
        patch = np.asarray(patch)
        if patch.shape != self.cfg.patch_size:
            raise nn.ShapeError(f"patch shape {patch.shape} does not match patch_size {self.cfg.patch_size}")
        return self.predict(patch[None])[0]


def prnet_forward(params: nn.ModelParams, cfg: PRNetConfig, patch: np.ndarray) -> PRNetOutput:
    return PRNet(cfg, params, r=1.0)(patch)


def _split_outputs(cfg, outputs, taps) -> list[PRNetOutput]:
    m2, m4 = taps[cfg.tap_m2], taps[cfg.tap_m4]
    c2, c4 = _center(m2.shape[2:]), _center(m4.shape[2:])
    out = []
    for i in range(len(outputs["coord"])):
        out.append(
            PRNetOutput(
                p=outputs["coord"][i].copy(),
                recon=outputs["recon"][i, 0].copy(),
                f2=m2[(i, slice(None)) + c2].copy(),
                f4=m4[(i, slice(None)) + c4].copy(),
            )
        )
    return out


# --------------------------------------------------------------------------
# Offsets and losses


def gt_offset(c0, c1, spacing) -> np.ndarray:
    """Physical offset (mm) from c0 to c1: ``(c1 - c0) * spacing``."""
    return (np.asarray(c1, dtype=np.float64) - np.asarray(c0, dtype=np.float64)) * np.asarray(spacing, dtype=np.float64)


def pred_offset(p0, p1, r: float) -> np.ndarray:
    """Bounded offset ``r * tanh(p0 - p1)``; every component lies in (-r, r).

    tanh rounds to +/-1 for large arguments, so the result is clamped to the
    largest float below r (symmetric, so antisymmetry stays exact).
    """
    if r <= 0:
        raise ValueError("r must be positive")
    hi = np.nextafter(float(r), 0.0)
    d = r * np.tanh(np.asarray(p0, dtype=np.float64) - np.asarray(p1, dtype=np.float64))
    return np.clip(d, -hi, hi)


def ssl_loss(out0: PRNetOutput, out1: PRNetOutput, x0, x1, d10, r: float) -> tuple[float, float, float]:
    """Returns ``(L_ssl, L_dis, L_rec)`` for one pair of patches."""
    x0, x1 = np.asarray(x0, dtype=np.float64), np.asarray(x1, dtype=np.float64)
    if x0.shape != out0.recon.shape or x1.shape != out1.recon.shape:
        raise ValueError("patch and reconstruction shapes differ")
    n = x0.size
    diff = np.asarray(d10, dtype=np.float64) - pred_offset(out0.p, out1.p, r)
    l_dis = float(diff @ diff) / 3.0
    l_rec = (float(np.sum((x0 - out0.recon) ** 2)) + float(np.sum((x1 - out1.recon) ** 2))) / n
    return l_dis + l_rec, l_dis, l_rec


def ssl_loss_and_grads(coord, recon, patches, d10, r: float):
    """Batch-mean SSL loss over pairs and its gradient w.r.t. network outputs.

    ``coord`` (2B, 3) and ``recon``/``patches`` (2B, 1, d, h, w) hold the
    first patch of every pair in rows ``0..B-1`` and the second in ``B..2B-1``.
    Returns ``(L_ssl, L_dis, L_rec, g_coord, g_recon)``.
    """
    nb = len(d10)
    n = patches[0].size
    u = coord[:nb] - coord[nb:]
    t = np.tanh(u)
    diff = d10 - r * t
    l_dis = np.sum(diff**2, axis=1) / 3.0
    res = patches - recon
    l_rec_each = np.sum(res.reshape(2 * nb, -1) ** 2, axis=1) / n
    l_rec = l_rec_each[:nb] + l_rec_each[nb:]

    g_u = (-2.0 / 3.0) * diff * r * (1.0 - t * t) / nb
    g_coord = np.concatenate([g_u, -g_u])
    g_recon = (-2.0 / n / nb) * res
    l_dis_m, l_rec_m = float(l_dis.mean()), float(l_rec.mean())
    return l_dis_m + l_rec_m, l_dis_m, l_rec_m, g_coord, g_recon


def default_offset_bound(volumes: Sequence[Volume3]) -> float:
    """Largest physical diagonal among the volumes: covers every possible offset."""
    return max(
        math.sqrt(sum(((n - 1) * e) ** 2 for n, e in zip(v.shape, v.spacing))) for v in volumes
    )


# --------------------------------------------------------------------------
# Training


def _centre(shape, margin, rng) -> np.ndarray:
    out = []
    for n in shape:
        lo = int(np.floor(margin * n))
        hi = max(lo + 1, int(np.ceil((1 - margin) * n)))
        out.append(int(rng.integers(lo, min(hi, n))))
    return np.array(out)


def _sample_batch(volumes, patch_size, batch, rng, margin=0.0):
    """Pairs (c0, c1) from one randomly chosen volume each."""
    x0, x1, d = [], [], []
    for _ in range(batch):
        v = volumes[int(rng.integers(len(volumes)))]
        c0 = _centre(v.shape, margin, rng)
        c1 = _centre(v.shape, margin, rng)
        x0.append(crop_patch(v, c0, patch_size))
        x1.append(crop_patch(v, c1, patch_size))
        d.append(gt_offset(c0, c1, v.spacing))
    patches = np.stack(x0 + x1)[:, None]
    return patches, np.stack(d)


def train_prnet(
    volumes: Sequence[Volume3],
    cfg: PRNetConfig = PRNetConfig(),
    train_cfg: PRNetTrainConfig = PRNetTrainConfig(),
    callback=None,
):
    """Self-supervised training on relative offsets and reconstruction.

    Returns ``(model, history)``; ``history`` has one dict per epoch with
    mean ``L_dis``, ``L_rec`` and ``L_ssl``. ``callback(epoch, row, model)``
    runs after every epoch.
    """
    if not volumes:
        raise ValueError("need at least one training volume")
    r = cfg.r if cfg.r is not None else default_offset_bound(volumes)
    cfg = replace(cfg, r=r)
    rng = np.random.default_rng([train_cfg.seed, 1])
    model = PRNet.initialize(cfg, train_cfg.seed, r)
    state = nn.adam_init(model.params, lr=train_cfg.lr, decay=train_cfg.lr_decay, decay_every=train_cfg.lr_decay_every)
    params = model.params
    history = []
    for epoch in range(train_cfg.epochs):
        sums = np.zeros(3)
        for _ in range(train_cfg.steps_per_epoch):
            patches, d10 = _sample_batch(volumes, cfg.patch_size, train_cfg.batch, rng, train_cfg.sample_margin)
            outputs, _, cache = nn.forward(model.spec, params, patches)
            l_ssl, l_dis, l_rec, g_coord, g_recon = ssl_loss_and_grads(
                outputs["coord"], outputs["recon"], patches, d10, r
            )
            if not math.isfinite(l_ssl):
                raise FloatingPointError(
                    f"non-finite SSL loss at epoch {epoch + 1}: L_dis={l_dis}, L_rec={l_rec}"
                )
            grads = nn.backward(cache, {"coord": g_coord, "recon": g_recon})
            params, state = nn.adam_step(params, grads, state, epoch)
            sums += (l_dis, l_rec, l_ssl)
        mean = sums / train_cfg.steps_per_epoch
        row = {"epoch": epoch + 1, "L_dis": float(mean[0]), "L_rec": float(mean[1]), "L_ssl": float(mean[2])}
        history.append(row)
        log.info("prnet epoch %d  L_dis=%.4f  L_rec=%.5f  L_ssl=%.4f", epoch + 1, *mean)
        model = PRNet(cfg, params, r)
        if callback is not None:
            callback(epoch, row, model)
    return PRNet(cfg, params, r), history
