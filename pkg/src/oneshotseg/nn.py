"""A small static-graph tensor engine with hand-written reverse mode.

Tensors are plain float64 numpy arrays with a leading batch axis. A
network is a :class:`NetworkSpec`: an ordered list of :class:`Layer`
nodes, each reading one or more earlier nodes (``"input"`` is the network
input). Forward keeps every node value in a :class:`Cache`; backward walks
the list in reverse and accumulates gradients per node.

Layer vocabulary::

    conv3d(in_ch, out_ch, kernel, stride, pad)   weights (out, in, k, k, k) + bias
    leaky_relu(slope)
    downsample2          2x2x2 average pooling
    upsample2            2x2x2 nearest-neighbour repeat
    global_avg_pool      (C, D, H, W) -> (C,)
    dense(in, out)       weights (out, in) + bias
    tanh_scale(r)        r * tanh(x)
    sigmoid
    concat               channel concatenation of several nodes
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import _kernels

__all__ = [
    "Layer",
    "NetworkSpec",
    "ModelParams",
    "Cache",
    "ShapeError",
    "init_params",
    "forward",
    "backward",
    "AdamState",
    "adam_init",
    "adam_step",
    "FiniteDiffReport",
    "finite_diff_check",
    "kink_signature",
    "save_params",
    "load_params",
    "infer_shapes",
]


class ShapeError(ValueError):
    """A tensor does not fit the layer that consumes it."""


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    src: tuple[str, ...] = ()
    args: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "src": list(self.src), "args": dict(self.args)}

    @classmethod
    def from_dict(cls, d: dict) -> "Layer":
        return cls(d["name"], d["kind"], tuple(d["src"]), dict(d["args"]))


@dataclass(frozen=True)
class NetworkSpec:
    """Static network graph.

    ``input_shape`` excludes the batch axis. ``outputs`` and ``taps`` name
    nodes whose values forward() returns; outputs are what losses consume,
    taps are exposed intermediate maps.
    """

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    outputs: tuple[str, ...]
    taps: tuple[str, ...] = ()

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names) or "input" in names:
            raise ValueError("layer names must be unique and may not be 'input'")
        if len(set(self.taps)) != len(self.taps):
            raise ValueError("tap names must be unique")
        known = {"input"}
        for layer in self.layers:
            if layer.kind not in _KINDS:
                raise ValueError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
            for s in layer.src:
                if s not in known:
                    raise ValueError(f"layer {layer.name!r} reads {s!r} before it is defined")
            known.add(layer.name)
        for n in self.outputs + self.taps:
            if n not in known:
                raise ValueError(f"output/tap {n!r} is not a node")
        # validates that adjacent shapes compose
        infer_shapes(self)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "outputs": list(self.outputs),
            "taps": list(self.taps),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            tuple(d["input_shape"]),
            tuple(Layer.from_dict(l) for l in d["layers"]),
            tuple(d["outputs"]),
            tuple(d.get("taps", ())),
        )


class SpecBuilder:
    """Chains layers; each new layer reads the previous one unless ``src`` is given."""

    def __init__(self, input_shape):
        self.input_shape = tuple(input_shape)
        self.layers: list[Layer] = []
        self.last = "input"

    def add(self, name, kind, src=None, **args) -> str:
        if src is None:
            src = (self.last,)
        elif isinstance(src, str):
            src = (src,)
        self.layers.append(Layer(name, kind, tuple(src), args))
        self.last = name
        return name

    def build(self, outputs, taps=()) -> NetworkSpec:
        return NetworkSpec(self.input_shape, tuple(self.layers), tuple(outputs), tuple(taps))


@dataclass
class ModelParams:
    """Named weight tensors (``"<layer>.weight"``, ``"<layer>.bias"``)."""

    tensors: dict[str, np.ndarray]
    seed: int = 0

    def __getitem__(self, key):
        return self.tensors[key]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())


# --------------------------------------------------------------------------
# Layers. Each kind provides shape(in_shapes, args), params(in_shapes, args),
# fwd(xs, P, args) and bwd(xs, y, gy, P, args) -> (gxs, gparams). Arrays
# carry the batch axis; shapes passed to shape()/params() do not.


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _conv_args(args):
    return int(args["in_ch"]), int(args["out_ch"]), int(args.get("kernel", 3)), int(args.get("stride", 1)), int(args.get("pad", 1))


def _conv_shape(shapes, args):
    (shape,) = shapes
    cin, cout, k, s, p = _conv_args(args)
    if len(shape) != 4 or shape[0] != cin:
        raise ShapeError(f"expects ({cin}, D, H, W), got {shape}")
    out = tuple(_conv_out(n, k, s, p) for n in shape[1:])
    if min(out) < 1:
        raise ShapeError(f"input {shape} too small for kernel {k}")
    return (cout,) + out


def _conv_params(shapes, args):
    cin, cout, k, _, _ = _conv_args(args)
    return {"weight": (cout, cin, k, k, k), "bias": (cout,)}


def _windows(xp: np.ndarray, k: int, s: int, out_sp) -> np.ndarray:
    """View (C, k, k, k, Do, Ho, Wo) over a padded (C, Dp, Hp, Wp) sample."""
    c = xp.shape[0]
    st = xp.strides
    return as_strided(
        xp,
        shape=(c, k, k, k) + tuple(out_sp),
        strides=(st[0], st[1], st[2], st[3], st[1] * s, st[2] * s, st[3] * s),
        writeable=False,
    )


# Narrow outputs are cheaper as direct loops than as im2col + GEMM, where
# the column copy dominates.
DIRECT_CONV_MAX_OUT = 8


def _use_direct(cout, s):
    return s == 1 and cout <= DIRECT_CONV_MAX_OUT


def _conv_fwd(xs, P, args):
    (x,) = xs
    cin, cout, k, s, p = _conv_args(args)
    out_sp = tuple(_conv_out(n, k, s, p) for n in x.shape[2:])
    direct = _use_direct(cout, s)
    w = np.ascontiguousarray(P["weight"]) if direct else P["weight"].reshape(cout, -1)
    y = np.zeros((x.shape[0], cout) + out_sp)
    pad = ((0, 0), (p, p), (p, p), (p, p))
    for b in range(x.shape[0]):
        xp = np.pad(x[b], pad) if p else np.ascontiguousarray(x[b])
        if direct:
            _kernels.conv3d_direct(xp, w, y[b])
        else:
            cols = _windows(xp, k, s, out_sp).reshape(cin * k**3, -1)
            y[b] = (w @ cols).reshape((cout,) + out_sp)
    y += P["bias"].reshape(1, cout, 1, 1, 1)
    return y


def _conv_bwd(xs, y, gy, P, args):
    (x,) = xs
    cin, cout, k, s, p = _conv_args(args)
    out_sp = gy.shape[2:]
    w = P["weight"].reshape(cout, -1)
    gw = np.zeros_like(w)
    gx = np.empty_like(x)
    pad = ((0, 0), (p, p), (p, p), (p, p))
    sp = x.shape[2:]
    if _use_direct(cout, s):
        w5 = np.ascontiguousarray(P["weight"])
        gw5 = np.zeros_like(w5)
        for b in range(x.shape[0]):
            xp = np.pad(x[b], pad) if p else np.ascontiguousarray(x[b])
            g = np.ascontiguousarray(gy[b])
            gxp = np.zeros_like(xp)
            _kernels.conv3d_direct_grad_weight(xp, g, gw5)
            _kernels.conv3d_direct_grad_input(w5, g, gxp)
            gx[b] = gxp[:, p : p + sp[0], p : p + sp[1], p : p + sp[2]] if p else gxp
        return [gx], {"weight": gw5, "bias": gy.sum(axis=(0, 2, 3, 4))}
    for b in range(x.shape[0]):
        xp = np.pad(x[b], pad) if p else x[b]
        cols = _windows(xp, k, s, out_sp).reshape(cin * k**3, -1)
        g = gy[b].reshape(cout, -1)
        gw += g @ cols.T
        gcols = (w.T @ g).reshape((cin, k, k, k) + tuple(out_sp))
        gxp = np.zeros((cin,) + tuple(n + 2 * p for n in sp))
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    gxp[
                        :,
                        i : i + s * out_sp[0] : s,
                        j : j + s * out_sp[1] : s,
                        l : l + s * out_sp[2] : s,
                    ] += gcols[:, i, j, l]
        gx[b] = gxp[:, p : p + sp[0], p : p + sp[1], p : p + sp[2]] if p else gxp
    gb = gy.sum(axis=(0, 2, 3, 4))
    return [gx], {"weight": gw.reshape(P["weight"].shape), "bias": gb}


def _same_shape(shapes, args):
    return shapes[0]


def _leaky_fwd(xs, P, args):
    x = xs[0]
    return np.where(x > 0, x, float(args.get("slope", 0.01)) * x)


def _leaky_bwd(xs, y, gy, P, args):
    return [np.where(xs[0] > 0, gy, float(args.get("slope", 0.01)) * gy)], {}


def _down_shape(shapes, args):
    (shape,) = shapes
    if len(shape) != 4 or any(n % 2 for n in shape[1:]):
        raise ShapeError(f"downsample2 needs even spatial dims, got {shape}")
    return (shape[0],) + tuple(n // 2 for n in shape[1:])


def _down_fwd(xs, P, args):
    x = xs[0]
    b, c, d, h, w = x.shape
    return x.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(3, 5, 7))


def _down_bwd(xs, y, gy, P, args):
    g = np.repeat(np.repeat(np.repeat(gy, 2, axis=2), 2, axis=3), 2, axis=4) / 8.0
    return [g], {}


def _up_shape(shapes, args):
    (shape,) = shapes
    if len(shape) != 4:
        raise ShapeError(f"upsample2 expects (C, D, H, W), got {shape}")
    return (shape[0],) + tuple(2 * n for n in shape[1:])


def _up_fwd(xs, P, args):
    return np.repeat(np.repeat(np.repeat(xs[0], 2, axis=2), 2, axis=3), 2, axis=4)


def _up_bwd(xs, y, gy, P, args):
    b, c, d, h, w = gy.shape
    return [gy.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2).sum(axis=(3, 5, 7))], {}


def _gap_shape(shapes, args):
    (shape,) = shapes
    if len(shape) != 4:
        raise ShapeError(f"global_avg_pool expects (C, D, H, W), got {shape}")
    return (shape[0],)


def _gap_fwd(xs, P, args):
    return xs[0].mean(axis=(2, 3, 4))


def _gap_bwd(xs, y, gy, P, args):
    x = xs[0]
    n = x.shape[2] * x.shape[3] * x.shape[4]
    return [np.broadcast_to(gy[:, :, None, None, None] / n, x.shape).copy()], {}


def _dense_shape(shapes, args):
    (shape,) = shapes
    if shape != (int(args["in_features"]),):
        raise ShapeError(f"expects ({args['in_features']},), got {shape}")
    return (int(args["out_features"]),)


def _dense_params(shapes, args):
    return {"weight": (int(args["out_features"]), int(args["in_features"])), "bias": (int(args["out_features"]),)}


def _dense_fwd(xs, P, args):
    return xs[0] @ P["weight"].T + P["bias"]


def _dense_bwd(xs, y, gy, P, args):
    x = xs[0]
    return [gy @ P["weight"]], {"weight": gy.T @ x, "bias": gy.sum(axis=0)}


def _tanh_fwd(xs, P, args):
    return float(args["r"]) * np.tanh(xs[0])


def _tanh_bwd(xs, y, gy, P, args):
    r = float(args["r"])
    t = y / r
    return [gy * r * (1.0 - t * t)], {}


def _sigmoid_fwd(xs, P, args):
    x = xs[0]
    # two-branch form avoids overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_bwd(xs, y, gy, P, args):
    return [gy * y * (1.0 - y)], {}


def _concat_shape(shapes, args):
    if len(shapes) < 2:
        raise ShapeError("concat needs at least two inputs")
    sp = shapes[0][1:]
    for s in shapes:
        if s[1:] != sp:
            raise ShapeError(f"concat spatial mismatch {[tuple(s) for s in shapes]}")
    return (sum(s[0] for s in shapes),) + tuple(sp)


def _concat_fwd(xs, P, args):
    return np.concatenate(xs, axis=1)


def _concat_bwd(xs, y, gy, P, args):
    out, at = [], 0
    for x in xs:
        out.append(gy[:, at : at + x.shape[1]])
        at += x.shape[1]
    return out, {}


def _no_params(shapes, args):
    return {}


@dataclass(frozen=True)
class _Kind:
    shape: Callable
    params: Callable
    fwd: Callable
    bwd: Callable
    arity: int = 1  # 0 = variadic


_KINDS = {
    "conv3d": _Kind(_conv_shape, _conv_params, _conv_fwd, _conv_bwd),
    "leaky_relu": _Kind(_same_shape, _no_params, _leaky_fwd, _leaky_bwd),
    "downsample2": _Kind(_down_shape, _no_params, _down_fwd, _down_bwd),
    "upsample2": _Kind(_up_shape, _no_params, _up_fwd, _up_bwd),
    "global_avg_pool": _Kind(_gap_shape, _no_params, _gap_fwd, _gap_bwd),
    "dense": _Kind(_dense_shape, _dense_params, _dense_fwd, _dense_bwd),
    "tanh_scale": _Kind(_same_shape, _no_params, _tanh_fwd, _tanh_bwd),
    "sigmoid": _Kind(_same_shape, _no_params, _sigmoid_fwd, _sigmoid_bwd),
    "concat": _Kind(_concat_shape, _no_params, _concat_fwd, _concat_bwd, arity=0),
}


def infer_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    """Per-node shapes (without batch axis). Raises ShapeError naming the layer."""
    shapes = {"input": tuple(spec.input_shape)}
    for layer in spec.layers:
        kind = _KINDS[layer.kind]
        if kind.arity and len(layer.src) != kind.arity:
            raise ShapeError(f"layer {layer.name!r}: {layer.kind} takes {kind.arity} input(s)")
        try:
            shapes[layer.name] = tuple(kind.shape([shapes[s] for s in layer.src], layer.args))
        except ShapeError as exc:
            raise ShapeError(f"layer {layer.name!r} ({layer.kind}): {exc}") from None
    return shapes


def param_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes = infer_shapes(spec)
    out = {}
    for layer in spec.layers:
        for pname, pshape in _KINDS[layer.kind].params([shapes[s] for s in layer.src], layer.args).items():
            out[f"{layer.name}.{pname}"] = tuple(pshape)
    return out


def init_params(spec: NetworkSpec, seed: int) -> ModelParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, shape)
    return ModelParams(tensors, seed)


def _layer_params(params: ModelParams, layer: Layer) -> dict:
    prefix = layer.name + "."
    return {k[len(prefix):]: v for k, v in params.tensors.items() if k.startswith(prefix)}


@dataclass
class Cache:
    spec: NetworkSpec
    params: ModelParams
    values: dict[str, np.ndarray]


def forward(spec: NetworkSpec, params: ModelParams, x: np.ndarray):
    """Run the network on a batch ``x`` of shape (B, *spec.input_shape).

    Returns ``(outputs, taps, cache)`` where outputs and taps are dicts of
    node name to array.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != tuple(spec.input_shape):
        raise ShapeError(f"input: expected (B, {', '.join(map(str, spec.input_shape))}), got {x.shape}")
    values = {"input": x}
    for layer in spec.layers:
        kind = _KINDS[layer.kind]
        xs = [values[s] for s in layer.src]
        values[layer.name] = kind.fwd(xs, _layer_params(params, layer), layer.args)
    outputs = {n: values[n] for n in spec.outputs}
    taps = {n: values[n] for n in spec.taps}
    return outputs, taps, Cache(spec, params, values)


def backward(cache: Cache, output_grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss, given its gradient w.r.t. some nodes.

    Returns a dict with one entry per parameter tensor plus ``"input"``.
    """
    spec, params, values = cache.spec, cache.params, cache.values
    grads: dict[str, np.ndarray] = {}
    for name, g in output_grads.items():
        if name not in values:
            raise KeyError(f"no node named {name!r}")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != values[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, node has {values[name].shape}")
        grads[name] = grads[name] + g if name in grads else g.copy()

    pgrads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    for layer in reversed(spec.layers):
        gy = grads.pop(layer.name, None)
        if gy is None:
            continue
        xs = [values[s] for s in layer.src]
        gxs, gp = _KINDS[layer.kind].bwd(xs, values[layer.name], gy, _layer_params(params, layer), layer.args)
        for pname, g in gp.items():
            pgrads[f"{layer.name}.{pname}"] += g
        for s, g in zip(layer.src, gxs):
            grads[s] = grads[s] + g if s in grads else g
    pgrads["input"] = grads.get("input", np.zeros_like(values["input"]))
    return pgrads


# --------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.9
    decay_every: int = 10  # epochs; 0 disables decay

    def effective_lr(self, epoch: int) -> float:
        if self.decay_every <= 0:
            return self.lr
        return self.lr * self.decay ** (epoch // self.decay_every)


def adam_init(params: ModelParams, lr: float = 1e-3, **kwargs) -> AdamState:
    return AdamState(
        {k: np.zeros_like(v) for k, v in params.tensors.items()},
        {k: np.zeros_like(v) for k, v in params.tensors.items()},
        lr=lr,
        **kwargs,
    )


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: AdamState, epoch: int = 0):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not mutated."""
    for k, g in grads.items():
        if k in params.tensors and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r}")
    step = state.step + 1
    lr = state.effective_lr(epoch)
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.tensors.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, parameter has {p.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
        new_m[k], new_v[k] = m, v
    new_state = AdamState(
        new_m, new_v, step, state.lr, b1, b2, state.eps, state.decay, state.decay_every
    )
    return ModelParams(new_p, params.seed), new_state


# --------------------------------------------------------------------------
# Gradient verification


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    tolerance: float
    checked: int
    worst_param: str
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance


def kink_signature(cache: Cache) -> bytes:
    """Sign pattern of every leaky-ReLU input: the piece of the piecewise-smooth
    network a forward pass landed in."""
    parts = []
    for layer in cache.spec.layers:
        if layer.kind == "leaky_relu":
            parts.append(np.packbits(cache.values[layer.src[0]] > 0).tobytes())
    return b"".join(parts)


def finite_diff_check(
    loss_and_grads: Callable[[ModelParams], tuple[float, Mapping[str, np.ndarray]]],
    params: ModelParams,
    n_samples: int = 64,
    tolerance: float = 1e-4,
    step: float = 1e-3,
    seed: int = 0,
    floor: float = 1e-8,
    region: Callable[[ModelParams], object] | None = None,
    max_draws: int | None = None,
) -> FiniteDiffReport:
    """Compare analytic gradients with central differences at sampled entries.

    ``loss_and_grads(params)`` returns the scalar loss and the analytic
    parameter gradients. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    Entries are drawn round-robin over tensors, uniformly within each.

    If ``region(params)`` is given (e.g. a :func:`kink_signature`), entries
    whose +/- step perturbations land in different smooth pieces are
    discarded and redrawn, since a central difference across a kink does not
    estimate the derivative.
    """
    base_loss, analytic = loss_and_grads(params)
    rng = np.random.default_rng(seed)
    names = sorted(params.tensors)
    worst, worst_name = 0.0, ""
    checked = skipped = draws = 0
    max_draws = max_draws if max_draws is not None else 20 * n_samples
    while checked < n_samples and draws < max_draws:
        name = names[draws % len(names)]
        draws += 1
        idx = tuple(int(rng.integers(n)) for n in params.tensors[name].shape)
        plus, minus = params.copy(), params.copy()
        plus.tensors[name][idx] += step
        minus.tensors[name][idx] -= step
        if region is not None and region(plus) != region(minus):
            skipped += 1
            continue
        numeric = (loss_and_grads(plus)[0] - loss_and_grads(minus)[0]) / (2 * step)
        a = float(analytic[name][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        checked += 1
        if err >= worst:
            worst, worst_name = err, f"{name}{list(idx)}"
    return FiniteDiffReport(worst, tolerance, checked, worst_name, skipped)


# --------------------------------------------------------------------------
# Persistence


def save_params(directory, spec: NetworkSpec, params: ModelParams) -> None:
    """Write ``manifest.json`` plus one raw little-endian f64 blob per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "spec": spec.to_dict(),
        "seed": params.seed,
        "tensors": {k: list(v.shape) for k, v in sorted(params.tensors.items())},
    }
    for k, v in params.tensors.items():
        np.ascontiguousarray(v, dtype="<f8").tofile(directory / f"{k}.f64")
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_params(directory) -> tuple[NetworkSpec, ModelParams]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = NetworkSpec.from_dict(manifest["spec"])
    expected = param_shapes(spec)
    tensors = {}
    for k, shape in manifest["tensors"].items():
        shape = tuple(shape)
        if expected.get(k) != shape:
            raise ShapeError(f"{k}: manifest shape {shape} does not match spec {expected.get(k)}")
        raw = np.fromfile(directory / f"{k}.f64", dtype="<f8")
        if raw.size != int(np.prod(shape)):
            raise ShapeError(f"{k}: blob holds {raw.size} values, expected {int(np.prod(shape))}")
        tensors[k] = raw.reshape(shape).astype(np.float64)
    if set(tensors) != set(expected):
        raise ShapeError(f"manifest tensors {sorted(tensors)} do not cover spec {sorted(expected)}")
    return spec, ModelParams(tensors, int(manifest.get("seed", 0)))
