"""Layer-wise numpy network engine with explicit per-segment forward/backward.

A model is described by a :class:`ModelProfile` (shapes and cost metadata only).
Any contiguous slice of it can be materialised as a :class:`SegmentState` and run
on its own, so a model can be cut at any layer boundary and the tensors crossing
the cut handled as plain values.

Tensors are float64 numpy arrays with the batch dimension first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import CacheError, ShapeError

LAYER_KINDS = ("dense", "relu", "conv2d-small", "flatten", "softmax-head")
PARAM_KINDS = ("dense", "conv2d-small", "softmax-head")
WIRE_BITWIDTHS = (32, 16, 8, 4, 2, 1)
CYCLES_PER_MAC = 2.0
KERNEL = 3


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validate external input as a finite float64 array."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"shape entries must be positive, got {shape}")
        if math.prod(shape) != arr.size:
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def bytes_of(shape: Sequence[int] | int, bitwidth: int = 32) -> int:
    """Wire size of a dense payload: ceil(n_values * bitwidth / 8)."""
    n = int(shape) if isinstance(shape, (int, np.integer)) else math.prod(int(s) for s in shape)
    return -(-n * int(bitwidth) // 8)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    param_count: int = 0
    fwd_cycles_per_sample: float = 0.0
    bwd_cycles_per_sample: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind not in PARAM_KINDS and self.param_count != 0:
            raise ValueError(f"{self.kind} layers carry no parameters")
        if self.param_count < 0 or self.fwd_cycles_per_sample < 0 or self.bwd_cycles_per_sample < 0:
            raise ValueError("param_count and cycle costs must be >= 0")

    @property
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind in ("dense", "softmax-head"):
            return {"W": (self.out_shape[0], self.in_shape[0]), "b": (self.out_shape[0],)}
        if self.kind == "conv2d-small":
            return {"W": (self.out_shape[0], self.in_shape[0], KERNEL, KERNEL), "b": (self.out_shape[0],)}
        return {}

    @property
    def out_size(self) -> int:
        return math.prod(self.out_shape)

    @property
    def in_size(self) -> int:
        return math.prod(self.in_shape)


def make_layer(kind: str, in_shape: Sequence[int], units: int | None = None,
               fwd_cycles: float | None = None, bwd_cycles: float | None = None) -> LayerSpec:
    """Build a LayerSpec, inferring output shape, parameter count and default costs.

    ``units`` is the output width for dense/softmax-head and the output channel
    count for conv2d-small. Default compute cost is MACs x CYCLES_PER_MAC forward
    and twice that backward; parameter-free layers cost one cycle per element.
    """
    in_shape = tuple(int(s) for s in in_shape)
    if kind in ("dense", "softmax-head"):
        if len(in_shape) != 1:
            raise ShapeError(f"{kind} expects a flat input, got {in_shape}")
        out_shape = (int(units),)
        params = in_shape[0] * out_shape[0] + out_shape[0]
        macs = in_shape[0] * out_shape[0]
    elif kind == "conv2d-small":
        if len(in_shape) != 3 or in_shape[1] < KERNEL or in_shape[2] < KERNEL:
            raise ShapeError(f"conv2d-small expects (C, H>=3, W>=3), got {in_shape}")
        c, h, w = in_shape
        out_shape = (int(units), h - KERNEL + 1, w - KERNEL + 1)
        params = int(units) * c * KERNEL * KERNEL + int(units)
        macs = int(units) * c * KERNEL * KERNEL * out_shape[1] * out_shape[2]
    elif kind == "relu":
        out_shape, params, macs = in_shape, 0, 0
    elif kind == "flatten":
        out_shape, params, macs = (math.prod(in_shape),), 0, 0
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    if macs:
        default_fwd = CYCLES_PER_MAC * macs
    else:
        default_fwd = float(math.prod(in_shape)) if kind == "relu" else 0.0
    fwd = default_fwd if fwd_cycles is None else float(fwd_cycles)
    bwd = 2.0 * default_fwd if bwd_cycles is None else float(bwd_cycles)
    return LayerSpec(kind, in_shape, out_shape, params, fwd, bwd)


@dataclass(frozen=True)
class ModelProfile:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) < 2:
            raise ValueError("a model profile needs at least 2 layers")
        for i in range(len(self.layers) - 1):
            if self.layers[i].out_shape != self.layers[i + 1].in_shape:
                raise ShapeError(
                    f"layer {i} outputs {self.layers[i].out_shape} but layer {i + 1} "
                    f"expects {self.layers[i + 1].in_shape}")

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.layers[0].in_shape

    def cut_shape(self, cut: int) -> tuple[int, ...]:
        """Per-sample shape of the tensor crossing cut ``cut`` (0 = raw input)."""
        if not 0 <= cut <= self.L:
            raise ValueError(f"cut {cut} outside 0..{self.L}")
        return self.input_shape if cut == 0 else self.layers[cut - 1].out_shape

    def cut_size(self, cut: int) -> int:
        return math.prod(self.cut_shape(cut))

    def param_count(self, start: int = 0, stop: int | None = None) -> int:
        stop = self.L if stop is None else stop
        return sum(layer.param_count for layer in self.layers[start:stop])

    def fwd_cycles(self, start: int = 0, stop: int | None = None) -> float:
        stop = self.L if stop is None else stop
        return float(sum(layer.fwd_cycles_per_sample for layer in self.layers[start:stop]))

    def bwd_cycles(self, start: int = 0, stop: int | None = None) -> float:
        stop = self.L if stop is None else stop
        return float(sum(layer.bwd_cycles_per_sample for layer in self.layers[start:stop]))

    def cache_values(self, start: int, stop: int) -> int:
        """Per-sample count of values a segment keeps for its backward pass."""
        return sum(layer.in_size for layer in self.layers[start:stop])


def build_profile(input_shape: Sequence[int], layer_defs: Sequence[dict]) -> ModelProfile:
    """Chain layer definitions ``{"kind": ..., "units": ...}`` from an input shape."""
    layers = []
    shape = tuple(input_shape)
    for i, d in enumerate(layer_defs):
        d = dict(d)
        kind = d.pop("kind")
        try:
            layer = make_layer(kind, shape, units=d.pop("units", None),
                               fwd_cycles=d.pop("fwd_cycles", None), bwd_cycles=d.pop("bwd_cycles", None))
        except (ShapeError, ValueError, TypeError) as exc:
            raise ShapeError(f"layer {i} ({kind}): {exc}") from exc
        if d:
            raise ValueError(f"layer {i} ({kind}): unknown fields {sorted(d)}")
        layers.append(layer)
        shape = layer.out_shape
    return ModelProfile(tuple(layers))


def mlp_profile(in_dim: int, hidden: int, classes: int) -> ModelProfile:
    """Four layers: dense, relu, dense, softmax-head."""
    return build_profile((in_dim,), [
        {"kind": "dense", "units": hidden},
        {"kind": "relu"},
        {"kind": "dense", "units": hidden},
        {"kind": "softmax-head", "units": classes},
    ])


def cnn_profile(side: int, channels: int, classes: int) -> ModelProfile:
    return build_profile((1, side, side), [
        {"kind": "conv2d-small", "units": channels},
        {"kind": "relu"},
        {"kind": "conv2d-small", "units": max(1, channels // 2)},
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "softmax-head", "units": classes},
    ])


# --------------------------------------------------------------------------- state

@dataclass(frozen=True)
class SegmentState:
    """Weights for layers ``[start, stop)`` of ``profile``.

    ``version`` counts SGD steps so a forward cache can be matched to the exact
    weights that produced it.
    """
    profile: ModelProfile
    layer_range: tuple[int, int]
    params: tuple[dict, ...]
    rng_seed: int = 0
    version: int = 0

    def __post_init__(self):
        a, b = self.layer_range
        if not 0 <= a <= b <= self.profile.L:
            raise ValueError(f"bad layer range {self.layer_range} for L={self.profile.L}")
        if len(self.params) != b - a:
            raise ShapeError(f"expected {b - a} parameter dicts, got {len(self.params)}")
        for i, p in zip(range(a, b), self.params):
            want = self.profile.layers[i].param_shapes
            if set(p) != set(want) or any(p[k].shape != want[k] for k in want):
                raise ShapeError(f"layer {i}: parameter shapes do not match {want}")

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        a, b = self.layer_range
        return self.profile.layers[a:b]

    @property
    def empty(self) -> bool:
        return self.layer_range[0] == self.layer_range[1]

    def param_count(self) -> int:
        return self.profile.param_count(*self.layer_range)

    def flat(self) -> np.ndarray:
        parts = [p[k].ravel() for p in self.params for k in sorted(p)]
        return np.concatenate(parts) if parts else np.zeros(0)


def init_layer_params(layer: LayerSpec, seed: int, index: int) -> dict:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, keyed by (seed, layer index)."""
    shapes = layer.param_shapes
    if not shapes:
        return {}
    rng = np.random.default_rng([seed, index])
    fan_in = math.prod(shapes["W"][1:])
    bound = 1.0 / math.sqrt(fan_in)
    return {k: rng.uniform(-bound, bound, size=shapes[k]) for k in ("W", "b")}


def init_segment(profile: ModelProfile, start: int, stop: int, seed: int) -> SegmentState:
    params = tuple(init_layer_params(profile.layers[i], seed, i) for i in range(start, stop))
    return SegmentState(profile, (start, stop), params, rng_seed=seed)


def split_segment(seg: SegmentState, cut: int) -> tuple[SegmentState, SegmentState]:
    """Split a segment at absolute layer index ``cut``."""
    a, b = seg.layer_range
    if not a <= cut <= b:
        raise ValueError(f"cut {cut} outside segment {seg.layer_range}")
    k = cut - a
    return (SegmentState(seg.profile, (a, cut), seg.params[:k], seg.rng_seed, seg.version),
            SegmentState(seg.profile, (cut, b), seg.params[k:], seg.rng_seed, seg.version))


def join_segments(*segs: SegmentState) -> SegmentState:
    for s, t in zip(segs, segs[1:]):
        if s.layer_range[1] != t.layer_range[0]:
            raise ValueError("segments are not contiguous")
    return SegmentState(segs[0].profile, (segs[0].layer_range[0], segs[-1].layer_range[1]),
                        tuple(p for s in segs for p in s.params), segs[0].rng_seed, segs[0].version)


# --------------------------------------------------------------------------- kernels

def _conv_windows(x: np.ndarray) -> np.ndarray:
    # (N, C, H, W) -> (N, C, H-2, W-2, 3, 3)
    return np.lib.stride_tricks.sliding_window_view(x, (KERNEL, KERNEL), axis=(2, 3))


def _layer_forward(layer: LayerSpec, p: dict, x: np.ndarray) -> np.ndarray:
    if layer.kind in ("dense", "softmax-head"):
        return x @ p["W"].T + p["b"]
    if layer.kind == "relu":
        return np.maximum(x, 0.0)
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    # conv2d-small
    y = np.einsum("nchwij,kcij->nkhw", _conv_windows(x), p["W"])
    return y + p["b"][None, :, None, None]


def _layer_backward(layer: LayerSpec, p: dict, x: np.ndarray, g: np.ndarray):
    if layer.kind in ("dense", "softmax-head"):
        return g @ p["W"], {"W": g.T @ x, "b": g.sum(axis=0)}
    if layer.kind == "relu":
        return g * (x > 0), {}
    if layer.kind == "flatten":
        return g.reshape(x.shape), {}
    dW = np.einsum("nchwij,nkhw->kcij", _conv_windows(x), g)
    db = g.sum(axis=(0, 2, 3))
    gp = np.pad(g, ((0, 0), (0, 0), (KERNEL - 1, KERNEL - 1), (KERNEL - 1, KERNEL - 1)))
    dx = np.einsum("nkhwij,kcij->nchw", _conv_windows(gp), p["W"][:, :, ::-1, ::-1])
    return dx, {"W": dW, "b": db}


@dataclass
class ActivationCache:
    """Per-layer inputs recorded by :func:`forward_segment`."""
    layer_range: tuple[int, int]
    version: int
    inputs: list = field(default_factory=list)
    out_shape: tuple = ()
    consumed: bool = False


def forward_segment(seg: SegmentState, x: np.ndarray) -> tuple[np.ndarray, ActivationCache]:
    x = np.asarray(x, dtype=np.float64)
    a, _ = seg.layer_range
    expected = seg.profile.cut_shape(a)
    if x.ndim < 1 or tuple(x.shape[1:]) != tuple(expected):
        raise ShapeError(f"layer {a}: expected input (batch, *{expected}), got {x.shape}")
    cache = ActivationCache(seg.layer_range, seg.version)
    for layer, p in zip(seg.layers, seg.params):
        cache.inputs.append(x)
        x = _layer_forward(layer, p, x)
    cache.out_shape = x.shape
    return x, cache


def backward_segment(seg: SegmentState, cache: ActivationCache | None, grad_out: np.ndarray):
    """Return (grad wrt segment input, per-layer parameter gradients)."""
    if cache is None:
        raise CacheError("backward_segment called without a forward cache")
    if cache.layer_range != seg.layer_range or cache.version != seg.version:
        raise CacheError(
            f"stale cache: recorded for layers {cache.layer_range} v{cache.version}, "
            f"segment is {seg.layer_range} v{seg.version}")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != tuple(cache.out_shape):
        raise ShapeError(f"layer {seg.layer_range[1] - 1}: grad_out shape {grad_out.shape} "
                         f"!= forward output {tuple(cache.out_shape)}")
    grads: list[dict] = [{}] * len(seg.params)
    g = grad_out
    for j in range(len(seg.params) - 1, -1, -1):
        g, grads[j] = _layer_backward(seg.layers[j], seg.params[j], cache.inputs[j], g)
    return g, tuple(grads)


def loss_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient wrt the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


def sgd_step(seg: SegmentState, param_grads: Sequence[dict], lr: float) -> SegmentState:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(param_grads) != len(seg.params):
        raise ShapeError(f"{len(param_grads)} gradient dicts for {len(seg.params)} layers")
    new = []
    for i, (p, g) in enumerate(zip(seg.params, param_grads), start=seg.layer_range[0]):
        if set(p) != set(g) or any(p[k].shape != np.shape(g[k]) for k in p):
            raise ShapeError(f"layer {i}: gradient shapes do not match parameters")
        new.append({k: p[k] - lr * g[k] for k in p})
    return replace(seg, params=tuple(new), version=seg.version + 1)


def weighted_mean(items: Sequence, weights: Sequence[float]):
    """Weighted mean of arrays (or nested dict/tuple structures of arrays).

    Weights are normalised first and accumulated in the given order, so a single
    item comes back bit-identical.
    """
    total = float(sum(weights))
    ws = [float(w) / total for w in weights]
    first = items[0]
    if isinstance(first, dict):
        return {k: weighted_mean([it[k] for it in items], ws) for k in first}
    if isinstance(first, (tuple, list)):
        return type(first)(weighted_mean([it[j] for it in items], ws) for j in range(len(first)))
    acc = ws[0] * items[0]
    for w, it in zip(ws[1:], items[1:]):
        acc = acc + w * it
    return acc


def predict(segments: Sequence[SegmentState], x: np.ndarray) -> np.ndarray:
    for seg in segments:
        x, _ = forward_segment(seg, x)
    return np.argmax(x, axis=1)


def accuracy(segments: Sequence[SegmentState], x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(segments, x) == y))
