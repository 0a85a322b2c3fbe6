"""Minimal feed-forward classifier evaluation with per-sample weight gradients.

Networks are immutable stacks of named layers over float32 tensors. All
arithmetic happens in float64: the downstream sensitivity estimates square
small dot products and are cancellation-prone, so single-precision
accumulation is not good enough even though stored weights are single
precision. Forward and backward are pure functions and safe to call from
multiple threads.

Supported layer kinds: dense, conv2d, relu, flatten, global-avg-pool,
softmax. Layers carry no bias terms. The final layer must be softmax and
its output length must equal the class count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "global-avg-pool", "softmax")
WEIGHTED_KINDS = ("dense", "conv2d")


class Tensor:
    """Immutable dense array: float32 storage, float64 compute views."""

    __slots__ = ("data", "_f64")

    def __init__(self, values, shape=None):
        arr = np.asarray(values, dtype=np.float32)
        if shape is not None:
            try:
                arr = arr.reshape(tuple(shape))
            except ValueError as exc:
                raise ShapeError(
                    f"cannot reshape {arr.size} values into {tuple(shape)}"
                ) from exc
        arr = np.array(arr, dtype=np.float32)  # own, contiguous copy
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(extent <= 0 for extent in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor values must be finite")
        arr.flags.writeable = False
        self.data = arr
        self._f64 = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def f64(self) -> np.ndarray:
        """Read-only float64 view of the stored values (cached)."""
        if self._f64 is None:
            wide = self.data.astype(np.float64)
            wide.flags.writeable = False
            self._f64 = wide
        return self._f64

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network: a kind, an optional weight, conv metadata."""

    name: str
    kind: str
    weight: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in WEIGHTED_KINDS:
            if self.weight is None:
                raise ValueError(f"layer {self.name!r}: {self.kind} requires a weight")
            ndim = 2 if self.kind == "dense" else 4
            if self.weight.data.ndim != ndim:
                raise ShapeError(
                    f"layer {self.name!r}: {self.kind} weight must be {ndim}-d, "
                    f"got shape {self.weight.shape}"
                )
            if self.kind == "conv2d" and self.weight.shape[2] != self.weight.shape[3]:
                raise ShapeError(f"layer {self.name!r}: conv kernel must be square")
        elif self.weight is not None:
            raise ValueError(f"layer {self.name!r}: {self.kind} takes no weight")
        if self.kind == "conv2d" and (self.stride < 1 or self.padding < 0):
            raise ValueError(f"layer {self.name!r}: bad stride/padding")

    @property
    def param_count(self) -> int:
        return 0 if self.weight is None else self.weight.size


def dense(name: str, weight) -> LayerSpec:
    return LayerSpec(name, "dense", weight if isinstance(weight, Tensor) else Tensor(weight))


def conv2d(name: str, weight, stride: int = 1, padding: int = 0) -> LayerSpec:
    w = weight if isinstance(weight, Tensor) else Tensor(weight)
    return LayerSpec(name, "conv2d", w, stride=stride, padding=padding)


def relu(name: str) -> LayerSpec:
    return LayerSpec(name, "relu")


def flatten(name: str) -> LayerSpec:
    return LayerSpec(name, "flatten")


def global_avg_pool(name: str) -> LayerSpec:
    return LayerSpec(name, "global-avg-pool")


def softmax(name: str) -> LayerSpec:
    return LayerSpec(name, "softmax")


def _infer_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind == "dense":
        out_f, in_f = layer.weight.shape
        if shape != (in_f,):
            raise ShapeError(
                f"layer {layer.name!r}: dense expects input ({in_f},), got {shape}"
            )
        return (out_f,)
    if layer.kind == "conv2d":
        if len(shape) != 3:
            raise ShapeError(f"layer {layer.name!r}: conv2d expects (c,h,w), got {shape}")
        c_o, c_i, k, _ = layer.weight.shape
        c, h, w = shape
        if c != c_i:
            raise ShapeError(
                f"layer {layer.name!r}: conv2d expects {c_i} input channels, got {c}"
            )
        h_out = (h + 2 * layer.padding - k) // layer.stride + 1
        w_out = (w + 2 * layer.padding - k) // layer.stride + 1
        if h_out < 1 or w_out < 1:
            raise ShapeError(f"layer {layer.name!r}: kernel does not fit input {shape}")
        return (c_o, h_out, w_out)
    if layer.kind == "relu":
        return shape
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind == "global-avg-pool":
        if len(shape) != 3:
            raise ShapeError(
                f"layer {layer.name!r}: global-avg-pool expects (c,h,w), got {shape}"
            )
        return (shape[0],)
    if layer.kind == "softmax":
        if len(shape) != 1:
            raise ShapeError(f"layer {layer.name!r}: softmax expects a vector, got {shape}")
        return shape
    raise AssertionError(layer.kind)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer stack with a fixed input shape and class count."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    class_count: int
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if not self.layers:
            raise ValueError("network needs at least one layer")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        if self.layers[-1].kind != "softmax":
            raise ValueError("final layer must be softmax")
        if any(l.kind == "softmax" for l in self.layers[:-1]):
            raise ValueError("softmax is only allowed as the final layer")
        if not any(l.kind in WEIGHTED_KINDS for l in self.layers):
            raise ValueError("network needs at least one weighted layer")
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shape = _infer_shape(layer, shape)
            shapes.append(shape)
        if shapes[-1] != (self.class_count,):
            raise ShapeError(
                f"softmax output {shapes[-1]} does not match class count {self.class_count}"
            )
        object.__setattr__(self, "shapes", tuple(shapes))

    def weighted_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind in WEIGHTED_KINDS)

    def layer_sizes(self) -> dict[str, int]:
        return {l.name: l.param_count for l in self.weighted_layers()}

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)


@dataclass(frozen=True)
class Sample:
    """A single calibration example: input tensor plus ground-truth index."""

    input: Tensor
    label: int

    def __post_init__(self):
        if not isinstance(self.label, (int, np.integer)) or self.label < 0:
            raise ValueError(f"label must be a non-negative integer, got {self.label!r}")
        object.__setattr__(self, "label", int(self.label))


def _conv_patches(x: np.ndarray, k: int, stride: int, padding: int):
    """im2col: (c_i, h, w) -> (c_i * k * k, h_out * w_out) plus output dims."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    c_i, h_out, w_out = win.shape[:3]
    return win.transpose(0, 3, 4, 1, 2).reshape(c_i * k * k, h_out * w_out), (h_out, w_out)


def _layer_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    if layer.kind == "dense":
        return layer.weight.f64() @ x
    if layer.kind == "conv2d":
        c_o, c_i, k, _ = layer.weight.shape
        patches, (h_out, w_out) = _conv_patches(x, k, layer.stride, layer.padding)
        out = layer.weight.f64().reshape(c_o, -1) @ patches
        return out.reshape(c_o, h_out, w_out)
    if layer.kind == "relu":
        return np.maximum(x, 0.0)
    if layer.kind == "flatten":
        return x.reshape(-1)
    if layer.kind == "global-avg-pool":
        return x.mean(axis=(1, 2))
    if layer.kind == "softmax":
        z = x - x.max()
        e = np.exp(z)
        return e / e.sum()
    raise AssertionError(layer.kind)


def forward_activations(net: NetworkSpec, x: np.ndarray) -> list[np.ndarray]:
    """Run the network, returning [input, out_1, ..., out_L] in float64."""
    acts = [np.asarray(x, dtype=np.float64)]
    for layer in net.layers:
        acts.append(_layer_forward(layer, acts[-1]))
    return acts


def forward(net: NetworkSpec, x: Tensor) -> Tensor:
    """Evaluate the network on one input; returns the probability vector."""
    x_arr = x.f64() if isinstance(x, Tensor) else Tensor(x).f64()
    if x_arr.shape != net.input_shape:
        raise ShapeError(
            f"input shape {x_arr.shape} does not match network input {net.input_shape}"
        )
    return Tensor(forward_activations(net, x_arr)[-1])


def backprop_from_logits(
    net: NetworkSpec, acts: list[np.ndarray], dlogits: np.ndarray
) -> dict[str, np.ndarray]:
    """Propagate a gradient seeded at the softmax input back to all weights.

    Returns flattened float64 weight gradients keyed by layer name;
    unweighted layers are absent.
    """
    grads: dict[str, np.ndarray] = {}
    g = np.asarray(dlogits, dtype=np.float64)
    for idx in range(len(net.layers) - 2, -1, -1):
        layer = net.layers[idx]
        a_in = acts[idx]
        if layer.kind == "dense":
            grads[layer.name] = np.outer(g, a_in).reshape(-1)
            g = layer.weight.f64().T @ g
        elif layer.kind == "conv2d":
            c_o, c_i, k, _ = layer.weight.shape
            st, pad = layer.stride, layer.padding
            patches, (h_out, w_out) = _conv_patches(a_in, k, st, pad)
            g2 = g.reshape(c_o, -1)
            grads[layer.name] = (g2 @ patches.T).reshape(-1)
            dpatch = (layer.weight.f64().reshape(c_o, -1).T @ g2).reshape(
                c_i, k, k, h_out, w_out
            )
            h_pad, w_pad = a_in.shape[1] + 2 * pad, a_in.shape[2] + 2 * pad
            dxp = np.zeros((c_i, h_pad, w_pad))
            for ki in range(k):
                for kj in range(k):
                    dxp[:, ki : ki + st * h_out : st, kj : kj + st * w_out : st] += dpatch[
                        :, ki, kj
                    ]
            g = dxp[:, pad : pad + a_in.shape[1], pad : pad + a_in.shape[2]]
        elif layer.kind == "relu":
            g = g * (a_in > 0)
        elif layer.kind == "flatten":
            g = g.reshape(a_in.shape)
        elif layer.kind == "global-avg-pool":
            c, h, w = a_in.shape
            g = np.broadcast_to(g[:, None, None] / (h * w), (c, h, w)).copy()
        else:
            raise AssertionError(layer.kind)
    return grads


def _check_sample(net: NetworkSpec, sample: Sample) -> np.ndarray:
    if sample.label >= net.class_count:
        raise ValueError(
            f"label {sample.label} out of range for {net.class_count} classes"
        )
    x = sample.input.f64()
    if x.shape != net.input_shape:
        raise ShapeError(
            f"input shape {x.shape} does not match network input {net.input_shape}"
        )
    return x


def per_sample_loss_grad(net: NetworkSpec, sample: Sample) -> dict[str, np.ndarray]:
    """Gradient of the cross-entropy loss w.r.t. every layer's flat weights."""
    x = _check_sample(net, sample)
    acts = forward_activations(net, x)
    probs = acts[-1]
    if probs[sample.label] <= 0.0:
        raise NumericError(
            f"predicted probability for class {sample.label} underflowed to zero"
        )
    seed = probs.copy()
    seed[sample.label] -= 1.0  # d(-log f_t)/d(logits) = f - onehot(t)
    return backprop_from_logits(net, acts, seed)


def sample_loss(net: NetworkSpec, sample: Sample) -> float:
    x = _check_sample(net, sample)
    probs = forward_activations(net, x)[-1]
    p_true = probs[sample.label]
    if p_true <= 0.0:
        raise NumericError(
            f"predicted probability for class {sample.label} underflowed to zero"
        )
    return -math.log(p_true)


def mean_loss(net: NetworkSpec, samples) -> float:
    """Mean cross-entropy loss over a non-empty sample collection."""
    samples = list(samples)
    if not samples:
        raise ValueError("mean_loss needs at least one sample")
    return math.fsum(sample_loss(net, s) for s in samples) / len(samples)


def with_weights(net: NetworkSpec, new_weights: dict) -> NetworkSpec:
    """Copy of the network with the named layers' weights replaced.

    Values are reshaped to each layer's weight shape and snap to float32
    storage like any other tensor.
    """
    unknown = set(new_weights) - {l.name for l in net.weighted_layers()}
    if unknown:
        raise KeyError(f"not weighted layers: {sorted(unknown)}")
    layers = []
    for layer in net.layers:
        if layer.name in new_weights:
            value = new_weights[layer.name]
            tensor = value if isinstance(value, Tensor) else Tensor(value, layer.weight.shape)
            if tensor.shape != layer.weight.shape:
                tensor = Tensor(tensor.data, layer.weight.shape)
            layers.append(
                LayerSpec(layer.name, layer.kind, tensor, layer.stride, layer.padding)
            )
        else:
            layers.append(layer)
    return NetworkSpec(tuple(layers), net.input_shape, net.class_count)


def weight_layout(net: NetworkSpec) -> list[tuple[str, int, tuple[int, ...]]]:
    """(name, flat size, shape) for each weighted layer, in network order."""
    return [(l.name, l.param_count, l.weight.shape) for l in net.weighted_layers()]


def flat_weights(net: NetworkSpec) -> np.ndarray:
    """All weighted-layer parameters concatenated into one float64 vector."""
    return np.concatenate([l.weight.f64().reshape(-1) for l in net.weighted_layers()])


def with_flat_weights(net: NetworkSpec, vec: np.ndarray) -> NetworkSpec:
    """Inverse of flat_weights: scatter one long vector back into the layers."""
    vec = np.asarray(vec, dtype=np.float64)
    layout = weight_layout(net)
    total = sum(size for _, size, _ in layout)
    if vec.shape != (total,):
        raise ShapeError(f"expected flat vector of length {total}, got {vec.shape}")
    pieces, offset = {}, 0
    for name, size, shape in layout:
        pieces[name] = Tensor(vec[offset : offset + size], shape)
        offset += size
    return with_weights(net, pieces)


def flatten_grad_map(net: NetworkSpec, grads: dict[str, np.ndarray]) -> np.ndarray:
    """Concatenate a per-layer gradient map into flat_weights order."""
    return np.concatenate([grads[name] for name, _, _ in weight_layout(net)])
