"""Deterministic synthetic fixtures: a desk-scale conv classifier plus
Gaussian calibration data, and a ready-to-run workspace on disk.

Used by the test suite and handy for trying the CLI without a real model:

    python -m bitalloc.synth DIR
    bitalloc plan DIR/manifest.json
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from .net import NetworkSpec, Sample, Tensor, conv2d, dense, flatten, relu, softmax

FIXTURE_SEED = 20240601
FIXTURE_INPUT_SHAPE = (3, 8, 8)
FIXTURE_CLASSES = 10

# (name, kind, shape, stride, padding, weight scale gain). Gains are spread
# out so layers differ visibly in both raw quantization error and actual
# loss damage; dense2 is loud but feeds through the quiet dense3, which
# separates size-of-perturbation from size-of-effect.
_FIXTURE_LAYOUT = [
    ("conv1", "conv2d", (8, 3, 3, 3), 1, 1, 1.0),
    ("conv2", "conv2d", (16, 8, 3, 3), 2, 1, 1.2),
    ("conv3", "conv2d", (16, 16, 3, 3), 1, 1, 0.8),
    ("dense1", "dense", (64, 256), 1, 0, 1.0),
    ("dense2", "dense", (32, 64), 1, 0, 3.0),
    ("dense3", "dense", (10, 32), 1, 0, 0.25),
]


def fixture_net(seed: int = FIXTURE_SEED) -> NetworkSpec:
    """The standard desk fixture: 6 weighted layers, ~22k parameters."""
    rng = np.random.default_rng(seed)
    layers = []
    for name, kind, shape, stride, padding, gain in _FIXTURE_LAYOUT:
        fan_in = int(np.prod(shape[1:]))
        w = rng.normal(0.0, gain / np.sqrt(fan_in), size=shape).astype(np.float32)
        if kind == "conv2d":
            layers.append(conv2d(name, w, stride=stride, padding=padding))
        else:
            layers.append(dense(name, w))
        if name != "dense3":
            layers.append(relu(f"act_{name}"))
        if name == "conv3":
            layers.append(flatten("flat"))
    layers.append(softmax("probs"))
    return NetworkSpec(tuple(layers), FIXTURE_INPUT_SHAPE, FIXTURE_CLASSES)


def fixture_samples(
    count: int, seed: int = FIXTURE_SEED + 1, input_shape=FIXTURE_INPUT_SHAPE,
    class_count: int = FIXTURE_CLASSES,
) -> list[Sample]:
    """Gaussian inputs with uniform labels."""
    rng = np.random.default_rng(seed)
    inputs = rng.normal(size=(count, *input_shape)).astype(np.float32)
    labels = rng.integers(0, class_count, size=count)
    return [Sample(Tensor(inputs[i]), int(labels[i])) for i in range(count)]


def tiny_net(seed: int, hidden: int = 6, inputs: int = 5, classes: int = 3) -> NetworkSpec:
    """A small dense net (< 500 params) for finite-difference oracles."""
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0 / np.sqrt(inputs), size=(hidden, inputs)).astype(np.float32)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(classes, hidden)).astype(np.float32)
    return NetworkSpec(
        (dense("fc1", w1), relu("act1"), dense("fc2", w2), softmax("probs")),
        (inputs,),
        classes,
    )


def distill_labels(net: NetworkSpec, samples: list[Sample]) -> list[Sample]:
    """Relabel samples with the network's own top predictions."""
    from .net import forward_activations

    out = []
    for s in samples:
        label = int(np.argmax(forward_activations(net, s.input.f64())[-1]))
        out.append(Sample(s.input, label))
    return out


def train(
    net: NetworkSpec,
    samples: list[Sample],
    steps: int = 200,
    lr: float = 0.01,
) -> NetworkSpec:
    """Full-batch Adam descent on the mean loss; deterministic.

    Used to park fixture nets at a stationary point: the sensitivity
    estimates model a converged network, so validating them against exact
    loss changes is only meaningful near one.
    """
    from .net import flat_weights, with_flat_weights
    from .oracle import mean_loss_gradient

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    w = flat_weights(net).copy()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    current = net
    for step in range(1, steps + 1):
        g = mean_loss_gradient(current, samples)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        w = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        current = with_flat_weights(net, w)
    return current


_TRAINED_CACHE: dict[tuple, tuple[NetworkSpec, list[Sample]]] = {}


def trained_fixture(
    count: int = 256, seed: int = FIXTURE_SEED, steps: int = 200
) -> tuple[NetworkSpec, list[Sample]]:
    """The desk fixture trained to a stationary point on its calibration set.

    Labels are the raw fixture's own top predictions (self-distillation), so
    the task is learnable and the trained mean-loss gradient is tiny.
    Results are cached per (count, seed, steps) within the process.
    """
    key = (count, seed, steps)
    if key not in _TRAINED_CACHE:
        net = fixture_net(seed)
        samples = distill_labels(net, fixture_samples(count, seed + 1))
        _TRAINED_CACHE[key] = (train(net, samples, steps), samples)
    return _TRAINED_CACHE[key]


def write_workspace(
    out_dir,
    *,
    net_seed: int = FIXTURE_SEED,
    data_seed: int = FIXTURE_SEED + 1,
    count: int = 2048,
    sample_count: int = 1024,
    bits=(1, 2, 3, 4, 5, 6, 7, 8),
    b_target: float = 4.0,
    proxy: str = "second-order",
    seed: int = 7,
) -> Path:
    """Write the fixture net, calibration binaries and a manifest to disk.

    Returns the manifest path.
    """
    out = Path(out_dir)
    (out / "weights").mkdir(parents=True, exist_ok=True)
    (out / "data").mkdir(parents=True, exist_ok=True)
    net = fixture_net(net_seed)
    samples = fixture_samples(count, data_seed)

    layer_entries = []
    for layer in net.layers:
        entry = {"name": layer.name, "kind": layer.kind}
        if layer.weight is not None:
            rel = f"weights/{layer.name}.bin"
            layer.weight.data.astype("<f4").tofile(out / rel)
            entry["weights"] = rel
            entry["shape"] = list(layer.weight.shape)
        if layer.kind == "conv2d":
            entry["stride"] = layer.stride
            entry["padding"] = layer.padding
        layer_entries.append(entry)

    inputs = np.stack([s.input.data for s in samples]).astype("<f4")
    labels = np.array([s.label for s in samples], dtype="<u4")
    inputs.tofile(out / "data" / "inputs.bin")
    labels.tofile(out / "data" / "labels.bin")

    manifest = {
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "layers": layer_entries,
        "calibration": {
            "inputs": "data/inputs.bin",
            "labels": "data/labels.bin",
            "count": count,
        },
        "bits": list(bits),
        "b_target": b_target,
        "sample_count": sample_count,
        "seed": seed,
        "proxy": proxy,
        "deterministic": True,
        "output_dir": "reports",
    }
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m bitalloc.synth OUT_DIR", file=sys.stderr)
        return 2
    path = write_workspace(argv[0])
    print(f"wrote synthetic workspace; manifest at {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
