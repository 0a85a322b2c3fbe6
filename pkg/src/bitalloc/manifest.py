"""Run manifests: the on-disk description of a model, its calibration data
and the allocation parameters.

A manifest is a JSON file. Weight files and calibration inputs are raw
little-endian float32 in row-major order; labels are little-endian uint32.
Any training framework can produce these without becoming a dependency.
All paths are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError
from .net import (
    LayerSpec,
    NetworkSpec,
    Sample,
    Tensor,
    LAYER_KINDS,
    WEIGHTED_KINDS,
)
from .perturbation import ProxyKind


@dataclass(frozen=True)
class ManifestLayer:
    name: str
    kind: str
    weights: Path | None = None  # resolved path to the raw float32 file
    shape: tuple[int, ...] | None = None
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Manifest:
    base_dir: Path
    input_shape: tuple[int, ...]
    class_count: int
    layers: tuple[ManifestLayer, ...]
    calibration_inputs: Path
    calibration_labels: Path
    calibration_count: int
    bits: tuple[int, ...]
    b_target: float
    sample_count: int
    seed: int
    proxy: ProxyKind
    deterministic: bool
    output_dir: Path

    def resolved_dict(self) -> dict:
        """JSON-ready echo of the manifest with absolute paths.

        Loading the emitted echo yields an equivalent manifest regardless of
        where it is written.
        """
        layers = []
        for layer in self.layers:
            entry: dict = {"name": layer.name, "kind": layer.kind}
            if layer.weights is not None:
                entry["weights"] = str(layer.weights)
                entry["shape"] = list(layer.shape)
            if layer.kind == "conv2d":
                entry["stride"] = layer.stride
                entry["padding"] = layer.padding
            layers.append(entry)
        return {
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "layers": layers,
            "calibration": {
                "inputs": str(self.calibration_inputs),
                "labels": str(self.calibration_labels),
                "count": self.calibration_count,
            },
            "bits": list(self.bits),
            "b_target": self.b_target,
            "sample_count": self.sample_count,
            "seed": self.seed,
            "proxy": self.proxy.value,
            "deterministic": self.deterministic,
            "output_dir": str(self.output_dir),
        }


def _fail(field_name: str, message: str):
    raise ManifestError(f"manifest field {field_name!r}: {message}")


def _get(data: dict, field_name: str, default=None, required: bool = True):
    if field_name in data:
        return data[field_name]
    if required:
        _fail(field_name, "missing")
    return default


def _int_list(value, field_name: str) -> list[int]:
    if not isinstance(value, (list, tuple)) or not value:
        _fail(field_name, "must be a non-empty list of integers")
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, int):
            _fail(field_name, f"must contain integers, got {v!r}")
        out.append(int(v))
    return out


def _check_file(path: Path, expected_bytes: int, field_name: str) -> None:
    if not path.is_file():
        _fail(field_name, f"file not found: {path}")
    actual = path.stat().st_size
    if actual != expected_bytes:
        _fail(
            field_name,
            f"file {path} holds {actual} bytes but the declared shape needs "
            f"{expected_bytes}",
        )


def load_manifest(path, overrides: dict | None = None) -> Manifest:
    """Read and validate a manifest file; every invariant checked eagerly.

    `overrides` replaces top-level fields (the CLI flag mechanism) before
    validation.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ManifestError(f"manifest {path} must hold a JSON object")
    if overrides:
        data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    base = path.resolve().parent

    input_shape = tuple(_int_list(_get(data, "input_shape"), "input_shape"))
    if any(s < 1 for s in input_shape):
        _fail("input_shape", f"extents must be positive, got {list(input_shape)}")
    class_count = _get(data, "class_count")
    if isinstance(class_count, bool) or not isinstance(class_count, int) or class_count < 2:
        _fail("class_count", f"must be an integer >= 2, got {class_count!r}")

    raw_layers = _get(data, "layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        _fail("layers", "must be a non-empty list")
    layers = []
    seen = set()
    for idx, entry in enumerate(raw_layers):
        where = f"layers[{idx}]"
        if not isinstance(entry, dict):
            _fail(where, "must be an object")
        name = entry.get("name")
        if not isinstance(name, str) or not name or "," in name:
            _fail(f"{where}.name", f"must be a non-empty string without commas, got {name!r}")
        if name in seen:
            _fail(f"{where}.name", f"duplicate layer name {name!r}")
        seen.add(name)
        kind = entry.get("kind")
        if kind not in LAYER_KINDS:
            _fail(f"{where}.kind", f"must be one of {list(LAYER_KINDS)}, got {kind!r}")
        weights = None
        shape = None
        if kind in WEIGHTED_KINDS:
            rel = entry.get("weights")
            if not isinstance(rel, str) or not rel:
                _fail(f"{where}.weights", "weighted layers need a weights file")
            weights = (base / rel).resolve() if not os.path.isabs(rel) else Path(rel)
            shape = tuple(_int_list(entry.get("shape"), f"{where}.shape"))
            want_dims = 2 if kind == "dense" else 4
            if len(shape) != want_dims:
                _fail(f"{where}.shape", f"{kind} weights must be {want_dims}-d, got {list(shape)}")
            _check_file(weights, 4 * int(np.prod(shape)), f"{where}.weights")
        stride = entry.get("stride", 1)
        padding = entry.get("padding", 0)
        if not isinstance(stride, int) or stride < 1:
            _fail(f"{where}.stride", f"must be a positive integer, got {stride!r}")
        if not isinstance(padding, int) or padding < 0:
            _fail(f"{where}.padding", f"must be a non-negative integer, got {padding!r}")
        layers.append(ManifestLayer(name, kind, weights, shape, stride, padding))

    calib = _get(data, "calibration")
    if not isinstance(calib, dict):
        _fail("calibration", "must be an object with inputs/labels/count")
    count = calib.get("count")
    if isinstance(count, bool) or not isinstance(count, int) or count < 1:
        _fail("calibration.count", f"must be a positive integer, got {count!r}")
    inputs_rel = calib.get("inputs")
    labels_rel = calib.get("labels")
    if not isinstance(inputs_rel, str) or not inputs_rel:
        _fail("calibration.inputs", "missing file reference")
    if not isinstance(labels_rel, str) or not labels_rel:
        _fail("calibration.labels", "missing file reference")
    inputs = (base / inputs_rel).resolve() if not os.path.isabs(inputs_rel) else Path(inputs_rel)
    labels = (base / labels_rel).resolve() if not os.path.isabs(labels_rel) else Path(labels_rel)
    _check_file(inputs, 4 * count * int(np.prod(input_shape)), "calibration.inputs")
    _check_file(labels, 4 * count, "calibration.labels")

    bits = _int_list(_get(data, "bits"), "bits")
    if len(set(bits)) != len(bits):
        _fail("bits", f"duplicate entries in {bits}")
    if any(b < 1 or b > 32 for b in bits):
        _fail("bits", f"every bit-width must be in [1, 32], got {bits}")
    bits = tuple(sorted(bits))

    b_target = _get(data, "b_target")
    if isinstance(b_target, bool) or not isinstance(b_target, (int, float)):
        _fail("b_target", f"must be a number, got {b_target!r}")
    b_target = float(b_target)
    if not (bits[0] <= b_target <= bits[-1]):
        _fail(
            "b_target",
            f"{b_target} outside the candidate range [{bits[0]}, {bits[-1]}]",
        )

    sample_count = _get(data, "sample_count", default=min(1024, count), required=False)
    if isinstance(sample_count, bool) or not isinstance(sample_count, int) or sample_count < 1:
        _fail("sample_count", f"must be a positive integer, got {sample_count!r}")
    if sample_count > count:
        _fail(
            "sample_count",
            f"{sample_count} exceeds the {count} available calibration samples",
        )

    seed = _get(data, "seed", default=0, required=False)
    if isinstance(seed, bool) or not isinstance(seed, int):
        _fail("seed", f"must be an integer, got {seed!r}")

    proxy_raw = _get(data, "proxy", default="second-order", required=False)
    try:
        proxy = ProxyKind.parse(proxy_raw)
    except ValueError as exc:
        _fail("proxy", str(exc))

    deterministic = _get(data, "deterministic", default=True, required=False)
    if not isinstance(deterministic, bool):
        _fail("deterministic", f"must be true or false, got {deterministic!r}")

    out_rel = _get(data, "output_dir", default="reports", required=False)
    if not isinstance(out_rel, str) or not out_rel:
        _fail("output_dir", f"must be a non-empty string, got {out_rel!r}")
    output_dir = (base / out_rel).resolve() if not os.path.isabs(out_rel) else Path(out_rel)

    manifest = Manifest(
        base_dir=base,
        input_shape=input_shape,
        class_count=class_count,
        layers=tuple(layers),
        calibration_inputs=inputs,
        calibration_labels=labels,
        calibration_count=count,
        bits=bits,
        b_target=b_target,
        sample_count=sample_count,
        seed=seed,
        proxy=proxy,
        deterministic=deterministic,
        output_dir=output_dir,
    )
    # Building the network validates layer compatibility eagerly.
    build_network(manifest)
    return manifest


def build_network(manifest: Manifest) -> NetworkSpec:
    """Materialize the NetworkSpec described by a manifest."""
    layers = []
    for ml in manifest.layers:
        weight = None
        if ml.kind in WEIGHTED_KINDS:
            raw = np.fromfile(ml.weights, dtype="<f4")
            weight = Tensor(raw, ml.shape)
        try:
            layers.append(
                LayerSpec(ml.name, ml.kind, weight, stride=ml.stride, padding=ml.padding)
            )
        except Exception as exc:
            raise ManifestError(f"layer {ml.name!r}: {exc}") from exc
    try:
        return NetworkSpec(tuple(layers), manifest.input_shape, manifest.class_count)
    except Exception as exc:
        raise ManifestError(f"model does not validate: {exc}") from exc


def load_calibration(manifest: Manifest) -> list[Sample]:
    """Read the full calibration set referenced by a manifest."""
    raw = np.fromfile(manifest.calibration_inputs, dtype="<f4")
    inputs = raw.reshape(manifest.calibration_count, *manifest.input_shape)
    labels = np.fromfile(manifest.calibration_labels, dtype="<u4")
    bad = np.nonzero(labels >= manifest.class_count)[0]
    if bad.size:
        raise ManifestError(
            f"calibration.labels: label {int(labels[bad[0]])} at index {int(bad[0])} "
            f"is out of range for {manifest.class_count} classes"
        )
    return [
        Sample(Tensor(inputs[i]), int(labels[i]))
        for i in range(manifest.calibration_count)
    ]


def select_samples(manifest: Manifest, samples: list[Sample]) -> list[Sample]:
    """Seeded uniform draw (without replacement) of the calibration subset."""
    order = np.random.default_rng(manifest.seed).permutation(len(samples))
    return [samples[i] for i in order[: manifest.sample_count]]
