"""Per-layer loss-increase estimates for every candidate bit-width.

For the second-order proxy, the expected increase in mean loss caused by
quantizing layer l to b bits is estimated as

    (1/2N) * sum_n (g_n[l] . dw[l,b])^2

where g_n[l] is the per-sample loss gradient restricted to layer l and
dw[l,b] is the quantization perturbation of that layer's weights. This uses
the Gauss-Newton curvature of the cross-entropy head and treats layers as
independent (cross-layer curvature discarded), which makes the per-layer,
per-bit table additive over samples.

Streaming is chunked; chunk partial sums are combined in a fixed order in
deterministic mode (the default), so results are bit-identical for any
thread count. The opt-in non-deterministic mode combines chunks in
completion order.
"""

from __future__ import annotations

import enum
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .net import NetworkSpec, Sample, forward_activations, backprop_from_logits
from .quantizer import delta_w

_CHUNK = 32  # fixed reduction granularity; part of the determinism contract

DEFAULT_SAMPLE_COUNT = 1024  # calibration size; estimates converge well before this


class ProxyKind(enum.Enum):
    """Which loss-perturbation estimate to tabulate."""

    SECOND_ORDER = "second-order"
    FIRST_ORDER = "first-order"
    HESSIAN_FREE = "hessian-free"
    COMBINED = "combined"

    @classmethod
    def parse(cls, text: str) -> "ProxyKind":
        for kind in cls:
            if kind.value == text:
                return kind
        raise ValueError(
            f"unknown proxy {text!r}; expected one of {[k.value for k in cls]}"
        )


@dataclass(frozen=True)
class PerturbationTable:
    """Estimated loss increase per (weighted layer, candidate bit-width)."""

    layers: tuple[str, ...]
    bits: tuple[int, ...]
    values: np.ndarray  # shape (len(layers), len(bits)), float64
    sample_count: int | None = None
    seed: int | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (len(self.layers), len(self.bits)):
            raise ShapeError(
                f"table values must be {(len(self.layers), len(self.bits))}, "
                f"got {vals.shape}"
            )
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))

    def value(self, layer: str, bit: int) -> float:
        return float(self.values[self.layers.index(layer), self.bits.index(bit)])

    def entries(self):
        for i, layer in enumerate(self.layers):
            for j, bit in enumerate(self.bits):
                yield layer, bit, float(self.values[i, j])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("layer,bit,delta_loss\n")
            for layer, bit, value in self.entries():
                fh.write(f"{layer},{bit},{value:.17g}\n")

    @classmethod
    def from_csv(cls, path) -> "PerturbationTable":
        layers: list[str] = []
        bits: list[int] = []
        cells: dict[tuple[str, int], float] = {}
        with open(path, newline="") as fh:
            header = fh.readline().strip()
            if header != "layer,bit,delta_loss":
                raise ValueError(f"unexpected table header {header!r} in {path}")
            for line in fh:
                if not line.strip():
                    continue
                layer, bit, value = line.rsplit(",", 2)
                bit = int(bit)
                if layer not in layers:
                    layers.append(layer)
                if bit not in bits:
                    bits.append(bit)
                cells[(layer, bit)] = float(value)
        bits.sort()
        values = np.empty((len(layers), len(bits)))
        for i, layer in enumerate(layers):
            for j, bit in enumerate(bits):
                if (layer, bit) not in cells:
                    raise ValueError(f"table in {path} is missing ({layer}, {bit})")
                values[i, j] = cells[(layer, bit)]
        return cls(tuple(layers), tuple(bits), values)


def delta_w_table(net: NetworkSpec, bits) -> dict[str, dict[int, np.ndarray]]:
    """Quantization perturbations for every (weighted layer, bit) pair.

    Computed once up front; the streaming pass reuses them for every sample.
    """
    bits = _check_bits(bits)
    table: dict[str, dict[int, np.ndarray]] = {}
    for layer in net.weighted_layers():
        w = layer.weight.f64().reshape(-1)
        table[layer.name] = {b: delta_w(w, b) for b in bits}
    return table


def _check_bits(bits) -> tuple[int, ...]:
    bits = tuple(int(b) for b in bits)
    if not bits:
        raise ValueError("candidate bit set must be non-empty")
    if any(b < 1 for b in bits):
        raise ValueError(f"bit-widths must be >= 1, got {bits}")
    if len(set(bits)) != len(bits):
        raise ValueError(f"duplicate bit-widths in {bits}")
    return tuple(sorted(bits))


def _delta_matrices(
    net: NetworkSpec, bits, deltas: dict[str, dict[int, np.ndarray]]
) -> dict[str, np.ndarray]:
    out = {}
    for layer in net.weighted_layers():
        out[layer.name] = np.stack([deltas[layer.name][b] for b in bits])
    return out


def _chunk_sums(net, samples, dmats):
    """Per-chunk accumulation: sum of squared dots and sum of gradients."""
    sq = {name: np.zeros(d.shape[0]) for name, d in dmats.items()}
    gsum = {name: np.zeros(d.shape[1]) for name, d in dmats.items()}
    for sample in samples:
        acts = forward_activations(net, sample.input.f64())
        probs = acts[-1]
        seed = probs.copy()
        seed[sample.label] -= 1.0
        grads = backprop_from_logits(net, acts, seed)
        for name, d in dmats.items():
            g = grads[name]
            dots = d @ g
            sq[name] += dots * dots
            gsum[name] += g
    return sq, gsum


def _stream(net, samples, dmats, threads, deterministic):
    """Sum squared-dot and gradient contributions over all samples.

    Chunks of fixed size are reduced in chunk order when deterministic
    (bit-identical regardless of thread count), else in completion order.
    """
    for sample in samples:
        if sample.label >= net.class_count:
            raise ValueError(
                f"label {sample.label} out of range for {net.class_count} classes"
            )
    chunks = [samples[i : i + _CHUNK] for i in range(0, len(samples), _CHUNK)]
    sq = {name: np.zeros(d.shape[0]) for name, d in dmats.items()}
    gsum = {name: np.zeros(d.shape[1]) for name, d in dmats.items()}

    def fold(partial):
        part_sq, part_g = partial
        for name in sq:
            sq[name] += part_sq[name]
            gsum[name] += part_g[name]

    if threads <= 1:
        for chunk in chunks:
            fold(_chunk_sums(net, chunk, dmats))
    elif deterministic:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for partial in pool.map(lambda c: _chunk_sums(net, c, dmats), chunks):
                fold(partial)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pending = {pool.submit(_chunk_sums, net, c, dmats) for c in chunks}
            while pending:
                done, pending = wait(pending, return_when=FIRST_COMPLETED)
                for fut in done:
                    fold(fut.result())
    return sq, gsum


def _table_values(proxy, bits, dmats, sq, gsum, count, layer_order):
    values = np.zeros((len(layer_order), len(bits)))
    for i, name in enumerate(layer_order):
        d = dmats[name]
        second = sq[name] / (2.0 * count)
        if proxy is ProxyKind.SECOND_ORDER:
            values[i] = second
        elif proxy is ProxyKind.HESSIAN_FREE:
            values[i] = 0.5 * np.einsum("bi,bi->b", d, d)
        else:
            first = np.abs(d @ (gsum[name] / count))
            values[i] = first if proxy is ProxyKind.FIRST_ORDER else first + second
    return values


def perturbation_table(
    net: NetworkSpec,
    samples,
    bits,
    proxy: ProxyKind = ProxyKind.SECOND_ORDER,
    *,
    deltas: dict[str, dict[int, np.ndarray]] | None = None,
    threads: int = 1,
    deterministic: bool = True,
    seed: int | None = None,
) -> PerturbationTable:
    """Estimate the loss increase for every (weighted layer, bit) pair.

    `deltas` may carry precomputed quantization perturbations (from
    delta_w_table) to avoid re-solving step sizes; `seed` is recorded as
    metadata only.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("perturbation_table needs at least one sample")
    bits = _check_bits(bits)
    if deltas is None:
        deltas = delta_w_table(net, bits)
    dmats = _delta_matrices(net, bits, deltas)
    layer_order = [l.name for l in net.weighted_layers()]

    if proxy is ProxyKind.HESSIAN_FREE:
        # No streaming needed: the estimate only looks at the perturbations.
        sq = {name: np.zeros(len(bits)) for name in layer_order}
        gsum = {name: np.zeros(dmats[name].shape[1]) for name in layer_order}
    else:
        sq, gsum = _stream(net, samples, dmats, threads, deterministic)
    values = _table_values(proxy, bits, dmats, sq, gsum, len(samples), layer_order)
    return PerturbationTable(tuple(layer_order), bits, values, len(samples), seed)


def shuffled_order(sample_count: int, seed: int) -> np.ndarray:
    """The calibration shuffle used by convergence_profile (public contract)."""
    return np.random.default_rng(seed).permutation(sample_count)


def convergence_profile(
    net: NetworkSpec,
    samples,
    bits,
    checkpoints,
    proxy: ProxyKind = ProxyKind.SECOND_ORDER,
    *,
    seed: int = 0,
    deltas: dict[str, dict[int, np.ndarray]] | None = None,
    threads: int = 1,
    deterministic: bool = True,
) -> dict[int, PerturbationTable]:
    """Tables on nested prefixes of a seeded shuffle of the samples.

    One streaming pass with snapshots at each checkpoint, so profiling the
    full set costs the same as a single full-table run.
    """
    samples = list(samples)
    bits = _check_bits(bits)
    checkpoints = [int(c) for c in checkpoints]
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    if any(c < 1 for c in checkpoints):
        raise ValueError(f"checkpoints must be >= 1, got {checkpoints}")
    if sorted(checkpoints) != checkpoints:
        raise ValueError(f"checkpoints must be ascending, got {checkpoints}")
    if checkpoints[-1] > len(samples):
        raise ValueError(
            f"checkpoint {checkpoints[-1]} exceeds the {len(samples)} available samples"
        )
    if deltas is None:
        deltas = delta_w_table(net, bits)
    dmats = _delta_matrices(net, bits, deltas)
    layer_order = [l.name for l in net.weighted_layers()]

    order = shuffled_order(len(samples), seed)
    shuffled = [samples[i] for i in order]

    profile: dict[int, PerturbationTable] = {}
    sq = {name: np.zeros(len(bits)) for name in layer_order}
    gsum = {name: np.zeros(dmats[name].shape[1]) for name in layer_order}
    start = 0
    for count in dict.fromkeys(checkpoints):  # dedupe, keep order
        if count > start:
            part_sq, part_g = _stream(
                net, shuffled[start:count], dmats, threads, deterministic
            )
            for name in layer_order:
                sq[name] += part_sq[name]
                gsum[name] += part_g[name]
            start = count
        values = _table_values(proxy, bits, dmats, sq, gsum, count, layer_order)
        profile[count] = PerturbationTable(
            tuple(layer_order), bits, values, count, seed
        )
    return profile
