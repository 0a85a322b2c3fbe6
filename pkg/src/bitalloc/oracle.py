"""Independent ground-truth computations for validating the estimates.

Everything here is deliberately slow and direct: true loss change under
quantization, finite-difference Hessian quadratic forms, a literal
Jacobian-based Gauss-Newton evaluation, and rank-correlation reports
between proxy tables and exact loss changes. Sized for desk fixtures only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.stats import spearmanr

from .errors import BudgetError
from .net import (
    NetworkSpec,
    backprop_from_logits,
    flat_weights,
    flatten_grad_map,
    forward_activations,
    mean_loss,
    weight_layout,
    with_flat_weights,
    with_weights,
)
from .perturbation import ProxyKind, perturbation_table

HESSIAN_PARAM_BUDGET = 500
JACOBIAN_PARAM_BUDGET = 50_000


@dataclass(frozen=True)
class QuantizedNetView:
    """A network with some layers' weights replaced by their quantized values."""

    base: NetworkSpec
    assignment: Mapping[str, int]
    net: NetworkSpec


def quantized_view(net: NetworkSpec, assignment: Mapping[str, int]) -> QuantizedNetView:
    """Materialize quantized weights for the assigned layers; others stay
    full precision."""
    from .quantizer import quantize_with_error

    weighted = {l.name for l in net.weighted_layers()}
    unknown = set(assignment) - weighted
    if unknown:
        raise KeyError(f"assignment names unweighted or unknown layers: {sorted(unknown)}")
    replacements = {}
    for name, bit in assignment.items():
        layer = net.layer(name)
        q = quantize_with_error(layer.weight.f64().reshape(-1), int(bit))
        replacements[name] = q.values.reshape(layer.weight.shape)
    return QuantizedNetView(net, dict(assignment), with_weights(net, replacements))


def exact_loss_perturbation(
    net: NetworkSpec, samples, assignment: Mapping[str, int]
) -> float:
    """True change in mean loss caused by quantizing the assigned layers."""
    samples = list(samples)
    if not assignment:
        return 0.0
    view = quantized_view(net, assignment)
    return mean_loss(view.net, samples) - mean_loss(net, samples)


def mean_loss_gradient(net: NetworkSpec, samples) -> np.ndarray:
    """Gradient of the mean loss w.r.t. all flattened weights."""
    from .net import per_sample_loss_grad

    samples = list(samples)
    total = None
    for sample in samples:
        g = flatten_grad_map(net, per_sample_loss_grad(net, sample))
        total = g if total is None else total + g
    return total / len(samples)


def finite_difference_hessian(
    net: NetworkSpec, samples, step: float = 1e-3
) -> np.ndarray:
    """Raw (unsymmetrized) Hessian of the mean loss by central differences
    of the gradient.

    Weights snap to float32 storage, so each column is divided by the step
    actually realized between the two stored points rather than the nominal
    one. Guarded to tiny nets.
    """
    w0 = flat_weights(net)
    d = w0.size
    if d > HESSIAN_PARAM_BUDGET:
        raise BudgetError(
            f"finite-difference Hessian limited to {HESSIAN_PARAM_BUDGET} "
            f"parameters, net has {d}"
        )
    samples = list(samples)
    hess = np.empty((d, d))
    for j in range(d):
        wp, wm = w0.copy(), w0.copy()
        wp[j] += step
        wm[j] -= step
        net_p = with_flat_weights(net, wp)
        net_m = with_flat_weights(net, wm)
        realized = flat_weights(net_p)[j] - flat_weights(net_m)[j]
        g_p = mean_loss_gradient(net_p, samples)
        g_m = mean_loss_gradient(net_m, samples)
        hess[:, j] = (g_p - g_m) / realized
    return hess


def exact_hessian_quadratic(
    net: NetworkSpec, samples, delta: np.ndarray, step: float = 1e-3
) -> float:
    """0.5 * delta^T H delta with H the symmetrized finite-difference Hessian."""
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if delta.size != flat_weights(net).size:
        raise ValueError(
            f"delta length {delta.size} does not match parameter count "
            f"{flat_weights(net).size}"
        )
    raw = finite_difference_hessian(net, samples, step)
    sym = 0.5 * (raw + raw.T)
    return float(0.5 * delta @ sym @ delta)


def output_jacobian(net: NetworkSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full Jacobian of the softmax output w.r.t. all flattened weights.

    Returns (probs, J) with J of shape (class_count, param_count). One
    backward pass per class, seeded with the softmax Jacobian row
    d f_k / d logits = f_k * (e_k - f).
    """
    d = flat_weights(net).size
    if d > JACOBIAN_PARAM_BUDGET:
        raise BudgetError(
            f"full Jacobian limited to {JACOBIAN_PARAM_BUDGET} parameters, net has {d}"
        )
    acts = forward_activations(net, x)
    probs = acts[-1]
    p = probs.size
    jac = np.empty((p, d))
    for k in range(p):
        seed = -probs[k] * probs
        seed[k] += probs[k]
        jac[k] = flatten_grad_map(net, backprop_from_logits(net, acts, seed))
    return probs, jac


def gauss_newton_reference(net: NetworkSpec, samples, delta: np.ndarray) -> float:
    """Literal Gauss-Newton quadratic form via explicit Jacobians.

    Evaluates (1/2N) * sum_n (J_n delta)^T diag(y_k / f_k^2) (J_n delta)
    with J_n the full output Jacobian of sample n and y the one-hot label.
    Algebraically identical to the streaming second-order estimate; shares
    no code with it beyond the layer backward rules.
    """
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    samples = list(samples)
    if not samples:
        raise ValueError("gauss_newton_reference needs at least one sample")
    total = 0.0
    for sample in samples:
        probs, jac = output_jacobian(net, sample.input.f64())
        jd = jac @ delta
        y = np.zeros(probs.size)
        y[sample.label] = 1.0
        total += float(jd @ (y / probs**2 * jd))
    return total / (2.0 * len(samples))


def layer_delta_to_flat(net: NetworkSpec, name: str, delta: np.ndarray) -> np.ndarray:
    """Embed a single layer's perturbation into the full flat-weight vector."""
    full = np.zeros(flat_weights(net).size)
    offset = 0
    for layer_name, size, _ in weight_layout(net):
        if layer_name == name:
            full[offset : offset + size] = np.asarray(delta, dtype=np.float64).reshape(-1)
            return full
        offset += size
    raise KeyError(name)


def spearman(x, y) -> float:
    """Spearman rank correlation of two equal-length sequences."""
    rho = spearmanr(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    return float(rho.statistic)


@dataclass(frozen=True)
class RankingReport:
    """Proxy-vs-exact loss changes for all single-layer perturbations."""

    layers: tuple[str, ...]
    bits: tuple[int, ...]
    exact: np.ndarray  # (layers, bits)
    proxies: dict[str, np.ndarray]  # proxy value -> (layers, bits)
    per_bit: dict[str, dict[int, float]] | None  # Spearman by bit
    pooled: dict[str, float] | None  # Spearman across all (layer, bit) pairs
    skipped_reason: str | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("layer,bit,proxy,proxy_delta_loss,exact_delta_loss\n")
            for key, values in self.proxies.items():
                for i, layer in enumerate(self.layers):
                    for j, bit in enumerate(self.bits):
                        fh.write(
                            f"{layer},{bit},{key},{values[i, j]:.17g},"
                            f"{self.exact[i, j]:.17g}\n"
                        )


def ranking_fidelity(
    net: NetworkSpec,
    samples,
    bits,
    proxies=(ProxyKind.SECOND_ORDER, ProxyKind.HESSIAN_FREE),
) -> RankingReport:
    """How faithfully each proxy orders layers by true quantization damage.

    Computes the exact loss change for every single-layer, single-bit
    quantization and correlates it with each proxy table. Correlations are
    omitted (report flagged) below three weighted layers, where rank
    correlation is not meaningful.
    """
    from .perturbation import delta_w_table

    samples = list(samples)
    bits = tuple(sorted(int(b) for b in bits))
    layer_names = [l.name for l in net.weighted_layers()]
    deltas = delta_w_table(net, bits)

    exact = np.empty((len(layer_names), len(bits)))
    for i, name in enumerate(layer_names):
        for j, bit in enumerate(bits):
            exact[i, j] = exact_loss_perturbation(net, samples, {name: bit})

    proxy_tables = {}
    for kind in proxies:
        table = perturbation_table(net, samples, bits, kind, deltas=deltas)
        proxy_tables[kind.value] = np.asarray(table.values)

    if len(layer_names) < 3:
        return RankingReport(
            tuple(layer_names), bits, exact, proxy_tables, None, None,
            skipped_reason=f"{len(layer_names)} weighted layers (< 3): "
            "rank correlation undefined",
        )
    per_bit = {
        key: {
            bit: spearman(values[:, j], exact[:, j]) for j, bit in enumerate(bits)
        }
        for key, values in proxy_tables.items()
    }
    pooled = {
        key: spearman(values.reshape(-1), exact.reshape(-1))
        for key, values in proxy_tables.items()
    }
    return RankingReport(tuple(layer_names), bits, exact, proxy_tables, per_bit, pooled)
