"""Shared fixtures and oracle helpers for the test suite."""

import numpy as np

from bitalloc.net import (
    NetworkSpec,
    Sample,
    Tensor,
    conv2d,
    dense,
    flat_weights,
    flatten,
    flatten_grad_map,
    forward_activations,
    global_avg_pool,
    relu,
    sample_loss,
    softmax,
    with_flat_weights,
)
from bitalloc.perturbation import PerturbationTable


def random_tiny_net(seed: int) -> NetworkSpec:
    """Seeded random net (< 500 params), cycling dense / conv+gap / conv+flatten."""
    rng = np.random.default_rng(seed)
    kind = seed % 3
    if kind == 0:
        d0, d1, p = int(rng.integers(4, 9)), int(rng.integers(5, 11)), int(rng.integers(3, 6))
        layers = (
            dense("fc1", rng.normal(0, 1 / np.sqrt(d0), (d1, d0)).astype(np.float32)),
            relu("a1"),
            dense("fc2", rng.normal(0, 1 / np.sqrt(d1), (p, d1)).astype(np.float32)),
            softmax("sm"),
        )
        return NetworkSpec(layers, (d0,), p)
    if kind == 1:
        c, p = int(rng.integers(3, 7)), int(rng.integers(3, 6))
        layers = (
            conv2d("c1", rng.normal(0, 0.4, (c, 2, 3, 3)).astype(np.float32), stride=1, padding=1),
            relu("a1"),
            global_avg_pool("gap"),
            dense("fc", rng.normal(0, 1 / np.sqrt(c), (p, c)).astype(np.float32)),
            softmax("sm"),
        )
        return NetworkSpec(layers, (2, 5, 5), p)
    c, p = int(rng.integers(2, 5)), int(rng.integers(3, 6))
    layers = (
        conv2d("c1", rng.normal(0, 0.4, (c, 1, 3, 3)).astype(np.float32), stride=2, padding=0),
        relu("a1"),
        flatten("fl"),
        dense("fc", rng.normal(0, 0.3, (p, c * 2 * 2)).astype(np.float32)),
        softmax("sm"),
    )
    return NetworkSpec(layers, (1, 5, 5), p)


def random_samples(net: NetworkSpec, count: int, seed: int) -> list[Sample]:
    rng = np.random.default_rng(seed + 9999)
    out = []
    for _ in range(count):
        x = rng.normal(size=net.input_shape).astype(np.float32)
        out.append(Sample(Tensor(x), int(rng.integers(0, net.class_count))))
    return out


def relu_margin(net: NetworkSpec, sample: Sample) -> float:
    """Smallest |pre-activation| feeding any relu; finite differences are
    invalid within a step of a kink."""
    acts = forward_activations(net, sample.input.f64())
    margin = np.inf
    for i, layer in enumerate(net.layers):
        if layer.kind == "relu":
            margin = min(margin, float(np.abs(acts[i]).min()))
    return margin


def fd_loss_grad(net: NetworkSpec, sample: Sample, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the per-sample loss.

    Weights snap to float32 storage, so each entry divides by the realized
    step between the two stored points.
    """
    w0 = flat_weights(net)
    out = np.empty_like(w0)
    for i in range(w0.size):
        wp, wm = w0.copy(), w0.copy()
        wp[i] += step
        wm[i] -= step
        net_p = with_flat_weights(net, wp)
        net_m = with_flat_weights(net, wm)
        realized = flat_weights(net_p)[i] - flat_weights(net_m)[i]
        out[i] = (sample_loss(net_p, sample) - sample_loss(net_m, sample)) / realized
    return out


def grid_search_step(w, bits: int, signed: bool = True, points: int = 2048):
    """Dense grid-search oracle for the MSE-optimal step size.

    Returns (best step, best MSE) over `points` linear candidates spanning
    (0, 2 * max|w|].
    """
    arr = np.asarray(w, dtype=np.float64).reshape(-1)
    amax = float(np.abs(arr).max())
    if amax == 0.0:
        return 1.0, 0.0
    if signed:
        lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    else:
        lo, hi = 0, (1 << bits) - 1
    best_s, best_mse = None, np.inf
    for s in np.linspace(2.0 * amax / points, 2.0 * amax, points):
        q = np.clip(np.copysign(np.floor(np.abs(arr / s) + 0.5), arr), lo, hi) * s
        mse = float(np.mean((arr - q) ** 2))
        if mse < best_mse:
            best_s, best_mse = float(s), mse
    return best_s, best_mse


def table_from_values(layers, bits, values) -> PerturbationTable:
    return PerturbationTable(tuple(layers), tuple(bits), np.asarray(values, dtype=np.float64))


def random_instance(rng: np.random.Generator, max_classes: int = 8, max_items: int = 4):
    """Random MCKP instance via build_instance, so weights follow the
    size-times-bit structure. Always feasible at the minimum bit."""
    from bitalloc.mckp import build_instance

    n_classes = int(rng.integers(1, max_classes + 1))
    n_items = int(rng.integers(2, max_items + 1))
    bits = sorted(rng.choice(np.arange(1, 9), size=n_items, replace=False).tolist())
    layers = [f"layer{i}" for i in range(n_classes)]
    sizes = {name: int(rng.integers(1, 40)) for name in layers}
    values = rng.uniform(0.01, 1.0, size=(n_classes, n_items))
    table = table_from_values(layers, bits, values)
    b_target = float(rng.uniform(bits[0], bits[-1]))
    return build_instance(table, sizes, b_target)


def shared_quadratic_fixtures():
    """(net, samples, named deltas) triples shared by the estimate-vs-oracle
    identity tests: the streamed second-order table and the literal
    Jacobian evaluation must agree on all of them."""
    from bitalloc.perturbation import delta_w_table

    fixtures = []
    for seed, n_samples in ((0, 8), (1, 4), (2, 6), (3, 1)):
        net = random_tiny_net(seed)
        samples = random_samples(net, n_samples, seed)
        deltas = delta_w_table(net, (1, 2, 4, 8))
        fixtures.append((net, samples, deltas))
    return fixtures
