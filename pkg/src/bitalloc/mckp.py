"""Bit-width assignment as a multiple-choice knapsack problem.

Each weighted layer is a class; each candidate bit-width is an item with
weight |w| * b (model-size cost in bits) and profit -delta_loss. Exactly one
item per class must be chosen, total weight must stay within the capacity
floor(b_target * total_params), and profit is maximized (equivalently the
summed loss increase is minimized).

greedy_assign is the production solver; dp_exact (pseudo-polynomial) and
exhaustive (full enumeration) are oracles for validating it on small
instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetError, InfeasibleError
from .perturbation import PerturbationTable

DP_CELL_BUDGET = 10_000_000
EXHAUSTIVE_COMBO_BUDGET = 1_000_000


@dataclass(frozen=True)
class MckpItem:
    """One candidate bit-width for one layer."""

    bit: int
    weight: int  # layer params * bit, in bits of model size
    profit: float  # negated estimated loss increase, <= 0 in practice

    @property
    def delta_loss(self) -> float:
        return -self.profit


@dataclass(frozen=True)
class MckpInstance:
    """Classes of items (one class per layer) plus a capacity in bits."""

    layers: tuple[str, ...]
    sizes: tuple[int, ...]
    classes: tuple[tuple[MckpItem, ...], ...]
    capacity: int

    def __post_init__(self):
        if not (len(self.layers) == len(self.sizes) == len(self.classes)):
            raise ValueError("layers, sizes and classes must align")
        if any(not cls for cls in self.classes):
            raise ValueError("every class must be non-empty")

    @property
    def total_params(self) -> int:
        return sum(self.sizes)


@dataclass(frozen=True)
class BitAssignment:
    """One chosen bit-width per layer, with derived size statistics."""

    bits: dict[str, int]
    per_layer_delta: dict[str, float]
    layer_params: dict[str, int]
    total_weight: int
    capacity: int
    total_delta_loss: float
    avg_bits: float
    w_ratio: float


def _assignment(instance: MckpInstance, chosen: list[int]) -> BitAssignment:
    items = [cls[j] for cls, j in zip(instance.classes, chosen)]
    total_weight = sum(item.weight for item in items)
    total_profit = 0.0
    for item in items:  # fixed left-to-right order, matches the solvers
        total_profit += item.profit
    total_params = instance.total_params
    return BitAssignment(
        bits={name: item.bit for name, item in zip(instance.layers, items)},
        per_layer_delta={name: item.delta_loss for name, item in zip(instance.layers, items)},
        layer_params=dict(zip(instance.layers, instance.sizes)),
        total_weight=total_weight,
        capacity=instance.capacity,
        total_delta_loss=-total_profit,
        avg_bits=total_weight / total_params,
        w_ratio=32.0 * total_params / total_weight,
    )


def build_instance(
    table: PerturbationTable, layer_sizes: dict[str, int], b_target: float
) -> MckpInstance:
    """Turn a perturbation table into a knapsack instance.

    The capacity is floored to whole bits so a fractional target average
    bit-width is never exceeded.
    """
    if not (b_target > 0):
        raise ValueError(f"b_target must be positive, got {b_target}")
    missing = [name for name in table.layers if name not in layer_sizes]
    if missing:
        raise ValueError(f"layer_sizes missing entries for {missing}")
    sizes = []
    classes = []
    for i, name in enumerate(table.layers):
        size = int(layer_sizes[name])
        if size < 1:
            raise ValueError(f"layer {name!r} has non-positive size {size}")
        sizes.append(size)
        classes.append(
            tuple(
                MckpItem(bit=b, weight=size * b, profit=-float(table.values[i, j]))
                for j, b in enumerate(table.bits)
            )
        )
    capacity = math.floor(b_target * sum(sizes))
    minimum = sum(cls[0].weight for cls in classes)
    if capacity < minimum:
        raise InfeasibleError(
            f"target average bit-width {b_target} gives capacity {capacity} bits, "
            f"below the all-minimum-bit total of {minimum} bits"
        )
    return MckpInstance(tuple(table.layers), tuple(sizes), tuple(classes), capacity)


def dominance_filter(instance: MckpInstance) -> MckpInstance:
    """Drop items that a lighter, at-least-as-profitable item makes redundant.

    Within each class the survivors have strictly increasing weight and
    strictly increasing profit; on equal profit the lighter (lower-bit) item
    wins. Removing dominated items never changes the optimal value.
    """
    filtered = []
    for cls in instance.classes:
        keep = []
        best = -np.inf
        for item in cls:  # bit order == weight order
            if item.profit > best:
                keep.append(item)
                best = item.profit
        filtered.append(tuple(keep))
    return MckpInstance(instance.layers, instance.sizes, tuple(filtered), instance.capacity)


def _require_filtered(instance: MckpInstance) -> None:
    for name, cls in zip(instance.layers, instance.classes):
        for prev, item in zip(cls, cls[1:]):
            if not (item.weight > prev.weight and item.profit > prev.profit):
                raise ValueError(
                    f"class {name!r} contains dominated items; "
                    "run dominance_filter first"
                )


def greedy_assign(
    instance: MckpInstance,
    criterion: str = "original",
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> BitAssignment:
    """Greedy solver: start every layer at its cheapest surviving bit-width,
    then repeatedly promote the layer with the largest loss reduction per
    added bit of model size, skipping promotions that would exceed capacity.

    `criterion` selects the promotion rule: "original" (largest reduction
    rate), "reversed" (smallest), or "random" (uniform among the fitting
    promotions, driven by `rng`). Ties go to the lowest class index. When a
    list is passed as `trace`, one (layer, bit, total_delta_loss) record is
    appended per promotion.
    """
    if criterion not in ("original", "reversed", "random"):
        raise ValueError(f"unknown criterion {criterion!r}")
    if criterion == "random" and rng is None:
        raise ValueError("random criterion needs an rng")
    _require_filtered(instance)
    current = [0] * len(instance.classes)
    total_weight = sum(cls[0].weight for cls in instance.classes)
    if total_weight > instance.capacity:
        raise InfeasibleError(
            f"all-minimum assignment weighs {total_weight} bits, over the "
            f"capacity of {instance.capacity} bits"
        )
    while True:
        candidates = []  # (class index, reduction per added bit)
        for i, cls in enumerate(instance.classes):
            j = current[i] + 1
            if j >= len(cls):
                continue
            step = cls[j].weight - cls[current[i]].weight
            if total_weight + step > instance.capacity:
                continue
            rate = (cls[j].profit - cls[current[i]].profit) / step
            candidates.append((i, rate))
        if not candidates:
            break
        if criterion == "random":
            pick = candidates[int(rng.integers(len(candidates)))][0]
        else:
            want_max = criterion == "original"
            pick, best_rate = candidates[0]
            for i, rate in candidates[1:]:
                if (rate > best_rate) if want_max else (rate < best_rate):
                    pick, best_rate = i, rate
        cls = instance.classes[pick]
        total_weight += cls[current[pick] + 1].weight - cls[current[pick]].weight
        current[pick] += 1
        if trace is not None:
            partial = _assignment(instance, current)
            trace.append((instance.layers[pick], cls[current[pick]].bit, partial.total_delta_loss))
    return _assignment(instance, current)


def dp_exact(instance: MckpInstance) -> BitAssignment:
    """Provably optimal assignment by dynamic programming over
    (class, residual capacity). Pseudo-polynomial: guarded by a cell budget.
    """
    cap = instance.capacity
    cells = (cap + 1) * len(instance.classes)
    if cells > DP_CELL_BUDGET:
        raise BudgetError(
            f"dp_exact needs {cells} cells (budget {DP_CELL_BUDGET}); "
            "use exhaustive on smaller instances or greedy_assign"
        )
    neg_inf = -np.inf
    dp = np.zeros(cap + 1)
    parents = []
    for cls in instance.classes:
        cand = np.full((len(cls), cap + 1), neg_inf)
        for j, item in enumerate(cls):
            if item.weight <= cap:
                cand[j, item.weight :] = dp[: cap + 1 - item.weight] + item.profit
        choice = np.argmax(cand, axis=0)  # ties -> lowest bit
        dp = np.take_along_axis(cand, choice[None, :], axis=0)[0]
        parents.append(choice.astype(np.int32))
    if not np.isfinite(dp[cap]):
        raise InfeasibleError("no assignment fits the capacity")
    chosen = [0] * len(instance.classes)
    c = cap
    for i in range(len(instance.classes) - 1, -1, -1):
        j = int(parents[i][c])
        chosen[i] = j
        c -= instance.classes[i][j].weight
    return _assignment(instance, chosen)


def exhaustive(instance: MckpInstance) -> BitAssignment:
    """Ground-truth solver: enumerate every combination of items."""
    combos = math.prod(len(cls) for cls in instance.classes)
    if combos > EXHAUSTIVE_COMBO_BUDGET:
        raise BudgetError(
            f"exhaustive would enumerate {combos} combinations "
            f"(budget {EXHAUSTIVE_COMBO_BUDGET})"
        )
    weight_grid = None
    profit_grid = None
    for cls in instance.classes:
        w = np.array([item.weight for item in cls], dtype=np.int64)
        p = np.array([item.profit for item in cls])
        if weight_grid is None:
            weight_grid, profit_grid = w, p
        else:
            weight_grid = np.add.outer(weight_grid, w)
            profit_grid = np.add.outer(profit_grid, p)
    feasible = weight_grid <= instance.capacity
    if not feasible.any():
        raise InfeasibleError("no assignment fits the capacity")
    masked = np.where(feasible, profit_grid, -np.inf)
    flat_best = int(np.argmax(masked))  # first maximum -> lexicographically smallest
    chosen = list(np.unravel_index(flat_best, masked.shape))
    return _assignment(instance, [int(j) for j in chosen])
