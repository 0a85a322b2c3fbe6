"""Uniform symmetric fixed-point quantization with MSE-optimal step size.

The grid for bit-width b is s * {-2^(b-1), ..., 2^(b-1)-1} (signed) or
s * {0, ..., 2^b - 1} (unsigned). The step size s is chosen to minimize the
mean squared error between the input vector and its quantized image. The
error-vs-step landscape is piecewise smooth with many shallow local minima,
so the solver brackets the global basin with a coarse sweep and refines it
with golden-section search; a pure local method is not reliable here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
_SWEEP_POINTS = 256
_SWEEP_SAMPLE = 2048  # coarse sweep brackets on a strided subsample this long
_SWEEP_BLOCK_ELEMS = 1 << 22  # cap sweep scratch memory at ~16 MB of float32


@dataclass(frozen=True)
class QuantGrid:
    """A concrete quantization grid: bit-width, signedness, step size."""

    bits: int
    signed: bool
    step: float

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError(f"bit-width must be >= 1, got {self.bits}")
        if not (self.step > 0):
            raise ValueError(f"step size must be positive, got {self.step}")

    def level_bounds(self) -> tuple[int, int]:
        """Lowest and highest integer grid level."""
        if self.signed:
            return -(1 << (self.bits - 1)), (1 << (self.bits - 1)) - 1
        return 0, (1 << self.bits) - 1


@dataclass(frozen=True)
class QuantResult:
    """A quantized vector together with its grid and achieved MSE."""

    values: np.ndarray
    grid: QuantGrid
    mse: float


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round ties to even; the grid definition rounds ties away from zero.
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _as_vector(w) -> np.ndarray:
    arr = np.asarray(w, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("quantizer input must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise NumericError("quantizer input must be finite")
    return arr


def quantize(w, grid: QuantGrid) -> np.ndarray:
    """Map each entry to its nearest grid point (ties away from zero)."""
    arr = _as_vector(w)
    lo, hi = grid.level_bounds()
    return np.clip(_round_half_away(arr / grid.step), lo, hi) * grid.step


def _mse(arr: np.ndarray, step: float, lo: int, hi: int) -> float:
    q = np.clip(_round_half_away(arr / step), lo, hi) * step
    diff = arr - q
    return float(diff @ diff) / arr.size


def _sweep_mse(arr32: np.ndarray, steps: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """MSE for every candidate step, computed in float32 blocks."""
    out = np.empty(steps.size, dtype=np.float64)
    block = max(1, _SWEEP_BLOCK_ELEMS // arr32.size)
    for start in range(0, steps.size, block):
        s = steps[start : start + block, None].astype(np.float32)
        x = arr32[None, :] / s
        np.copysign(np.floor(np.abs(x, out=x) + 0.5, out=x), arr32[None, :], out=x)
        np.clip(x, lo, hi, out=x)
        x *= s
        x -= arr32[None, :]
        np.square(x, out=x)
        out[start : start + block] = x.mean(axis=1, dtype=np.float64)
    return out


def solve_step_size(w, bits: int, signed: bool = True) -> QuantGrid:
    """Find the step size minimizing quantization MSE for the given bit-width.

    All-zero input returns step 1 by convention (any step is optimal and a
    positive step avoids divide-by-zero downstream).
    """
    arr = _as_vector(w)
    if bits < 1:
        raise ValueError(f"bit-width must be >= 1, got {bits}")
    amax = float(np.abs(arr).max())
    if amax == 0.0:
        return QuantGrid(bits, signed, 1.0)

    probe = QuantGrid(bits, signed, 1.0)
    lo, hi = probe.level_bounds()
    max_level = max(hi, -lo)
    s_max = 2.0 * amax / max_level

    # Coarse bracket of the global basin. Bracketing only needs the shape of
    # the error landscape, so large vectors are strided down; the bracket is
    # then refined and the winner re-scored on the full data.
    sweep = np.linspace(s_max / _SWEEP_POINTS, s_max, _SWEEP_POINTS)
    stride = max(1, arr.size // _SWEEP_SAMPLE)
    errs = _sweep_mse(arr[::stride].astype(np.float32), sweep, lo, hi)
    best = int(np.argmin(errs))
    a = sweep[max(best - 1, 0)]
    b = sweep[min(best + 1, _SWEEP_POINTS - 1)]

    # Golden-section refinement inside the bracket.
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1 = _mse(arr, x1, lo, hi)
    f2 = _mse(arr, x2, lo, hi)
    for _ in range(40):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = _mse(arr, x1, lo, hi)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = _mse(arr, x2, lo, hi)
    refined = x1 if f1 <= f2 else x2

    # The refined point should win, but never return anything worse than the
    # coarse sweep or the naive max-scaling step.
    candidates = [float(sweep[best]), float(refined)]
    if signed:
        candidates.append(amax / (1 << (bits - 1)))
    scores = [_mse(arr, s, lo, hi) for s in candidates]
    return QuantGrid(bits, signed, candidates[int(np.argmin(scores))])


def quantize_with_error(w, bits: int, signed: bool = True) -> QuantResult:
    """Quantize with the MSE-optimal step; returns vector, grid and MSE."""
    arr = _as_vector(w)
    grid = solve_step_size(arr, bits, signed)
    values = quantize(arr, grid)
    diff = arr - values
    return QuantResult(values, grid, float(diff @ diff) / arr.size)


def delta_w(w, bits: int, signed: bool = True) -> np.ndarray:
    """Quantization perturbation Q(w, b) - w at the MSE-optimal step size."""
    arr = _as_vector(w)
    return quantize_with_error(arr, bits, signed).values - arr
