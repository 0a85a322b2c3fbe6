"""Step-size optimality against a dense grid-search oracle, rounding rules,
grid algebra."""

import numpy as np
import pytest

from bitalloc.errors import NumericError
from bitalloc.quantizer import (
    QuantGrid,
    delta_w,
    quantize,
    quantize_with_error,
    solve_step_size,
)

import util


class TestSolveStepSize:
    def test_exactly_representable_vector(self):
        grid = solve_step_size([-2.0, -1.0, 0.0, 1.0], 2)
        assert grid.step == 1.0
        result = quantize_with_error([-2.0, -1.0, 0.0, 1.0], 2)
        assert result.mse == 0.0
        np.testing.assert_array_equal(result.values, [-2.0, -1.0, 0.0, 1.0])

    def test_all_zero_convention(self):
        grid = solve_step_size(np.zeros(10), 3)
        assert grid.step == 1.0
        assert quantize_with_error(np.zeros(10), 3).mse == 0.0

    def test_matches_grid_search_oracle(self):
        rng = np.random.default_rng(42)
        w = rng.normal(size=256)
        mine = quantize_with_error(w, 4).mse
        _, oracle_mse = util.grid_search_step(w, 4)
        assert mine <= oracle_mse * 1.001

    @pytest.mark.parametrize("bits", [1, 2, 3, 5, 8])
    @pytest.mark.parametrize("dist", ["normal", "uniform"])
    def test_oracle_sweep_over_bit_widths(self, bits, dist):
        rng = np.random.default_rng(bits * 100 + (dist == "uniform"))
        w = rng.normal(size=300) if dist == "normal" else rng.uniform(-2, 2, size=300)
        mine = quantize_with_error(w, bits).mse
        _, oracle_mse = util.grid_search_step(w, bits)
        assert mine <= oracle_mse * 1.001

    def test_never_worse_than_naive_max_scaling(self):
        rng = np.random.default_rng(3)
        for bits in (2, 4, 8):
            w = rng.normal(size=128)
            naive = QuantGrid(bits, True, float(np.abs(w).max()) / (1 << (bits - 1)))
            naive_mse = float(np.mean((w - quantize(w, naive)) ** 2))
            assert quantize_with_error(w, bits).mse <= naive_mse

    def test_rejects_empty_and_non_finite(self):
        with pytest.raises(ValueError):
            solve_step_size([], 4)
        with pytest.raises(NumericError):
            solve_step_size([1.0, np.inf], 4)
        with pytest.raises(ValueError):
            solve_step_size([1.0], 0)


class TestQuantize:
    def test_rounding_and_clipping(self):
        out = quantize([-2.4, 0.6, 1.7], QuantGrid(2, True, 1.0))
        np.testing.assert_array_equal(out, [-2.0, 1.0, 1.0])

    def test_grid_points_are_fixed(self):
        grid = QuantGrid(3, True, 0.25)
        w = 0.25 * np.array([-4.0, -1.0, 0.0, 2.0, 3.0])
        np.testing.assert_array_equal(quantize(w, grid), w)

    def test_matches_nearest_level_enumeration(self):
        rng = np.random.default_rng(8)
        w = rng.uniform(-1, 1, size=64)
        grid = solve_step_size(w, 3)
        lo, hi = grid.level_bounds()
        levels = grid.step * np.arange(lo, hi + 1)
        nearest = levels[np.argmin(np.abs(w[:, None] - levels[None, :]), axis=1)]
        np.testing.assert_array_equal(quantize(w, grid), nearest)

    def test_ties_round_away_from_zero(self):
        grid = QuantGrid(3, True, 1.0)
        np.testing.assert_array_equal(
            quantize([0.5, -0.5, 1.5, -1.5], grid), [1.0, -1.0, 2.0, -2.0]
        )

    def test_idempotent(self):
        rng = np.random.default_rng(9)
        w = rng.normal(size=100)
        grid = solve_step_size(w, 4)
        once = quantize(w, grid)
        np.testing.assert_array_equal(quantize(once, grid), once)

    def test_scale_covariance(self):
        rng = np.random.default_rng(10)
        w = rng.normal(size=50)
        grid = QuantGrid(4, True, 0.3)
        for alpha in (2.0, 0.25):  # powers of two scale exactly
            scaled = QuantGrid(4, True, alpha * grid.step)
            np.testing.assert_array_equal(
                quantize(alpha * w, scaled), alpha * quantize(w, grid)
            )
        alpha = 1.7
        scaled = QuantGrid(4, True, alpha * grid.step)
        np.testing.assert_allclose(
            quantize(alpha * w, scaled), alpha * quantize(w, grid), rtol=1e-12
        )

    @pytest.mark.parametrize("bits", [1, 2, 4])
    def test_level_count_bounded(self, bits):
        rng = np.random.default_rng(bits)
        w = rng.normal(size=512)
        out = quantize(w, solve_step_size(w, bits))
        assert len(np.unique(out)) <= 1 << bits

    def test_unsigned_grid(self):
        grid = QuantGrid(2, False, 1.0)
        assert grid.level_bounds() == (0, 3)
        np.testing.assert_array_equal(
            quantize([-0.7, 0.4, 2.2, 9.0], grid), [0.0, 0.0, 2.0, 3.0]
        )


class TestDeltaW:
    def test_representable_weights_have_zero_delta(self):
        np.testing.assert_array_equal(delta_w([-2.0, -1.0, 0.0, 1.0], 2), np.zeros(4))

    def test_subtraction_example(self):
        # With step forced to 1 the perturbation is Q(w) - w entrywise.
        w = np.array([-2.4, 0.6, 1.7])
        q = quantize(w, QuantGrid(2, True, 1.0))
        np.testing.assert_allclose(q - w, [0.4, 0.4, -0.7], atol=1e-15)

    def test_more_bits_shrink_the_perturbation(self):
        rng = np.random.default_rng(21)
        w = rng.normal(size=256)
        assert np.linalg.norm(delta_w(w, 8)) < np.linalg.norm(delta_w(w, 2))
