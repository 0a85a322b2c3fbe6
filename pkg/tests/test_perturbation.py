"""Sensitivity tables: closed forms, additivity, determinism, convergence."""

import numpy as np
import pytest

from bitalloc.net import NetworkSpec, Sample, Tensor, dense, forward_activations, softmax
from bitalloc.perturbation import (
    PerturbationTable,
    ProxyKind,
    convergence_profile,
    delta_w_table,
    perturbation_table,
    shuffled_order,
)
from bitalloc.quantizer import delta_w

import util


def single_dense_fixture():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(2, 2)).astype(np.float32)
    net = NetworkSpec((dense("fc", w), softmax("sm")), (2,), 2)
    sample = Sample(Tensor(rng.normal(size=2).astype(np.float32)), 1)
    return net, sample


class TestSecondOrder:
    def test_grid_representable_layer_has_zero_entry(self):
        w = np.array([[-2.0, 1.0], [0.0, -1.0]], dtype=np.float32)
        net = NetworkSpec((dense("fc", w), softmax("sm")), (2,), 2)
        samples = util.random_samples(net, 4, 0)
        table = perturbation_table(net, samples, (1, 2))
        assert table.value("fc", 2) == 0.0  # representable at step 1
        assert table.value("fc", 1) > 0.0  # three distinct magnitudes never fit {-s, 0}

    def test_single_sample_matches_hand_evaluation(self):
        net, sample = single_dense_fixture()
        table = perturbation_table(net, [sample], (1,))
        probs = forward_activations(net, sample.input.f64())[-1]
        g = np.outer(probs - np.array([0.0, 1.0]), sample.input.f64()).reshape(-1)
        dw = delta_w(net.layer("fc").weight.f64().reshape(-1), 1)
        expected = 0.5 * float(g @ dw) ** 2
        assert table.value("fc", 1) == pytest.approx(expected, rel=1e-13)

    def test_additive_over_sample_sets(self):
        net = util.random_tiny_net(0)
        first = util.random_samples(net, 5, 1)
        second = util.random_samples(net, 11, 2)
        bits = (2, 4, 8)
        t1 = perturbation_table(net, first, bits)
        t2 = perturbation_table(net, second, bits)
        t12 = perturbation_table(net, first + second, bits)
        blended = (5 * np.asarray(t1.values) + 11 * np.asarray(t2.values)) / 16
        np.testing.assert_allclose(np.asarray(t12.values), blended, rtol=1e-12, atol=1e-18)

    @pytest.mark.parametrize("proxy", [ProxyKind.SECOND_ORDER, ProxyKind.HESSIAN_FREE])
    def test_non_negative(self, proxy):
        net = util.random_tiny_net(2)
        samples = util.random_samples(net, 6, 3)
        table = perturbation_table(net, samples, (1, 3, 6), proxy)
        assert (np.asarray(table.values) >= 0).all()

    def test_bit_32_not_special_cased(self):
        net = util.random_tiny_net(0)
        samples = util.random_samples(net, 3, 0)
        table = perturbation_table(net, samples, (2, 32))
        # Random weights are never exactly on a 32-bit grid, so the value is
        # tiny but strictly positive.
        for layer in table.layers:
            assert 0.0 < table.value(layer, 32) < table.value(layer, 2)

    def test_complete_over_layers_and_bits(self):
        net = util.random_tiny_net(1)
        samples = util.random_samples(net, 2, 1)
        bits = (1, 2, 3)
        table = perturbation_table(net, samples, bits)
        assert table.layers == tuple(l.name for l in net.weighted_layers())
        assert table.bits == bits
        assert np.asarray(table.values).shape == (len(table.layers), 3)

    def test_empty_samples_rejected(self):
        net = util.random_tiny_net(0)
        with pytest.raises(ValueError, match="at least one"):
            perturbation_table(net, [], (2,))
        with pytest.raises(ValueError):
            perturbation_table(net, util.random_samples(net, 1, 0), ())


class TestOtherProxies:
    def test_first_order_is_abs_mean_gradient_dot(self):
        net, sample = single_dense_fixture()
        samples = [sample] + util.random_samples(net, 3, 7)
        table = perturbation_table(net, samples, (2,), ProxyKind.FIRST_ORDER)
        from bitalloc.net import per_sample_loss_grad

        mean_g = np.mean(
            [per_sample_loss_grad(net, s)["fc"] for s in samples], axis=0
        )
        dw = delta_w(net.layer("fc").weight.f64().reshape(-1), 2)
        assert table.value("fc", 2) == pytest.approx(abs(float(mean_g @ dw)), rel=1e-12)

    def test_hessian_free_is_half_squared_norm(self):
        net, _ = single_dense_fixture()
        samples = util.random_samples(net, 2, 8)
        table = perturbation_table(net, samples, (3,), ProxyKind.HESSIAN_FREE)
        dw = delta_w(net.layer("fc").weight.f64().reshape(-1), 3)
        assert table.value("fc", 3) == pytest.approx(0.5 * float(dw @ dw), rel=1e-13)

    def test_combined_is_first_plus_second(self):
        net, _ = single_dense_fixture()
        samples = util.random_samples(net, 4, 9)
        bits = (1, 2)
        first = np.asarray(perturbation_table(net, samples, bits, ProxyKind.FIRST_ORDER).values)
        second = np.asarray(perturbation_table(net, samples, bits, ProxyKind.SECOND_ORDER).values)
        combined = np.asarray(perturbation_table(net, samples, bits, ProxyKind.COMBINED).values)
        np.testing.assert_allclose(combined, first + second, rtol=1e-14)

    def test_proxy_parse(self):
        assert ProxyKind.parse("hessian-free") is ProxyKind.HESSIAN_FREE
        with pytest.raises(ValueError, match="unknown proxy"):
            ProxyKind.parse("third-order")


class TestDeterminism:
    def test_bitwise_repeatable(self):
        net = util.random_tiny_net(0)
        samples = util.random_samples(net, 70, 4)  # spans multiple chunks
        a = perturbation_table(net, samples, (2, 5))
        b = perturbation_table(net, samples, (2, 5))
        np.testing.assert_array_equal(np.asarray(a.values), np.asarray(b.values))

    def test_thread_count_does_not_change_deterministic_result(self):
        net = util.random_tiny_net(2)
        samples = util.random_samples(net, 70, 5)
        one = perturbation_table(net, samples, (2, 4), threads=1)
        two = perturbation_table(net, samples, (2, 4), threads=3)
        np.testing.assert_array_equal(np.asarray(one.values), np.asarray(two.values))

    def test_nondeterministic_mode_agrees_within_roundoff(self):
        net = util.random_tiny_net(2)
        samples = util.random_samples(net, 70, 5)
        base = perturbation_table(net, samples, (2, 4))
        loose = perturbation_table(
            net, samples, (2, 4), threads=3, deterministic=False
        )
        np.testing.assert_allclose(
            np.asarray(loose.values), np.asarray(base.values), rtol=1e-12
        )


class TestConvergenceProfile:
    def test_single_checkpoint_equals_direct_table(self):
        net = util.random_tiny_net(0)
        samples = util.random_samples(net, 40, 6)
        profile = convergence_profile(net, samples, (2, 4), [40, 40], seed=3)
        assert list(profile) == [40]
        order = shuffled_order(40, 3)
        direct = perturbation_table(net, [samples[i] for i in order], (2, 4))
        np.testing.assert_array_equal(
            np.asarray(profile[40].values), np.asarray(direct.values)
        )

    def test_duplicated_samples_give_equal_tables(self):
        # Place two copies of each base sample so that the shuffled stream is
        # the base set followed by the base set again.
        net = util.random_tiny_net(1)
        base = util.random_samples(net, 12, 7)
        perm = shuffled_order(24, seed=5)
        arranged = [None] * 24
        for i, target in enumerate(perm):
            arranged[target] = base[i % 12]
        profile = convergence_profile(net, arranged, (2, 4), [12, 24], seed=5)
        np.testing.assert_allclose(
            np.asarray(profile[12].values),
            np.asarray(profile[24].values),
            rtol=1e-13,
        )

    def test_checkpoint_beyond_dataset_fails(self):
        net = util.random_tiny_net(0)
        samples = util.random_samples(net, 8, 8)
        with pytest.raises(ValueError, match="exceeds"):
            convergence_profile(net, samples, (2,), [4, 16])
        with pytest.raises(ValueError, match="ascending"):
            convergence_profile(net, samples, (2,), [8, 4])

    def test_small_subsets_spread_wider_than_bootstrap(self):
        # Estimates from disjoint 64-sample subsets scatter more than
        # bootstrap means of the full 512-sample set.
        net = util.random_tiny_net(0)
        samples = util.random_samples(net, 512, 10)
        bits = (2, 4)
        deltas = delta_w_table(net, bits)
        per_sample = np.stack(
            [
                np.asarray(perturbation_table(net, [s], bits, deltas=deltas).values)
                for s in samples
            ]
        )
        disjoint = np.stack(
            [per_sample[i * 64 : (i + 1) * 64].mean(axis=0) for i in range(8)]
        )
        rng = np.random.default_rng(11)
        bootstrap = np.stack(
            [
                per_sample[rng.integers(0, 512, size=512)].mean(axis=0)
                for _ in range(10)
            ]
        )
        ref = per_sample.mean(axis=0)
        spread_small = float((disjoint.std(axis=0) / ref).mean())
        spread_boot = float((bootstrap.std(axis=0) / ref).mean())
        assert spread_small > spread_boot


class TestCsv:
    def test_round_trip_preserves_values_exactly(self, tmp_path):
        net = util.random_tiny_net(2)
        samples = util.random_samples(net, 6, 12)
        table = perturbation_table(net, samples, (1, 4, 8))
        path = tmp_path / "table.csv"
        table.to_csv(path)
        loaded = PerturbationTable.from_csv(path)
        assert loaded.layers == table.layers
        assert loaded.bits == table.bits
        np.testing.assert_array_equal(
            np.asarray(loaded.values), np.asarray(table.values)
        )

    def test_header_schema(self, tmp_path):
        net = util.random_tiny_net(0)
        table = perturbation_table(net, util.random_samples(net, 1, 0), (2,))
        path = tmp_path / "t.csv"
        table.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "layer,bit,delta_loss"
        assert len(lines) == 1 + len(table.layers)

    def test_incomplete_csv_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("layer,bit,delta_loss\nfc,2,0.5\nfc,4,0.25\nother,2,0.1\n")
        with pytest.raises(ValueError, match="missing"):
            PerturbationTable.from_csv(path)
