# Copyright © 2024 MoPD Lab Contributors.

import math
import unittest

import mopd_tests
import numpy as np
from mopd.nn import GatingNetwork, gate_statistics, keep_top, uniform_random_gate
from mopd.nn.layers import gating
from mopd.numerics import finite_difference_gradient, normalize, relative_error, softmax


class TestKeepTop(mopd_tests.MoPDTestCase):
    def test_selects_largest(self):
        masked = keep_top(np.array([0.3, -1.0, 2.0, 0.5]), 2)
        self.assertEqual(masked.mask.tolist(), [False, False, True, True])
        self.assertEqualArray(masked.values, np.array([0.0, 0.0, 2.0, 0.5]))

    def test_ties_keep_lower_index(self):
        masked = keep_top(np.array([1.0, 2.0, 2.0, 0.0]), 1)
        self.assertEqual(masked.mask.tolist(), [False, True, False, False])

        masked = keep_top(np.array([[5.0, 5.0, 5.0]]), 2)
        self.assertEqual(masked.mask.tolist(), [[True, True, False]])

    def test_invalid_t(self):
        with self.assertRaises(ValueError):
            keep_top(np.zeros(3), 0)
        with self.assertRaises(ValueError):
            keep_top(np.zeros(3), 4)


class TestGatingNetwork(mopd_tests.MoPDTestCase):
    def setUp(self):
        super().setUp()
        self.F = np.random.default_rng(30).standard_normal((8, 5))

    def test_sparsity(self):
        gate = mopd_tests.toy_gate(5, 6, 2)
        weights = gate(self.F)
        self.assertEqual(weights.shape, (8, 6))
        self.assertEqualArray(weights.sum(axis=-1), np.ones(8))

        w, idx = gating.gate_forward(gate, self.F[0])
        self.assertEqual(len(idx), 2)
        self.assertEqual(idx.tolist(), sorted(idx.tolist()))
        self.assertEqualArray(w, weights[0])
        self.assertEqual(np.flatnonzero(w).tolist(), idx.tolist())

    def test_keeps_exactly_t_teachers(self):
        for H, T in ((6, 1), (6, 2), (6, 5), (6, 6), (3, 3), (1, 1)):
            with self.subTest(H=H, T=T):
                gate = mopd_tests.toy_gate(5, H, T)
                weights, mask = gating.gate_forward_batch(gate, self.F)
                self.assertEqual(mask.sum(axis=-1).tolist(), [min(T, H)] * 8)
                self.assertTrue(np.all(weights[~mask] == 0.0))
                self.assertEqualArray(weights.sum(axis=-1), np.ones(8))

    def test_kept_count_survives_underflow(self):
        gate = mopd_tests.toy_gate(5, 6, 3, std=1e4)
        weights, mask = gating.gate_forward_batch(gate, self.F)
        self.assertEqual(mask.sum(axis=-1).tolist(), [3] * 8)
        self.assertTrue(np.any((weights > 0).sum(axis=-1) < 3))
        _, idx = gating.gate_forward(gate, self.F[0])
        self.assertEqual(idx.tolist(), np.flatnonzero(mask[0]).tolist())

    def test_dense_when_t_equals_h(self):
        gate = mopd_tests.toy_gate(5, 4, 4)
        logits = normalize(self.F) @ gate.weight
        self.assertEqualArray(gate(self.F), softmax(logits))

    def test_zero_weights_are_uniform(self):
        gate = GatingNetwork(5, 4, 2)
        w, idx = gating.gate_forward(gate, self.F[0])
        self.assertEqual(idx.tolist(), [0, 1])
        self.assertEqualArray(w, np.array([0.5, 0.5, 0.0, 0.0]))

    def test_backward(self):
        gate = mopd_tests.toy_gate(5, 6, 3)
        f = self.F[1]
        upstream = np.random.default_rng(31).standard_normal(6)
        grad = gating.gate_backward(gate, f, upstream)
        self.assertEqual(grad.shape, (5, 6))

        def fn(w):
            trial = GatingNetwork(5, 6, 3)
            trial.update({"weight": w})
            return float(gating.gate_forward(trial, f)[0] @ upstream)

        numeric = finite_difference_gradient(fn, gate.weight, step=1e-6)
        self.assertLess(relative_error(grad, numeric), 1e-5)

        # Columns of unselected teachers receive no gradient.
        _, idx = gating.gate_forward(gate, f)
        unselected = sorted(set(range(6)) - set(idx.tolist()))
        self.assertEqualArray(grad[:, unselected], np.zeros((5, 3)))

    def test_backward_batch_is_sum(self):
        gate = mopd_tests.toy_gate(5, 6, 2)
        upstream = np.random.default_rng(32).standard_normal((8, 6))
        total = gating.gate_backward_batch(gate, self.F, upstream)
        expected = sum(gating.gate_backward(gate, self.F[i], upstream[i]) for i in range(8))
        self.assertEqualArray(total, expected, atol=1e-12)

    def test_statistics(self):
        gate = mopd_tests.toy_gate(5, 4, 2)
        stats = gate.statistics(self.F, noisy_mask=np.array([False, False, True, True]))
        weights = gate(self.F)
        self.assertEqualArray(stats["mean_weight"], weights.mean(axis=0))
        self.assertEqualArray(stats["selection_frequency"].sum(), np.array(2.0))
        self.assertAlmostEqual(stats["noisy_mass"], float(weights[:, 2:].sum(axis=1).mean()))
        self.assertLessEqual(stats["mean_entropy"], math.log(2) + 1e-12)

        stats = gate_statistics(np.array([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0]]))
        self.assertAlmostEqual(stats["mean_entropy"], math.log(2) / 2)
        self.assertEqualArray(stats["selection_frequency"], np.array([1.0, 0.5, 0.0]))
        self.assertNotIn("noisy_mass", stats)


class TestRandomGate(mopd_tests.MoPDTestCase):
    def test_uniform_random_gate(self):
        rng = np.random.default_rng(0)
        weights = uniform_random_gate(5, 2, 100, rng)
        self.assertEqual(weights.shape, (100, 5))
        self.assertTrue(np.all((weights > 0).sum(axis=-1) == 2))
        self.assertEqualArray(weights[weights > 0], np.full(200, 0.5))

        # Every teacher is chosen with frequency T / H.
        freq = (weights > 0).mean(axis=0)
        self.assertTrue(np.all(np.abs(freq - 0.4) < 0.2))

    def test_deterministic(self):
        a = uniform_random_gate(4, 2, 10, np.random.default_rng(7))
        b = uniform_random_gate(4, 2, 10, np.random.default_rng(7))
        self.assertEqualArray(a, b)

    def test_full_selection(self):
        weights = uniform_random_gate(3, 3, 4, np.random.default_rng(1))
        self.assertEqualArray(weights, np.full((4, 3), 1.0 / 3))

    def test_invalid(self):
        with self.assertRaises(ValueError):
            uniform_random_gate(3, 4, 1, np.random.default_rng(0))


if __name__ == "__main__":
    mopd_tests.MoPDTestRunner()
