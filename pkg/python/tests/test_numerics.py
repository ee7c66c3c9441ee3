# Copyright © 2024 MoPD Lab Contributors.

import math
import unittest

import mopd_tests
import numpy as np
from mopd import numerics
from mopd.numerics import KLDirection, MaskedLogits


class TestSoftmax(mopd_tests.MoPDTestCase):
    def test_plain(self):
        p = numerics.softmax(np.array([0.0, 0.0, 0.0, 0.0]))
        self.assertEqualArray(p, np.full(4, 0.25))

        x = np.array([1.0, 2.0, 3.0])
        expected = np.array([0.09003057317038046, 0.24472847105479767, 0.6652409557748219])
        self.assertEqualArray(numerics.softmax(x), expected, atol=1e-15, rtol=1e-14)

    def test_large_logits_are_stable(self):
        p = numerics.softmax(np.array([1000.0, 1000.0, -1000.0]))
        self.assertEqualArray(p, np.array([0.5, 0.5, 0.0]))

    def test_masked(self):
        logits = MaskedLogits(
            np.array([1.0, 0.0, 3.0, 0.0]), np.array([True, False, True, False])
        )
        p = numerics.softmax(logits)
        self.assertEqual(p[1], 0.0)
        self.assertEqual(p[3], 0.0)
        self.assertAlmostEqual(p.sum(), 1.0, places=14)
        self.assertAlmostEqual(p[2] / p[0], math.exp(2.0), places=10)

    def test_batched(self):
        x = np.random.default_rng(0).standard_normal((5, 7))
        p = numerics.softmax(x)
        self.assertEqualArray(p.sum(axis=-1), np.ones(5))

    def test_empty_support(self):
        logits = MaskedLogits(np.zeros(3), np.zeros(3, dtype=bool))
        with self.assertRaisesRegex(ValueError, "empty support"):
            numerics.softmax(logits)
        with self.assertRaisesRegex(ValueError, "empty support"):
            numerics.softmax(np.zeros(0))

    def test_non_finite(self):
        with self.assertRaises(ValueError):
            numerics.softmax(np.array([0.0, np.nan]))

    def test_mask_shape(self):
        with self.assertRaises(ValueError):
            MaskedLogits(np.zeros(3), np.ones(4, dtype=bool))

    def test_log_softmax(self):
        x = np.array([0.5, -1.0, 2.0])
        self.assertEqualArray(numerics.log_softmax(x), np.log(numerics.softmax(x)))


class TestVectors(mopd_tests.MoPDTestCase):
    def test_normalize(self):
        y = numerics.normalize(np.array([3.0, 4.0]))
        self.assertEqualArray(y, np.array([0.6, 0.8]))

        rows = numerics.normalize(np.array([[1.0, 1.0], [0.0, 2.0]]))
        self.assertEqualArray(np.linalg.norm(rows, axis=-1), np.ones(2))

    def test_degenerate(self):
        with self.assertRaisesRegex(ValueError, "degenerate vector"):
            numerics.normalize(np.zeros(3))
        with self.assertRaisesRegex(ValueError, "degenerate vector"):
            numerics.normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))
        with self.assertRaisesRegex(ValueError, "degenerate vector"):
            numerics.cosine(np.zeros(2), np.ones(2))

    def test_normalize_backward(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(5)
        g = rng.standard_normal(5)
        numeric = numerics.finite_difference_gradient(
            lambda v: float(numerics.normalize(v) @ g), x
        )
        self.assertEqualArray(numerics.normalize_backward(x, g), numeric, atol=1e-8, rtol=1e-6)

    def test_cosine(self):
        self.assertEqual(numerics.cosine(np.array([1.0, 0.0]), np.array([0.0, 2.0])), 0.0)
        self.assertAlmostEqual(numerics.cosine(np.array([1.0, 1.0]), np.array([2.0, 2.0])), 1.0)
        self.assertAlmostEqual(numerics.cosine(np.array([1.0, 1.0]), np.array([-1.0, -1.0])), -1.0)
        with self.assertRaises(ValueError):
            numerics.cosine(np.ones(2), np.ones(3))

    def test_cosine_value_and_scale(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        self.assertAlmostEqual(numerics.cosine(a, b), 0.98386991009990743, places=14)
        rng = np.random.default_rng(6)
        for _ in range(20):
            x, y = rng.standard_normal((2, 5))
            s, t = rng.uniform(1e-3, 1e3, size=2)
            self.assertAlmostEqual(numerics.cosine(s * x, t * y), numerics.cosine(x, y), places=12)


class TestDivergences(mopd_tests.MoPDTestCase):
    def test_entropy(self):
        self.assertAlmostEqual(float(numerics.entropy(np.full(4, 0.25))), math.log(4), places=14)
        self.assertEqual(float(numerics.entropy(np.array([1.0, 0.0, 0.0]))), 0.0)
        self.assertEqualArray(
            numerics.entropy(np.array([[0.5, 0.5], [1.0, 0.0]])),
            np.array([math.log(2), 0.0]),
        )

    def test_kl_values(self):
        p = np.array([0.5, 0.5])
        q = np.array([0.25, 0.75])
        expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
        self.assertAlmostEqual(numerics.kl_divergence(p, q), expected, places=14)
        self.assertEqual(numerics.kl_divergence(p, p), 0.0)

    def test_kl_direction(self):
        p = np.array([0.2, 0.8])
        q = np.array([0.6, 0.4])
        forward = numerics.kl_divergence(p, q, KLDirection.FIRST_ARG_REF)
        reverse = numerics.kl_divergence(p, q, "second_arg_ref")
        self.assertAlmostEqual(reverse, numerics.kl_divergence(q, p), places=14)
        self.assertNotAlmostEqual(forward, reverse, places=6)
        with self.assertRaises(ValueError):
            numerics.kl_divergence(p, q, "sideways")

    def test_kl_zero_reference_entries(self):
        p = np.array([1.0, 0.0])
        q = np.array([0.5, 0.5])
        self.assertAlmostEqual(numerics.kl_divergence(p, q), math.log(2), places=14)

    def test_kl_floor(self):
        p = np.array([0.5, 0.5])
        q = np.array([1.0, 0.0])
        expected = 0.5 * math.log(0.5) + 0.5 * (math.log(0.5) - math.log(numerics.KL_FLOOR))
        value = numerics.kl_divergence(p, q)
        self.assertTrue(math.isfinite(value))
        self.assertAlmostEqual(value, expected, places=10)

    def test_kl_batched(self):
        p = np.array([[0.5, 0.5], [0.1, 0.9]])
        q = np.array([[0.5, 0.5], [0.9, 0.1]])
        out = numerics.kl_divergence(p, q)
        self.assertEqual(out.shape, (2,))
        self.assertEqual(out[0], 0.0)
        self.assertGreater(out[1], 0.0)

    def test_check_distribution(self):
        numerics.check_distribution(np.array([0.3, 0.7]))
        with self.assertRaises(ValueError):
            numerics.check_distribution(np.array([0.3, 0.6]))
        with self.assertRaises(ValueError):
            numerics.check_distribution(np.array([-0.1, 1.1]))
        with self.assertRaises(ValueError):
            numerics.kl_divergence(np.array([0.5, 0.5]), np.array([1.0, 0.0, 0.0]))

    def test_linear_mmd(self):
        p = np.array([0.5, 0.5, 0.0])
        q = np.array([0.0, 0.5, 0.5])
        self.assertAlmostEqual(numerics.linear_mmd(p, q), 0.5, places=14)
        self.assertEqual(numerics.linear_mmd(p, p), 0.0)


class TestHelpers(mopd_tests.MoPDTestCase):
    def test_sequential_sum(self):
        self.assertEqual(numerics.sequential_sum(np.array([1.0, 2.0, 3.5])), 6.5)
        self.assertEqual(numerics.sequential_sum(np.zeros(0)), 0.0)

    def test_argmax_ties(self):
        self.assertEqual(int(numerics.argmax_lowest(np.array([0.1, 0.7, 0.7]))), 1)
        self.assertEqualArray(
            numerics.argmax_lowest(np.array([[2.0, 2.0], [0.0, 1.0]])), np.array([0, 1])
        )

    def test_finite_difference_quadratic(self):
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        x = np.array([0.3, -1.2])
        grad = numerics.finite_difference_gradient(lambda v: 0.5 * v @ A @ v, x)
        self.assertEqualArray(grad, A @ x, atol=1e-8, rtol=1e-8)
        self.assertEqualArray(x, np.array([0.3, -1.2]))

    def test_finite_difference_tree(self):
        params = {"a": np.array([1.0, 2.0]), "b": {"c": np.array([[3.0]])}}
        grads = numerics.finite_difference_tree(
            lambda t: float(np.sum(t["a"] ** 2) + 3 * t["b"]["c"].sum()), params
        )
        self.assertEqualArray(grads["a"], np.array([2.0, 4.0]), atol=1e-7)
        self.assertEqualArray(grads["b"]["c"], np.array([[3.0]]), atol=1e-7)

    def test_finite_difference_errors(self):
        with self.assertRaises(ValueError):
            numerics.finite_difference_gradient(lambda v: 0.0, np.zeros(2), step=0.0)
        with self.assertRaises(ValueError):
            numerics.finite_difference_gradient(lambda v: float("nan"), np.zeros(2))

    def test_relative_error(self):
        self.assertEqual(numerics.relative_error(np.ones(3), np.ones(3)), 0.0)
        self.assertAlmostEqual(
            numerics.relative_error(np.array([1.0, 0.0]), np.array([0.0, 0.0])), 1.0
        )

    def test_as_vector(self):
        self.assertEqualArray(numerics.as_vector([1, 2]), np.array([1.0, 2.0]))
        with self.assertRaises(ValueError):
            numerics.as_vector(np.zeros((2, 2)))
        with self.assertRaises(ValueError):
            numerics.as_vector([1.0], length=2)
        with self.assertRaises(ValueError):
            numerics.as_vector([np.inf])


if __name__ == "__main__":
    mopd_tests.MoPDTestRunner()
