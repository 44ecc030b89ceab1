import unittest

import numpy as np

from pimgpt.numerics import *
from pimgpt.numerics.oracle import error_report, format_report, normal_bf16, ref_gelu


class RoundingTest(unittest.TestCase):

    def test_exact(self):
        self.assertEqual(bf16_round(1.0), 1.0)
        self.assertEqual(bf16_round(-2.5), -2.5)

    def test_ties_to_even(self):
        self.assertEqual(bf16_round(1.0 + 2 ** -8), 1.0, msg='tie between 1 and 1+2^-7 goes to the even mantissa')
        self.assertEqual(bf16_round(1.0 + 3 * 2 ** -8), 1.0 + 2 ** -6)

    def test_nearest(self):
        self.assertEqual(bf16_round(1.0 + 2 ** -8 + 2 ** -12), 1.0 + 2 ** -7)

    def test_overflow(self):
        self.assertEqual(bf16_round(3.5e38), np.inf)

    def test_nan(self):
        self.assertTrue(np.isnan(bf16_round(float('nan'))))

    def test_bits(self):
        self.assertEqual(bf16_bits(1.0), 0x3F80)
        self.assertEqual(bf16_bits(-2.0), 0xC000)
        self.assertEqual(bf16_from_bits(0x4000), 2.0)

    def test_array(self):
        x = bf16_round([1.0, 1.0 + 2 ** -9, 3.0])
        self.assertEqual(x.dtype, np.float32)
        self.assertEqual(list(x), [1.0, 1.0, 3.0])

    def test_ulp(self):
        self.assertEqual(ulp_distance(1.0, 1.0078125), 1)
        self.assertEqual(ulp_distance(0.0, -0.0), 0)
        self.assertEqual(ulp_distance(-1.0, 1.0), 2 * 0x3F80)


class Bf16ValueTest(unittest.TestCase):

    def test_bits(self):
        self.assertEqual(Bf16Value(1.0).bits, 0x3F80)
        self.assertEqual(Bf16Value.from_bits(0xBF80).value, -1.0)

    def test_rounds(self):
        self.assertEqual(Bf16Value(1.0 + 2 ** -9), Bf16Value(1.0))

    def test_numpy(self):
        self.assertEqual(float(np.asarray(Bf16Value(0.5)) * 2), 1.0)
        self.assertEqual(tree_sum([Bf16Value(1.0), Bf16Value(2.0)]), 3.0)


class DivisionTest(unittest.TestCase):

    def test_reciprocal_exact(self):
        for d in (1.0, 2.0, 4.0, 0.25, -8.0):
            self.assertEqual(nr_reciprocal(d), 1.0 / d, msg='1/%g is a power of two' % d)

    def test_divide(self):
        self.assertEqual(nr_divide(3.0, 1.0), 3.0)

    def test_divide_by_zero(self):
        self.assertRaises(ZeroDivisionError, nr_divide, 1.0, 0.0)
        self.assertRaises(ZeroDivisionError, nr_reciprocal, [1.0, 0.0])

    def test_reciprocal_inf(self):
        self.assertEqual(nr_reciprocal(np.inf), 0.0)

    def test_inv_sqrt_domain(self):
        self.assertRaises(ValueError, fast_inv_sqrt, 0.0)
        self.assertRaises(ValueError, fast_inv_sqrt, -4.0)
        self.assertRaises(ValueError, fast_inv_sqrt, np.inf)

    def test_inv_sqrt(self):
        self.assertLessEqual(ulp_distance(fast_inv_sqrt(4.0), 0.5), 1)
        self.assertLessEqual(ulp_distance(fast_inv_sqrt(64.0), 0.125), 1)

    def test_reciprocal_exhaustive(self):
        x = normal_bf16()
        x = x[x < 2.0 ** 126]
        worst = int(np.max(ulp_distance(nr_reciprocal(x), bf16_round(1.0 / x))))
        self.assertLessEqual(worst, 1, msg='reciprocal within 1 ULP over every positive normal input')

    def test_inv_sqrt_exhaustive(self):
        x = normal_bf16()
        worst = int(np.max(ulp_distance(fast_inv_sqrt(x), bf16_round(1.0 / np.sqrt(x)))))
        self.assertLessEqual(worst, 1, msg='inverse square root within 1 ULP over every positive normal input')

    def test_constant(self):
        self.assertEqual(inv_sqrt_constant(64), 0.125)


class TranscendentalTest(unittest.TestCase):

    def test_exp_zero(self):
        self.assertEqual(taylor_exp(0.0), 1.0)

    def test_exp_limits(self):
        self.assertEqual(taylor_exp(-200.0), 0.0)
        self.assertEqual(taylor_exp(200.0), np.inf)

    def test_exp_close(self):
        x = bf16_round(np.linspace(-8, 0, 101))
        got = np.asarray(taylor_exp(x), dtype=np.float64)
        self.assertLess(np.max(np.abs(got - np.exp(x)) / np.exp(x)), 2 ** -5)

    def test_tanh(self):
        self.assertEqual(taylor_tanh(0.0), 0.0)
        self.assertEqual(taylor_tanh(10.0), 1.0)
        self.assertEqual(taylor_tanh(-10.0), -1.0)
        self.assertLessEqual(ulp_distance(taylor_tanh(0.25), np.tanh(0.25)), 2)

    def test_tanh_odd(self):
        x = bf16_round(np.linspace(-4, 4, 81))
        np.testing.assert_array_equal(taylor_tanh(-x), -taylor_tanh(x))

    def test_gelu(self):
        self.assertEqual(gelu(0.0), 0.0)
        x = bf16_round(np.linspace(0.5, 4, 36))
        got = np.asarray(gelu(x), dtype=np.float64)
        self.assertLess(np.max(np.abs(got - ref_gelu(x)) / ref_gelu(x)), 2 ** -5)


class AccumulationTest(unittest.TestCase):

    def test_tree_sum(self):
        self.assertEqual(tree_sum(np.ones(16)), 16.0)
        self.assertEqual(tree_sum(np.ones(40)), 40.0, msg='partial last chunk is zero padded')
        self.assertEqual(tree_sum([]), 0.0)

    def test_tree_sum_rows(self):
        np.testing.assert_array_equal(tree_sum(np.arange(12.0).reshape(3, 4)), [6.0, 22.0, 38.0])

    def test_partial_sum(self):
        self.assertEqual(partial_sum([1.0, 2.0, 3.0]), 6.0)

    def test_round_splits(self):
        self.assertEqual(round_splits(0, 100, 32), [32, 64, 96])
        self.assertEqual(round_splits(30, 10, 32), [2])
        self.assertEqual(round_splits(0, 32, 32), [])

    def test_mac_dot(self):
        self.assertEqual(mac_dot(np.ones(4), [1.0, 2.0, 3.0, 4.0]), 10.0)
        np.testing.assert_array_equal(mac_dot(np.ones(4), np.eye(4)), np.ones(4))

    def test_mac_dot_splits(self):
        x = bf16_round(np.random.default_rng(3).normal(size=64))
        w = bf16_round(np.random.default_rng(4).normal(size=(5, 64)))
        parts = [mac_dot(x[:32], w[:, :32]), mac_dot(x[32:], w[:, 32:])]
        np.testing.assert_array_equal(mac_dot(x, w, splits=[32]), partial_sum(parts))

    def test_mac_dot_shape(self):
        self.assertRaises(ShapeException, mac_dot, np.ones(4), np.ones((2, 5)))


class CompositeTest(unittest.TestCase):

    def test_softmax_uniform(self):
        np.testing.assert_array_equal(softmax(np.zeros(4)), [0.25] * 4)

    def test_softmax_single(self):
        self.assertEqual(softmax([3.0])[0], 1.0)

    def test_softmax_sums(self):
        p = np.asarray(softmax(bf16_round(np.random.default_rng(0).normal(size=(8, 16)))), dtype=np.float64)
        np.testing.assert_allclose(p.sum(axis=-1), np.ones(8), rtol=0.05)

    def test_softmax_empty(self):
        self.assertRaises(ShapeException, softmax, [])

    def test_layernorm_constant(self):
        out = layernorm(np.full(8, 3.0), np.ones(8), np.full(8, 0.5))
        np.testing.assert_array_equal(out, np.full(8, 0.5))

    def test_layernorm_shape(self):
        self.assertRaises(ShapeException, layernorm, np.ones(8), np.ones(4), np.zeros(8))

    def test_layernorm_stats(self):
        x = bf16_round(np.random.default_rng(1).normal(0.0, 1.0, size=768))
        out = np.asarray(layernorm(x, np.ones(768), np.zeros(768)), dtype=np.float64)
        self.assertLess(abs(out.mean()), 0.1)
        self.assertLess(abs(out.std() - 1.0), 0.05)

    def test_attention_one_token(self):
        rng = np.random.default_rng(2)
        q, K, V = (bf16_round(rng.normal(size=s)) for s in ((16,), (1, 16), (1, 16)))
        np.testing.assert_array_equal(attention_head(q, K, V), V[0],
                                          err_msg='a single token gets all the attention weight')

    def test_attention_shape(self):
        self.assertRaises(ShapeException, attention_head, np.ones(16), np.ones((3, 8)), np.ones((3, 16)))


class ErrorReportTest(unittest.TestCase):

    def setUp(self):
        self.rows = error_report(samples=1600, seed=0)

    def test_rows(self):
        names = [r.name for r in self.rows]
        self.assertEqual(names, ['nr_reciprocal', 'fast_inv_sqrt', 'taylor_exp', 'taylor_tanh', 'gelu',
                                 'softmax', 'layernorm'])

    def test_bounds(self):
        rows = dict((r.name, r) for r in self.rows)
        self.assertLessEqual(rows['nr_reciprocal'].max_ulp, 1)
        self.assertLessEqual(rows['fast_inv_sqrt'].max_ulp, 1)
        self.assertEqual(rows['nr_reciprocal'].cases, 252 * 128)

    def test_format(self):
        lines = format_report(self.rows)
        self.assertEqual(len(lines), len(self.rows) + 1)
        self.assertTrue(lines[1].startswith('nr_reciprocal'))


if __name__ == '__main__':
    unittest.main()
