import unittest

import numpy as np

from embedhead.core import tensor as T
from embedhead.core.common import TensorError


class Test_Ops(unittest.TestCase):
    def test_softmax_symmetric(self):
        self.assertTrue(np.allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5]))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        s = T.softmax(T.Tensor(rng.uniform(-30, 30, size=(50, 7)))).data
        self.assertTrue(np.all(np.abs(s.sum(axis=1) - 1) < 1e-9))

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(1)
        z = T.Tensor(rng.uniform(-30, 30, size=(50, 7)))
        diff = T.log_softmax(z).data - np.log(T.softmax(z).data)
        self.assertTrue(np.max(np.abs(diff)) < 1e-9)

    def test_layer_norm_of_constant_is_zero(self):
        out = T.layer_norm(T.Tensor([[3.0, 3.0, 3.0, 3.0]]), np.ones(4), np.zeros(4), 1e-5)
        self.assertTrue(np.all(out.data == 0))

    def test_matmul_identity(self):
        a = np.arange(9.0).reshape(3, 3)
        self.assertTrue(np.array_equal(T.matmul(np.eye(3), a).data, a))

    def test_matmul_shape_mismatch_names_shapes(self):
        with self.assertRaises(TensorError) as ctx:
            T.matmul(np.ones((2, 3)), np.ones((4, 5)))
        self.assertIn('[2, 3]', str(ctx.exception))
        self.assertIn('[4, 5]', str(ctx.exception))

    def test_add_shape_mismatch(self):
        with self.assertRaises(TensorError):
            T.add(np.ones((2, 3)), np.ones((2, 4)))

    def test_dropout_rate_checked(self):
        rng = np.random.default_rng(0)
        for rate in (-0.1, 1.0, 1.5):
            with self.assertRaises(TensorError):
                T.dropout(T.Tensor(np.ones(4)), rate, True, rng)

    def test_dropout_eval_is_identity(self):
        x = T.Tensor(np.arange(6.0))
        self.assertIs(T.dropout(x, 0.5, False, None), x)

    def test_dropout_scales_kept_units(self):
        out = T.dropout(T.Tensor(np.ones(1000)), 0.2, True, np.random.default_rng(0)).data
        kept = out[out != 0]
        self.assertTrue(np.allclose(kept, 1.25))

    def test_gelu_values(self):
        out = T.gelu(T.Tensor([0.0, 1.0, -1.0])).data
        self.assertEqual(out[0], 0.0)
        self.assertAlmostEqual(out[1], 0.8411919906, places=8)
        self.assertAlmostEqual(out[2], -0.1588080094, places=8)

    def test_debug_mode_trips_on_non_finite(self):
        T.set_debug(True)
        try:
            with self.assertRaises(TensorError):
                with np.errstate(over='ignore'):
                    T.exp(T.Tensor([1000.0]))
        finally:
            T.set_debug(False)


class Test_Backward(unittest.TestCase):
    def test_square(self):
        x = T.Tensor(3.0, requires_grad=True)
        T.backward(T.mul(x, x))
        self.assertEqual(x.grad, 6.0)

    def test_sum_of_two(self):
        x, y = T.Tensor(1.5, requires_grad=True), T.Tensor(-2.0, requires_grad=True)
        T.backward(T.add(x, y))
        self.assertEqual((x.grad, y.grad), (1.0, 1.0))

    def test_reused_subexpression_accumulates(self):
        x = T.Tensor(3.0, requires_grad=True)
        sq = T.mul(x, x)
        T.backward(T.add(sq, sq))
        self.assertEqual(x.grad, 12.0)

    def test_unreachable_parameter_keeps_zero_grad(self):
        x, unused = T.Tensor([1.0, 2.0], requires_grad=True), T.Tensor([5.0], requires_grad=True)
        T.backward(T.reduce_sum(x))
        self.assertTrue(np.array_equal(unused.grad, [0.0]))

    def test_non_scalar_root_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with self.assertRaises(TensorError):
            T.backward(T.scale(x, 2.0))

    def test_linearity_across_tapes(self):
        rng = np.random.default_rng(5)
        data = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))

        def grad_of(build):
            x = T.Tensor(data.copy(), requires_grad=True)
            T.backward(build(x))
            return x.grad

        f = lambda x: T.reduce_sum(T.gelu(T.matmul(x, w)))
        g = lambda x: T.reduce_mean(T.softplus(x))
        both = grad_of(lambda x: T.add(f(x), g(x)))
        self.assertTrue(np.allclose(both, grad_of(f) + grad_of(g), rtol=0, atol=1e-12))

    def test_forward_backward_deterministic(self):
        def run():
            rng = np.random.default_rng(11)
            x = T.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
            out = T.reduce_sum(T.dropout(T.gelu(x), 0.3, True, rng))
            T.backward(out)
            return out.item(), x.grad.tobytes()
        self.assertEqual(run(), run())


class Test_Finite_Differences(unittest.TestCase):
    def test_quadratic_form(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 4))
        q = a @ a.T
        x = T.Tensor(rng.standard_normal((1, 4)), requires_grad=True)
        error = T.finite_diff_check(lambda: T.reduce_sum(T.mul(T.matmul(x, q), x)), [x])
        self.assertTrue(error < 1e-8, "quadratic form error %s" % error)

    def test_every_op_on_many_seeds(self):
        from embedhead.core.api import _gradcheck_ops
        for seed in range(10):
            for name, function, params in _gradcheck_ops(np.random.default_rng(seed)):
                error = T.finite_diff_check(function, params)
                self.assertTrue(error < 1e-4, "op %s seed %s relative error %s" % (name, seed, error))

    def test_corrupted_backward_detected(self):
        def broken_double(a):
            return T._make(a.data * 2, (a,), lambda g: T._accumulate(a, g * 3), 'broken')
        x = T.Tensor([0.3, -1.2], requires_grad=True)
        error = T.finite_diff_check(lambda: T.reduce_sum(broken_double(x)), [x])
        self.assertTrue(error > 1e-2)


if __name__ == "__main__":
    unittest.main()
