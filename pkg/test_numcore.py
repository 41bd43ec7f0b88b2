"""
Unit tests for numcore.py
Tests tensor operators, reverse-mode gradients, optimizers and seeded randomness
"""
import unittest

import numpy as np

import numcore as nc
from numcore import Tensor
from scalecomm_utils import DomainError, StructuralError


def _param(rng, *shape, name=None):
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


class TestOperators(unittest.TestCase):
    """Test forward values and domain checks of the primitive operators"""

    def test_softmax_rows_sum_to_one(self):
        """Test softmax output is a distribution along the last axis"""
        x = Tensor([[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]])
        probs = nc.softmax(x, temperature=0.5).data
        np.testing.assert_allclose(probs.sum(axis=1), [1.0, 1.0])
        self.assertTrue(np.all(probs > 0))

    def test_softmax_rejects_non_positive_temperature(self):
        """Test softmax with τ <= 0 raises DomainError"""
        with self.assertRaises(DomainError):
            nc.softmax(Tensor([1.0, 2.0]), temperature=0.0)

    def test_softmax_rejects_non_finite_logits(self):
        """Test softmax refuses NaN input"""
        with self.assertRaises(DomainError):
            nc.softmax(Tensor([1.0, np.nan]))

    def test_log_of_non_positive_raises(self):
        """Test log(0) raises DomainError"""
        with self.assertRaises(DomainError):
            nc.log(Tensor([1.0, 0.0]))

    def test_division_by_zero_raises(self):
        """Test division by a zero tensor raises DomainError"""
        with self.assertRaises(DomainError):
            nc.div(Tensor([1.0]), Tensor([0.0]))

    def test_l2_normalize_zero_vector(self):
        """Test zero-norm normalization raises without eps and is floored with eps"""
        with self.assertRaises(DomainError):
            nc.l2_normalize(Tensor([[0.0, 0.0]]))
        out = nc.l2_normalize(Tensor([[0.0, 0.0]]), eps=1e-8).data
        np.testing.assert_array_equal(out, [[0.0, 0.0]])

    def test_cosine_sim_parallel_and_orthogonal(self):
        """Test cosine similarity of parallel vectors is 1 and of orthogonal vectors is 0"""
        self.assertAlmostEqual(nc.cosine_sim(Tensor([1.0, 2.0]), Tensor([2.0, 4.0])).item(), 1.0)
        self.assertAlmostEqual(nc.cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 3.0])).item(), 0.0)

    def test_cosine_sim_length_mismatch(self):
        """Test cosine_sim rejects vectors of different length"""
        with self.assertRaises(StructuralError):
            nc.cosine_sim(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_logsumexp_matches_numpy(self):
        """Test logsumexp agrees with the naive formula on moderate values"""
        x = np.array([[0.5, -1.0, 2.0], [3.0, 3.0, 3.0]])
        expected = np.log(np.exp(x).sum(axis=1))
        np.testing.assert_allclose(nc.logsumexp(Tensor(x), axis=1).data, expected)

    def test_logsumexp_is_stable_for_large_values(self):
        """Test logsumexp does not overflow"""
        out = nc.logsumexp(Tensor([1000.0, 1000.0])).item()
        self.assertAlmostEqual(out, 1000.0 + np.log(2.0))

    def test_matmul_shape_mismatch(self):
        """Test matmul with incompatible shapes raises StructuralError"""
        with self.assertRaises(StructuralError):
            nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_pick_selects_one_entry_per_row(self):
        """Test pick returns a[i, index[i]]"""
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nc.pick(a, [1, 0]).data, [2.0, 3.0])


class TestGradients(unittest.TestCase):
    """Test analytic gradients against central finite differences"""

    def setUp(self):
        self.rng = nc.Rng(7)

    def test_broadcast_add_mul(self):
        """Test broadcasting gradients are reduced back to the operand shape"""
        a = _param(self.rng, 3, 4)
        b = _param(self.rng, 4)
        error = nc.gradient_check(lambda: nc.tsum((a + b) * (a - b)), [a, b])
        self.assertLess(error, 1e-6)

    def test_matmul_and_division(self):
        """Test matmul and division gradients"""
        a = _param(self.rng, 3, 4)
        w = _param(self.rng, 4, 2)
        error = nc.gradient_check(lambda: nc.mean((a @ w) / (1.0 + nc.square(a @ w))), [a, w])
        self.assertLess(error, 1e-6)

    def test_batched_matmul(self):
        """Test a 3-D batch times a shared matrix"""
        a = _param(self.rng, 2, 3, 4)
        w = _param(self.rng, 4, 5)
        error = nc.gradient_check(lambda: nc.tsum(nc.exp((a @ w) * 0.1)), [a, w])
        self.assertLess(error, 1e-6)

    def test_log_softmax_and_pick(self):
        """Test the cross-entropy building blocks"""
        logits = _param(self.rng, 4, 3)
        error = nc.gradient_check(lambda: nc.mean(-nc.pick(nc.log_softmax(logits), [0, 2, 1, 1])), [logits])
        self.assertLess(error, 1e-6)

    def test_softmax_with_temperature(self):
        """Test softmax gradient including the temperature scale"""
        x = _param(self.rng, 3, 4)
        weights = self.rng.normal(size=(3, 4))
        error = nc.gradient_check(lambda: nc.tsum(nc.softmax(x, temperature=0.3) * weights), [x])
        self.assertLess(error, 1e-6)

    def test_cosine_sim_matrix(self):
        """Test normalization and pairwise cosine gradients"""
        a = _param(self.rng, 3, 4)
        b = _param(self.rng, 5, 4)
        error = nc.gradient_check(lambda: nc.logsumexp(nc.reshape(nc.cosine_sim_matrix(a, b), (15,))), [a, b])
        self.assertLess(error, 1e-6)

    def test_concat_take_rows_and_transpose(self):
        """Test structural operators, including repeated row indices"""
        a = _param(self.rng, 3, 2)
        b = _param(self.rng, 3, 3)

        def loss():
            joined = nc.concat([a, b], axis=-1)
            rows = nc.take_rows(joined, [0, 2, 2])
            return nc.tsum(nc.square(rows @ nc.transpose(joined)))

        self.assertLess(nc.gradient_check(loss, [a, b]), 1e-6)

    def test_sqrt_clip_minimum(self):
        """Test sqrt and the clipped-surrogate operators away from their kinks"""
        a = Tensor(np.array([0.5, 1.3, 2.0, 0.9]), requires_grad=True)

        def loss():
            ratio = nc.sqrt(a)
            return nc.tsum(nc.minimum(ratio * 2.0, nc.clip(ratio, 0.8, 1.2) * 2.0))

        self.assertLess(nc.gradient_check(loss, [a]), 1e-6)

    def test_shared_subexpression_accumulates(self):
        """Test a tensor used twice receives the sum of both gradients"""
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        nc.backward(nc.tsum(x * x))
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])


class TestBackward(unittest.TestCase):
    """Test the reverse pass bookkeeping"""

    def test_non_scalar_loss_raises(self):
        """Test backward refuses a vector loss"""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with self.assertRaises(StructuralError):
            nc.backward(x * 2.0)

    def test_unused_parameter_gets_zero_gradient(self):
        """Test parameters outside the graph receive zeros"""
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([[3.0]], requires_grad=True)
        nc.backward(nc.tsum(x), params=[x, unused])
        np.testing.assert_array_equal(unused.grad, [[0.0]])

    def test_cycle_detected(self):
        """Test a graph whose node is its own ancestor raises StructuralError"""
        a = Tensor(1.0, requires_grad=True)
        b = a * 2.0
        a._parents = (b,)
        with self.assertRaises(StructuralError):
            nc.ComputeGraph.trace(b)

    def test_no_grad_records_nothing(self):
        """Test tensors built under no_grad do not require grad"""
        x = Tensor([1.0], requires_grad=True)
        with nc.no_grad():
            y = x * 3.0
        self.assertFalse(y.requires_grad)
        self.assertTrue((x * 3.0).requires_grad)

    def test_graph_lists_inputs_before_outputs(self):
        """Test the traced order is topological"""
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        z = nc.tsum(y + x)
        order = nc.ComputeGraph.trace(z).order
        self.assertLess(order.index(x), order.index(y))
        self.assertIs(order[-1], z)


class TestOptimizers(unittest.TestCase):
    """Test SGD and Adam updates"""

    def test_sgd_step(self):
        """Test SGD subtracts lr * grad"""
        p = Tensor([1.0, 2.0], requires_grad=True)
        nc.SGD([p], lr=0.1).step([np.array([1.0, -1.0])])
        np.testing.assert_allclose(p.data, [0.9, 2.1])

    def test_adam_first_step_moves_by_lr(self):
        """Test Adam's bias-corrected first step is lr * sign(grad)"""
        p = Tensor([1.0, 2.0], requires_grad=True)
        opt = nc.Adam([p], lr=0.01)
        opt.step([np.array([0.5, -3.0])])
        np.testing.assert_allclose(p.data, [0.99, 2.01], atol=1e-6)

    def test_zero_gradient_leaves_parameter_and_moments(self):
        """Test a parameter with an all-zero gradient is skipped"""
        p = Tensor([1.0, 2.0], requires_grad=True)
        opt = nc.Adam([p], lr=0.01)
        opt.step([np.zeros(2)])
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        self.assertEqual(opt.t, [0])
        self.assertEqual(opt.step_count, 1)

    def test_shape_mismatch_raises(self):
        """Test a gradient of the wrong shape is rejected"""
        p = Tensor([1.0, 2.0], requires_grad=True)
        with self.assertRaises(StructuralError):
            nc.SGD([p], lr=0.1).step([np.zeros(3)])

    def test_optimizer_step_checks_parameter_list(self):
        """Test optimizer_step refuses parameters the optimizer does not own"""
        p = Tensor([1.0], requires_grad=True)
        other = Tensor([1.0], requires_grad=True)
        opt = nc.SGD([p], lr=0.1)
        with self.assertRaises(StructuralError):
            nc.optimizer_step([other], [np.ones(1)], opt)

    def test_non_positive_learning_rate(self):
        """Test lr <= 0 raises DomainError"""
        with self.assertRaises(DomainError):
            nc.Adam([Tensor([1.0], requires_grad=True)], lr=0.0)

    def test_sgd_minimizes_quadratic(self):
        """Test repeated steps on ‖x - 3‖² converge to 3"""
        x = Tensor([0.0, 10.0], requires_grad=True)
        opt = nc.SGD([x], lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            nc.backward(nc.tsum(nc.square(x - 3.0)), params=[x])
            opt.step()
        np.testing.assert_allclose(x.data, [3.0, 3.0], atol=1e-6)


class TestRng(unittest.TestCase):
    """Test seeded random streams"""

    def test_same_seed_same_stream(self):
        """Test equal seeds produce equal draws"""
        np.testing.assert_array_equal(nc.Rng(3).normal(size=5), nc.Rng(3).normal(size=5))

    def test_children_are_deterministic_and_distinct(self):
        """Test child streams depend only on the parent seed and keys"""
        parent = nc.Rng(11)
        self.assertEqual(parent.child('a', 1).seed, nc.Rng(11).child('a', 1).seed)
        self.assertNotEqual(parent.child('a', 1).seed, parent.child('a', 2).seed)
        self.assertNotEqual(parent.child('a').seed, parent.seed)

    def test_child_ignores_parent_draws(self):
        """Test drawing from the parent does not change its children"""
        parent = nc.Rng(5)
        before = parent.child('x').seed
        parent.normal(size=10)
        self.assertEqual(parent.child('x').seed, before)

    def test_he_uniform_bounds(self):
        """Test fan-in initialization stays within sqrt(6 / fan_in)"""
        w = nc.he_uniform(nc.Rng(0), 24, 8)
        self.assertEqual(w.shape, (24, 8))
        self.assertTrue(np.all(np.abs(w.data) <= np.sqrt(6.0 / 24)))
        self.assertTrue(w.requires_grad)


if __name__ == '__main__':
    unittest.main()
