import math
import unittest

import numpy as np

from embedhead.core import losses as L
from embedhead.core import tensor as T
from embedhead.core.model import HeadOutput
from embedhead.core.common import LossError
from embedhead.core.settings import load_settings


class Test_Primary(unittest.TestCase):
    def test_cross_entropy_values(self):
        self.assertAlmostEqual(L.cross_entropy(T.Tensor([[0.0, 0.0]]), [0]).item(), math.log(2))
        self.assertAlmostEqual(L.cross_entropy(T.Tensor([[10.0, -10.0]]), [0]).item(), 2.06115362e-9, delta=1e-12)

    def test_weighted_cross_entropy(self):
        logits = T.Tensor([[0.0, 0.0], [10.0, -10.0]])
        value = L.cross_entropy(logits, [0, 1], weights=[1.0, 3.0]).item()
        nll_second = 20.0 + math.log1p(math.exp(-20.0))
        self.assertAlmostEqual(value, (math.log(2) + 3 * nll_second) / 4)

    def test_focal_value(self):
        self.assertAlmostEqual(L.focal_loss(T.Tensor([[0.0, 0.0]]), [1], 2.0).item(), 0.25 * math.log(2))

    def test_focal_gamma_zero_is_cross_entropy(self):
        rng = np.random.default_rng(0)
        logits, targets = T.Tensor(rng.standard_normal((8, 5))), rng.integers(0, 5, 8)
        self.assertAlmostEqual(L.focal_loss(logits, targets, 0.0).item(), L.cross_entropy(logits, targets).item())

    def test_target_checks(self):
        self.assertRaises(LossError, L.cross_entropy, T.Tensor([[0.0, 0.0]]), [2])
        self.assertRaises(LossError, L.cross_entropy, T.Tensor([[0.0, 0.0]]), [0, 1])
        self.assertRaises(LossError, L.focal_loss, T.Tensor([[0.0, 0.0]]), [0], -1.0)

    def test_masked_cross_entropy(self):
        logits = T.Tensor([[5.0, -5.0], [0.0, 0.0]])
        self.assertAlmostEqual(L.masked_cross_entropy(logits, [-1, 1]).item(), math.log(2))
        self.assertEqual(L.masked_cross_entropy(logits, [-1, -1]).item(), 0.0)


class Test_Seesaw(unittest.TestCase):
    def test_mitigation_only(self):
        state = L.SeesawState([100, 10], p=1.0, q=0.0)
        logits = T.Tensor([[0.0, 0.0]])
        self.assertAlmostEqual(L.seesaw_loss(logits, [0], state).item(), math.log(1.1))
        self.assertAlmostEqual(L.seesaw_loss(logits, [1], state).item(), math.log(2))

    def test_compensation(self):
        state = L.SeesawState([10, 10], p=0.8, q=2.0)
        self.assertAlmostEqual(L.seesaw_loss(T.Tensor([[0.0, 1.0]]), [0], state).item(), math.log1p(math.exp(3.0)))

    def test_reduces_to_cross_entropy(self):
        rng = np.random.default_rng(2)
        logits, targets = T.Tensor(rng.standard_normal((6, 4))), rng.integers(0, 4, 6)
        state = L.SeesawState([5, 5, 5, 5], p=0.8, q=0.0)
        self.assertAlmostEqual(L.seesaw_loss(logits, targets, state).item(), L.cross_entropy(logits, targets).item())

    def test_factor_at_target_is_one(self):
        rng = np.random.default_rng(3)
        state = L.SeesawState([100, 30, 10, 1])
        targets = np.array([0, 1, 2, 3, 0])
        log_s = L.seesaw_factors(rng.standard_normal((5, 4)), targets, state)
        self.assertTrue(np.all(log_s[np.arange(5), targets] == 0))

    def test_frozen_factors_gradient(self):
        rng = np.random.default_rng(4)
        state = L.SeesawState([50, 20, 5], p=0.8, q=2.0)
        logits = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        targets = np.array([0, 2, 1, 2])
        frozen = L.seesaw_factors(logits.data, targets, state)
        error = T.finite_diff_check(lambda: L.seesaw_loss(logits, targets, state, log_factors=frozen), [logits])
        self.assertTrue(error < 1e-4, error)

    def test_zero_exponents_match_cross_entropy(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            n, c = int(rng.integers(1, 16)), int(rng.integers(2, 9))
            logits, targets = T.Tensor(3 * rng.standard_normal((n, c))), rng.integers(0, c, n)
            state = L.SeesawState(rng.integers(1, 500, c), p=0.0, q=0.0)
            ce = L.cross_entropy(logits, targets).item()
            self.assertAlmostEqual(L.seesaw_loss(logits, targets, state).item(), ce, delta=1e-9)
            self.assertAlmostEqual(L.focal_loss(logits, targets, 0.0).item(), ce, delta=1e-9)

    def test_mitigation_shrinks_with_rarer_negatives(self):
        logits = T.Tensor([[0.5, 0.2, -0.3]])
        previous = None
        for rare in (1000, 500, 100, 10, 1):
            state = L.SeesawState([1000, rare, 1000], p=0.8, q=0.0)
            value = L.seesaw_loss(logits, [0], state).item()
            if previous is not None:
                self.assertTrue(value < previous, "loss %s did not shrink below %s at count %s" % (value, previous, rare))
            previous = value
        # negatives at least as frequent as the target are not mitigated
        frequent = L.SeesawState([10, 1000, 10], p=0.8, q=0.0)
        self.assertAlmostEqual(L.seesaw_loss(logits, [0], frequent).item(),
                               L.cross_entropy(logits, [0]).item(), delta=1e-12)

    def test_class_count_mismatch(self):
        self.assertRaises(LossError, L.seesaw_loss, T.Tensor([[0.0, 0.0, 0.0]]), [0], L.SeesawState([1, 2]))
        self.assertRaises(LossError, L.SeesawState, [1, 2], -1.0)


class Test_Poison_And_Composite(unittest.TestCase):
    def test_bce_values(self):
        self.assertAlmostEqual(L.poison_bce(T.Tensor([20.0]), [1]).item(), 2.06115362e-9, delta=1e-12)
        self.assertAlmostEqual(L.poison_bce(T.Tensor([0.0]), [0]).item(), math.log(2))
        self.assertTrue(math.isfinite(L.poison_bce(T.Tensor([-800.0]), [1]).item()))
        self.assertRaises(LossError, L.poison_bce, T.Tensor([0.0, 1.0]), [1])

    def test_class_weights(self):
        self.assertTrue(np.allclose(L.class_weights([0.5, 0.25, 0.25, 0.0]), [0.6, 1.2, 1.2, 0.0]))
        self.assertRaises(LossError, L.class_weights, [0.0, 0.0])

    def test_composite_sum(self):
        output = HeadOutput(T.Tensor([[0.0, 0.0]]), T.Tensor([0.0]), {'genus': T.Tensor([[0.0, 0.0, 0.0]])})
        targets = {'labels': np.array([0]), 'poison': np.array([1.0]), 'taxonomy': {'genus': np.array([2])}}
        config = L.LossConfig('ce', alpha=0.5, aux_weights={'genus': 2.0})
        expected = math.log(2) + 0.5 * math.log(2) + 2.0 * math.log(3)
        self.assertAlmostEqual(L.composite_loss(output, targets, config).item(), expected)

    def test_composite_linear_in_alpha(self):
        rng = np.random.default_rng(8)
        state = L.SeesawState([40, 12, 3, 1])
        output = HeadOutput(T.Tensor(rng.standard_normal((10, 4))), T.Tensor(rng.standard_normal(10)))
        targets = {'labels': rng.integers(0, 4, 10), 'poison': (rng.random(10) < 0.5).astype(float), 'taxonomy': {}}
        def at(alpha):
            return L.composite_loss(output, targets, L.LossConfig('seesaw', alpha=alpha), state).item()
        base, slope = at(0.0), at(1.0) - at(0.0)
        bce = L.poison_bce(output.poison_logit, targets['poison']).item()
        self.assertAlmostEqual(slope, bce, delta=1e-9)
        for alpha in (0.05, 0.1, 0.5, 2.0, 10.0):
            self.assertAlmostEqual(at(alpha), base + alpha * slope, delta=1e-9)

    def test_composite_needs_poison_head(self):
        output = HeadOutput(T.Tensor([[0.0, 0.0]]))
        targets = {'labels': np.array([0]), 'poison': np.array([1.0]), 'taxonomy': {}}
        self.assertRaises(LossError, L.composite_loss, output, targets, L.LossConfig('ce', alpha=0.1))
        self.assertAlmostEqual(L.composite_loss(output, targets, L.LossConfig('ce', alpha=0.0)).item(), math.log(2))

    def test_seesaw_needs_state(self):
        output = HeadOutput(T.Tensor([[0.0, 0.0]]), T.Tensor([0.0]))
        targets = {'labels': np.array([0]), 'poison': np.array([1.0]), 'taxonomy': {}}
        self.assertRaises(LossError, L.composite_loss, output, targets, L.LossConfig('seesaw'))

    def test_config_checks(self):
        self.assertRaises(LossError, L.LossConfig, 'hinge')
        self.assertRaises(LossError, L.LossConfig, 'weighted_ce')
        self.assertRaises(LossError, L.LossConfig, 'ce', -0.1)
        self.assertRaises(LossError, L.LossConfig, 'ce', 0.1, 2.0, [1.0, np.inf])
        self.assertEqual(L.LossConfig().aux_weight('genus'), 0.1)

    def test_config_from_settings(self):
        settings = load_settings(overrides=['loss.kind=ce', 'loss.class_weighting=true'])
        config = L.loss_config_from_settings(settings, [0, 0, 0, 1], 3)
        self.assertEqual(config.kind, 'weighted_ce')
        self.assertTrue(np.allclose(config.class_weights, [0.5, 1.5, 0.0]))
        settings = load_settings(overrides=['model.aux_heads.poison=false', 'loss.alpha=0'])
        self.assertEqual(L.loss_config_from_settings(settings, [0, 1], 2).alpha, 0.0)


if __name__ == "__main__":
    unittest.main()
