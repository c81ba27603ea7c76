import unittest

import numpy as np

from embedhead.core import sampler as S
from embedhead.core.common import TrainingError


class Test_Weights(unittest.TestCase):
    def test_ratio_values(self):
        w = S.class_sampling_weights([0.5, 0.3, 0.2], [1 / 3.0, 1 / 3.0, 1 / 3.0])
        self.assertTrue(np.allclose(w, [2 / 3.0, 10 / 9.0, 5 / 3.0]))

    def test_floor_and_absent(self):
        w = S.class_sampling_weights([0.5, 0.5, 0.0], [1.0, 0.0, 0.5], floor_eps=0.01)
        self.assertTrue(np.allclose(w, [2.0, 0.02, 0.0]))

    def test_errors(self):
        self.assertRaises(TrainingError, S.class_sampling_weights, [0.5, 0.5], [0.0, 0.0])
        self.assertRaises(TrainingError, S.class_sampling_weights, [1.0, 0.0], [0.0, 1.0])
        self.assertRaises(TrainingError, S.class_sampling_weights, [1.0], [0.5, 0.5])
        self.assertRaises(TrainingError, S.SamplerWeights, [1.0], [0.0, 0.0])


class Test_Alias(unittest.TestCase):
    def test_enumeration_matches_weights(self):
        rng = np.random.default_rng(0)
        for n in (1, 2, 7, 50):
            weights = rng.uniform(0.01, 5, n)
            sw = S.SamplerWeights(np.ones(n), weights)
            self.assertTrue(np.max(np.abs(sw.probabilities() - weights / weights.sum())) < 1e-12)

    def test_zero_weight_never_drawn(self):
        sw = S.SamplerWeights(np.ones(3), [1.0, 0.0, 3.0])
        indices = S.draw_epoch_indices(sw, 5000, 1)
        self.assertNotIn(1, set(indices.tolist()))

    def test_draws_are_seeded(self):
        sw = S.SamplerWeights(np.ones(4), [1.0, 2.0, 3.0, 4.0])
        self.assertTrue(np.array_equal(S.draw_epoch_indices(sw, 100, 5), S.draw_epoch_indices(sw, 100, 5)))
        self.assertFalse(np.array_equal(S.draw_epoch_indices(sw, 100, 5), S.draw_epoch_indices(sw, 100, 6)))
        self.assertRaises(TrainingError, S.draw_epoch_indices, sw, 0, 5)


class Test_Distribution_Matching(unittest.TestCase):
    def test_sampled_distribution_matches_target(self):
        labels = np.repeat([0, 1, 2], [5000, 3000, 2000])
        target = np.array([0.2, 0.3, 0.5])
        sw = S.compute_sampling_weights([0.5, 0.3, 0.2], target, labels=labels)
        indices = S.draw_epoch_indices(sw, 100000, 0)
        empirical = S.sampled_class_distribution(indices, labels, 3)
        tv = 0.5 * np.abs(empirical - target).sum()
        self.assertTrue(tv < 0.02, "total variation %s" % tv)

    def test_class_level_weights(self):
        sw = S.compute_sampling_weights([0.5, 0.3, 0.2], [1 / 3.0, 1 / 3.0, 1 / 3.0])
        self.assertTrue(np.allclose(sw.probabilities(), [1 / 3.0] * 3))


if __name__ == "__main__":
    unittest.main()
