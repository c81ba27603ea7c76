import unittest

import numpy as np

from embedhead.core import metrics as E
from embedhead.core import tensor as T
from embedhead.core.model import HeadOutput
from embedhead.core.common import MetricError


POISON_MAP = [True, False, False]

def confusion_case(n, errors, p_as_e, e_as_p):
    '''
    Class 0 poisonous, 1 and 2 edible; remaining errors are edible->edible
    '''
    truth = np.array([0] * (n // 2) + [1] * (n - n // 2))
    pred = truth.copy()
    pred[:p_as_e] = 1
    pred[n // 2:n // 2 + e_as_p] = 0
    rest = errors - p_as_e - e_as_p
    pred[n // 2 + e_as_p:n // 2 + e_as_p + rest] = 2
    return pred, truth


class Test_Track_Scores(unittest.TestCase):
    def test_large_triple(self):
        pred, truth = confusion_case(10000, 2160, 12, 18)
        s = E.track_scores(pred, truth, POISON_MAP)
        self.assertAlmostEqual(s.track1, 0.216)
        self.assertAlmostEqual(s.track2, 0.129)
        self.assertAlmostEqual(s.track3, 0.345)

    def test_small_triple(self):
        pred, truth = confusion_case(1000, 221, 3, 17)
        s = E.track_scores(pred, truth, POISON_MAP)
        self.assertAlmostEqual(s.track1, 0.221)
        self.assertAlmostEqual(s.track2, 0.385)
        self.assertAlmostEqual(s.track3, 0.606)

    def test_single_dangerous_mistake(self):
        s = E.track_scores([1, 1, 1, 2], [0, 1, 1, 2], POISON_MAP)
        self.assertEqual(s.track2, 25.0)
        self.assertEqual(s.track1, 0.25)
        self.assertEqual(s.track3, s.track1 + s.track2)
        self.assertEqual(tuple(s.confusion), (1.0, 0.0))

    def test_costs(self):
        costs = E.CostMatrixConfig(10, 1)
        s = E.track_scores([1, 0], [0, 1], POISON_MAP, costs)
        self.assertEqual(s.track2, (10 + 1) / 2.0)
        self.assertEqual(s.todict()['costs'], {'poisonous_as_edible': 10.0, 'edible_as_poisonous': 1.0})
        self.assertRaises(MetricError, E.CostMatrixConfig, -1, 1)

    def test_perfect(self):
        s = E.track_scores([0, 1, 2], [0, 1, 2], POISON_MAP)
        self.assertEqual((s.track1, s.track2, s.track3, s.macro_f1), (0.0, 0.0, 0.0, 1.0))

    def test_errors(self):
        self.assertRaises(MetricError, E.track_scores, [], [], POISON_MAP)
        self.assertRaises(MetricError, E.track_scores, [0, 1], [0], POISON_MAP)
        self.assertRaises(MetricError, E.track_scores, [5], [0], POISON_MAP)

    def test_confusion_without_poisonous_truth(self):
        c = E.poison_confusion([1, 2], [1, 2], POISON_MAP)
        self.assertTrue(c.empty)
        self.assertEqual(tuple(c), (0.0, 0.0))


class Test_Track_Properties(unittest.TestCase):
    def fixtures(self, count=1000):
        rng = np.random.default_rng(11)
        for _ in range(count):
            n_classes = int(rng.integers(2, 12))
            n = int(rng.integers(1, 60))
            poison_map = rng.random(n_classes) < 0.4
            truth = rng.integers(0, n_classes, n)
            pred = np.where(rng.random(n) < 0.6, truth, rng.integers(0, n_classes, n))
            yield pred, truth, poison_map

    def test_additivity_exact(self):
        for pred, truth, poison_map in self.fixtures():
            s = E.track_scores(pred, truth, poison_map)
            self.assertEqual(s.track3, s.track1 + s.track2)
            self.assertEqual(s.track1, 1.0 - s.accuracy)

    def test_no_cost_when_poison_status_kept(self):
        rng = np.random.default_rng(5)
        for pred, truth, poison_map in self.fixtures(200):
            same_status = []
            for t in truth:
                group = np.flatnonzero(poison_map == poison_map[t])
                same_status.append(group[rng.integers(0, len(group))])
            self.assertEqual(E.track_scores(same_status, truth, poison_map).track2, 0.0)

    def test_macro_f1_relabelling(self):
        rng = np.random.default_rng(3)
        for pred, truth, poison_map in self.fixtures(200):
            perm = rng.permutation(len(poison_map))
            self.assertAlmostEqual(E.macro_f1(pred, truth), E.macro_f1(perm[pred], perm[truth]), places=12)


class Test_Classification(unittest.TestCase):
    def test_macro_f1(self):
        self.assertAlmostEqual(E.macro_f1([0, 1, 1, 1], [0, 0, 1, 1]), 0.7333333333)

    def test_macro_f1_ignores_unsupported_predictions(self):
        # class 2 is predicted but never true
        self.assertAlmostEqual(E.macro_f1([0, 2], [0, 1]), 0.5)

    def test_topk(self):
        logits = np.array([[0.1, 0.5, 0.4], [1.0, 1.0, 0.0]])
        self.assertEqual(E.topk_indices(logits, 2).tolist(), [[1, 2], [0, 1]])
        self.assertEqual(E.topk_accuracy(logits, [2, 1], 1), 0.0)
        self.assertEqual(E.topk_accuracy(logits, [2, 1], 2), 1.0)
        self.assertRaises(MetricError, E.topk_indices, logits, 4)

    def test_score_output(self):
        output = HeadOutput(T.Tensor([[3.0, 1.0, 0.0], [0.0, 0.0, 5.0]]))
        s = E.score_output(output, [0, 1], POISON_MAP)
        self.assertEqual(s.accuracy, 0.5)
        self.assertEqual(s.top3, 1.0)
        self.assertEqual(s['track1'], 0.5)

    def test_poison_accuracy(self):
        output = HeadOutput(T.Tensor([[3.0, 1.0, 0.0], [0.0, 0.0, 5.0]]), T.Tensor([-1.0, 2.0]))
        self.assertEqual(E.poison_accuracy(output, [True, False], POISON_MAP), 0.0)
        output.poison_logit = None
        self.assertEqual(E.poison_accuracy(output, [True, False], POISON_MAP), 1.0)

    def test_per_class_report(self):
        rows = E.per_class_report([0, 1, 1, 1], [0, 0, 1, 1], ['a', 'b', 'c'])
        self.assertEqual([r[0] for r in rows], ['a', 'b'])
        self.assertEqual(rows[0][1], 2)
        self.assertAlmostEqual(rows[0][2], 1.0)
        self.assertAlmostEqual(rows[0][3], 0.5)

    def test_benchmark_table(self):
        s = E.track_scores([0, 1], [0, 1], POISON_MAP)
        self.assertEqual(E.benchmark_table([('fold0', s)]), [('fold0', 1.0, 0.0, 0.0, 0.0, 1.0)])


if __name__ == "__main__":
    unittest.main()
