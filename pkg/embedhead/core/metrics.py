# Evaluation: top-k accuracy, macro-F1, poisonousness confusion and the three track scores

import logging

import numpy as np
from sklearn.metrics import f1_score, precision_recall_fscore_support

from embedhead.core.common import MetricError
from embedhead.core.constants import Constants
from embedhead.core import model


logger = logging.getLogger('embedhead')


class CostMatrixConfig:
    def __init__(self, poisonous_as_edible=Constants.COST_POISONOUS_AS_EDIBLE, edible_as_poisonous=Constants.COST_EDIBLE_AS_POISONOUS):
        if poisonous_as_edible < 0 or edible_as_poisonous < 0:
            raise MetricError('Confusion costs must be nonnegative')
        self.poisonous_as_edible = float(poisonous_as_edible)
        self.edible_as_poisonous = float(edible_as_poisonous)

    @classmethod
    def from_settings(cls, settings):
        costs = settings['eval']['costs']
        return cls(costs['poisonous_as_edible'], costs['edible_as_poisonous'])

    def todict(self):
        return {'poisonous_as_edible': self.poisonous_as_edible, 'edible_as_poisonous': self.edible_as_poisonous}


def _aligned(pred, truth):
    pred, truth = np.asarray(pred, dtype=np.int64), np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise MetricError('Predictions (%s) and truth (%s) differ in length' % (len(pred), len(truth)))
    return pred, truth

def topk_indices(logits, k):
    '''
    Indices of the k highest logits per row, ties broken by ascending class index
    '''
    logits = np.asarray(logits, dtype=np.float64)
    if not 1 <= k <= logits.shape[1]:
        raise MetricError('k=%s outside [1, %s]' % (k, logits.shape[1]))
    return np.argsort(-logits, axis=1, kind='stable')[:, :k]

def topk_accuracy(logits, truth, k):
    top = topk_indices(logits, k)
    truth = np.asarray(truth, dtype=np.int64)
    if len(truth) != len(top):
        raise MetricError('Logit rows (%s) and truth (%s) differ in length' % (len(top), len(truth)))
    if not len(truth):
        return 0.0
    return float((top == truth[:, None]).any(axis=1).mean())

def macro_f1(pred, truth, classes=None):
    '''
    Unweighted mean of per-class F1 over the classes with truth support
    '''
    pred, truth = _aligned(pred, truth)
    if not len(truth):
        raise MetricError('Macro-F1 of an empty truth vector')
    if classes is None:
        classes = np.unique(truth)
    return float(f1_score(truth, pred, labels=classes, average='macro', zero_division=0))


class PoisonConfusion:
    def __init__(self, poisonous_as_edible, edible_as_poisonous, n_poisonous, n_edible):
        self.poisonous_as_edible = poisonous_as_edible
        self.edible_as_poisonous = edible_as_poisonous
        self.n_poisonous = n_poisonous
        self.n_edible = n_edible
        self.empty = not n_poisonous or not n_edible
        self.psc_rate = poisonous_as_edible / float(n_poisonous) if n_poisonous else 0.0
        self.esc_rate = edible_as_poisonous / float(n_edible) if n_edible else 0.0

    def __iter__(self):
        return iter((self.psc_rate, self.esc_rate))

def poison_confusion(pred, truth, poison_map):
    pred, truth = _aligned(pred, truth)
    poison_map = np.asarray(poison_map, dtype=bool)
    if len(pred) and max(pred.max(), truth.max()) >= len(poison_map):
        raise MetricError('Class index outside the poison map of %s classes' % len(poison_map))
    truly, said = poison_map[truth], poison_map[pred]
    return PoisonConfusion(int((truly & ~said).sum()), int((~truly & said).sum()), int(truly.sum()), int((~truly).sum()))


class TrackScores:
    report_keys = ['track1', 'track2', 'track3', 'accuracy', 'top3', 'macro_f1', 'psc_rate', 'esc_rate', 'n_samples']

    def __init__(self, accuracy, track2, macro_f1, confusion, n_samples, costs, top3=None):
        self.accuracy = accuracy
        self.track1 = 1.0 - accuracy
        self.track2 = track2
        self.track3 = self.track1 + self.track2
        self.macro_f1 = macro_f1
        self.psc_rate = confusion.psc_rate
        self.esc_rate = confusion.esc_rate
        self.confusion = confusion
        self.n_samples = n_samples
        self.costs = costs
        self.top3 = top3

    def __getitem__(self, key):
        return getattr(self, key)

    def todict(self):
        out = {key: getattr(self, key) for key in self.report_keys}
        out['costs'] = self.costs.todict()
        return out

def track_scores(pred, truth, poison_map, costs=None, top3=None):
    '''
    track1 = share misclassified, track2 = (c_pe * #poisonous->edible + c_ep * #edible->poisonous) / N,
    track3 = track1 + track2
    '''
    pred, truth = _aligned(pred, truth)
    if not len(truth):
        raise MetricError('Track scores of an empty prediction set')
    costs = costs or CostMatrixConfig()
    confusion = poison_confusion(pred, truth, poison_map)
    n = len(truth)
    accuracy = int((pred == truth).sum()) / float(n)
    track2 = (costs.poisonous_as_edible * confusion.poisonous_as_edible + costs.edible_as_poisonous * confusion.edible_as_poisonous) / n
    return TrackScores(accuracy, track2, macro_f1(pred, truth), confusion, n, costs, top3)

def score_output(output, truth, poison_map, costs=None):
    '''
    TrackScores of a HeadOutput, top-1 by stable argmax, with top-3 accuracy
    '''
    logits = output.class_logits.data
    pred = topk_indices(logits, 1)[:, 0]
    return track_scores(pred, truth, poison_map, costs, topk_accuracy(logits, truth, min(3, logits.shape[1])))

def poison_accuracy(output, poison_labels, poison_map):
    '''
    Binary poisonousness accuracy of the poison head, or of the predicted species without one
    '''
    labels = np.asarray(poison_labels, dtype=bool)
    if not len(labels):
        return 0.0
    if output.poison_logit is not None:
        said = output.poison_logit.data > 0
    else:
        said = np.asarray(poison_map, dtype=bool)[topk_indices(output.class_logits.data, 1)[:, 0]]
    return float((said == labels).mean())

def per_class_report(pred, truth, species_names):
    '''
    @returns rows (class, support, precision, recall, f1) for the classes with truth support
    '''
    pred, truth = _aligned(pred, truth)
    classes = np.unique(truth)
    precision, recall, f1, support = precision_recall_fscore_support(truth, pred, labels=classes, zero_division=0)
    return [(species_names[c], int(s), float(p), float(r), float(f)) for c, s, p, r, f in zip(classes, support, precision, recall, f1)]

def evaluate_run(members, data, catalog, costs=None, batch=1024):
    '''
    Logit-averaged inference of the members (list of (params, config)) over a Slice
    @returns (TrackScores, per-class rows, HeadOutput)
    '''
    batch_data = data.everything()
    output = model.ensemble_forward(members, batch_data['embeddings'], batch_data['features'], batch)
    scores = score_output(output, batch_data['labels'], catalog.poison_map, costs)
    pred = topk_indices(output.class_logits.data, 1)[:, 0]
    report = per_class_report(pred, batch_data['labels'], catalog.species_names)
    logger.info('Evaluated %s members on %s records: accuracy %.4f, track3 %.4f' % (len(members), scores.n_samples, scores.accuracy, scores.track3))
    return scores, report, output

def benchmark_table(named_scores):
    '''
    named_scores: list of (name, TrackScores), e.g. every fold checkpoint then the ensemble
    '''
    return [(name, s.accuracy, s.track1, s.track2, s.track3, s.macro_f1) for name, s in named_scores]
